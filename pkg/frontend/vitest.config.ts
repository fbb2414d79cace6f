import { defineConfig } from "vitest/config";

export default defineConfig({
	test: {
		environment: "happy-dom",
		include: ["tests/**/*.test.ts"],
		testTimeout: 15000,
		hookTimeout: 180000,
	},
});
