import { describe, expect, it } from "vitest";

import { clampToLimits, DEFAULT_LIMITS, initialState, renderHistory, renderStatusLine, zeroSliders } from "../src/state.js";

describe("state rendering is pure", () => {
	it("status line snapshots per state", () => {
		const state = initialState();
		expect(renderStatusLine(state)).toMatchInlineSnapshot(`"Upload a photo to begin."`);
		state.status = "preprocessing";
		expect(renderStatusLine(state)).toMatchInlineSnapshot(`"Preparing… (preprocessing)"`);
		state.status = "ready";
		state.selectionRequired = true;
		state.candidates = [
			[0, 0, 10, 10],
			[20, 0, 10, 10],
		];
		expect(renderStatusLine(state)).toMatchInlineSnapshot(`"Ready — 2 people found, pick one."`);
		state.selectionRequired = false;
		state.currentResultId = "abc123";
		expect(renderStatusLine(state)).toMatchInlineSnapshot(`"Showing result abc123."`);
		state.status = "failed";
		state.error = "no person";
		expect(renderStatusLine(state)).toMatchInlineSnapshot(`"Failed: no person"`);
	});

	it("same state always renders the same history markup", () => {
		const state = initialState();
		state.history = [
			{ sliders: { ...zeroSliders(), d_weight: 10 }, result_id: "r1" },
			{ sliders: zeroSliders(), result_id: "r2" },
		];
		state.currentResultId = "r2";
		const a = renderHistory(state, document).outerHTML;
		const b = renderHistory(state, document).outerHTML;
		expect(a).toBe(b);
		expect(a).toMatchInlineSnapshot(
			`"<ol class="history"><li data-result-id="r1">weight +10</li><li data-result-id="r2" class="current">original</li></ol>"`,
		);
	});

	it("clamping respects the declared limits", () => {
		const clamped = clampToLimits({ d_height: 50, d_weight: -50, d_leg_girth: 3, d_proportion: -11 }, DEFAULT_LIMITS);
		expect(clamped).toEqual({ d_height: 20, d_weight: -20, d_leg_girth: 3, d_proportion: -10 });
	});
});
