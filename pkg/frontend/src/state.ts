import type { Bbox, SliderLimits, SliderValues } from "./api.js";

/** Mirror of the server session plus purely client-side view state. */
export interface UiSessionState {
	sessionId: string | null;
	status: "idle" | "preprocessing" | "fitting" | "ready" | "failed";
	error: string | null;
	candidates: Bbox[];
	selectionRequired: boolean;
	selectedBbox: Bbox | null;
	sliders: SliderValues;
	limits: SliderLimits;
	currentResultId: string | null;
	history: { sliders: SliderValues; result_id: string }[];
	requestInFlight: boolean;
}

export const DEFAULT_LIMITS: SliderLimits = {
	d_height: [-20, 20],
	d_weight: [-20, 20],
	d_leg_girth: [-10, 10],
	d_proportion: [-10, 10],
};

export function zeroSliders(): SliderValues {
	return { d_height: 0, d_weight: 0, d_leg_girth: 0, d_proportion: 0 };
}

export function initialState(): UiSessionState {
	return {
		sessionId: null,
		status: "idle",
		error: null,
		candidates: [],
		selectionRequired: false,
		selectedBbox: null,
		sliders: zeroSliders(),
		limits: DEFAULT_LIMITS,
		currentResultId: null,
		history: [],
		requestInFlight: false,
	};
}

export function clampToLimits(values: SliderValues, limits: SliderLimits): SliderValues {
	const out = { ...values };
	for (const key of Object.keys(out) as (keyof SliderValues)[]) {
		const [lo, hi] = limits[key];
		out[key] = Math.min(hi, Math.max(lo, out[key]));
	}
	return out;
}

/** Render the status line as a pure function of state (snapshot-tested). */
export function renderStatusLine(state: UiSessionState): string {
	if (state.status === "idle") return "Upload a photo to begin.";
	if (state.status === "preprocessing" || state.status === "fitting") {
		return `Preparing… (${state.status})`;
	}
	if (state.status === "failed") return `Failed: ${state.error ?? "unknown error"}`;
	if (state.selectionRequired) return `Ready — ${state.candidates.length} people found, pick one.`;
	if (state.requestInFlight) return "Reshaping…";
	if (state.currentResultId) return `Showing result ${state.currentResultId}.`;
	return "Ready — move the sliders.";
}

/** Pure DOM rendering of the history list. */
export function renderHistory(state: UiSessionState, doc: Document): HTMLElement {
	const list = doc.createElement("ol");
	list.className = "history";
	for (const entry of state.history) {
		const item = doc.createElement("li");
		item.dataset.resultId = entry.result_id;
		const parts = Object.entries(entry.sliders)
			.filter(([, v]) => v !== 0)
			.map(([k, v]) => `${k.replace("d_", "")} ${v > 0 ? "+" : ""}${v}`);
		item.textContent = parts.length ? parts.join(", ") : "original";
		if (entry.result_id === state.currentResultId) item.classList.add("current");
		list.append(item);
	}
	return list;
}
