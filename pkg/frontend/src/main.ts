import { ApiClient, ApiRequestError, type SliderName, type SliderValues } from "./api.js";
import { createBboxSelector } from "./bbox-selector.js";
import { createBeforeAfterView } from "./before-after.js";
import { createSliderPanel, type SliderPanel } from "./slider-panel.js";
import { initialState, renderHistory, renderStatusLine, type UiSessionState } from "./state.js";

const api = new ApiClient("");
const state: UiSessionState = initialState();

const statusLine = document.getElementById("status") as HTMLElement;
const uploadInput = document.getElementById("upload") as HTMLInputElement;
const selectorHost = document.getElementById("selector") as HTMLElement;
const panelHost = document.getElementById("panel") as HTMLElement;
const viewHost = document.getElementById("view") as HTMLElement;
const historyHost = document.getElementById("history") as HTMLElement;

const view = createBeforeAfterView();
viewHost.append(view.element);

let panel: SliderPanel | null = null;
let inFlight = false;
let pending: SliderValues | null = null;

function renderState(): void {
	statusLine.textContent = renderStatusLine(state);
	historyHost.replaceChildren(renderHistory(state, document));
}

async function boot(): Promise<void> {
	try {
		state.limits = await api.limits();
	} catch {
		// server defaults mirror the client fallbacks
	}
	renderState();
}

uploadInput.addEventListener("change", async () => {
	const file = uploadInput.files?.[0];
	if (!file) return;
	state.status = "preprocessing";
	renderState();
	try {
		state.sessionId = await api.createSession(file, file.name);
		await refresh();
	} catch (err) {
		state.status = "failed";
		state.error = err instanceof Error ? err.message : String(err);
		renderState();
	}
});

async function refresh(): Promise<void> {
	if (!state.sessionId) return;
	const status = await api.waitUntilSettled(state.sessionId);
	state.status = status.status;
	state.error = status.error ?? null;
	state.candidates = status.bboxes;
	state.selectionRequired = status.selection_required;
	state.history = status.history;
	renderState();
	if (status.status === "ready" && status.selection_required) {
		mountSelector();
	} else if (status.status === "ready") {
		mountPanel();
		await commitSliders({ d_height: 0, d_weight: 0, d_leg_girth: 0, d_proportion: 0 });
	}
}

function mountSelector(): void {
	const selector = createBboxSelector({
		imageWidth: 1,
		imageHeight: 1,
		candidates: state.candidates,
		onSelect: async (bbox) => {
			if (!state.sessionId) return;
			state.selectedBbox = bbox;
			state.status = "fitting";
			renderState();
			await api.selectPerson(state.sessionId, bbox);
			await refresh();
		},
		onReject: (hint) => {
			statusLine.textContent = hint;
		},
	});
	selectorHost.replaceChildren(selector.element);
}

function mountPanel(): void {
	if (panel) return;
	panel = createSliderPanel({
		limits: state.limits,
		onCommit: (values) => void commitSliders(values),
	});
	panelHost.replaceChildren(panel.element);
}

async function commitSliders(values: SliderValues): Promise<void> {
	if (!state.sessionId) return;
	if (inFlight) {
		pending = values; // newer commit supersedes any queued one
		return;
	}
	inFlight = true;
	state.requestInFlight = true;
	renderState();
	try {
		const resultId = await api.reshape(state.sessionId, values);
		state.currentResultId = resultId;
		state.sliders = values;
		state.history = (await api.getSession(state.sessionId)).history;
		view.setImages(api.originalUrl(state.sessionId), api.resultUrl(state.sessionId, resultId));
		view.setExportBytes(await api.fetchResultBytes(state.sessionId, resultId), `reshape_${resultId}.png`);
		panel?.setFieldError(null);
	} catch (err) {
		if (err instanceof ApiRequestError && err.body.field) {
			panel?.setFieldError(err.body.field as SliderName, err.body.message);
		} else {
			state.error = err instanceof Error ? err.message : String(err);
		}
	} finally {
		inFlight = false;
		state.requestInFlight = false;
		renderState();
		if (pending) {
			const next = pending;
			pending = null;
			void commitSliders(next);
		}
	}
}

historyHost.addEventListener("click", (ev) => {
	const item = (ev.target as HTMLElement).closest("li");
	if (!item?.dataset.resultId || !state.sessionId) return;
	state.currentResultId = item.dataset.resultId;
	view.setImages(api.originalUrl(state.sessionId), api.resultUrl(state.sessionId, item.dataset.resultId));
	renderState();
});

void boot();
