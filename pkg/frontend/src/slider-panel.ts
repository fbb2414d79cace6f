import type { SliderLimits, SliderName, SliderValues } from "./api.js";
import { createDebouncer } from "./debounce.js";
import { clampToLimits, zeroSliders } from "./state.js";

const LABELS: Record<SliderName, string> = {
	d_height: "Height (cm)",
	d_weight: "Weight (kg)",
	d_leg_girth: "Leg girth (cm)",
	d_proportion: "Proportion (cm)",
};

export interface SliderPanelOptions {
	limits: SliderLimits;
	onCommit: (values: SliderValues) => void;
	debounceMs?: number;
	doc?: Document;
}

export interface SliderPanel {
	element: HTMLElement;
	values(): SliderValues;
	setValues(values: SliderValues): void;
	setFieldError(field: SliderName | null, message?: string): void;
	reset(): void;
}

/** Four-slider edit panel. Movements update the readout instantly; a commit
 * (one reshape request) fires once, 300 ms after the last movement. Displayed
 * values always equal the committed payload. */
export function createSliderPanel(options: SliderPanelOptions): SliderPanel {
	const doc = options.doc ?? document;
	const debounceMs = options.debounceMs ?? 300;
	const values = zeroSliders();
	const element = doc.createElement("form");
	element.className = "slider-panel";

	const commit = createDebouncer<SliderValues>(debounceMs, (payload) => options.onCommit(payload));

	const rows = new Map<SliderName, { input: HTMLInputElement; number: HTMLInputElement; error: HTMLElement }>();

	for (const name of Object.keys(LABELS) as SliderName[]) {
		const [lo, hi] = options.limits[name];
		const row = doc.createElement("label");
		row.className = "slider-row";

		const title = doc.createElement("span");
		title.className = "slider-label";
		title.textContent = LABELS[name];

		const input = doc.createElement("input");
		input.type = "range";
		input.name = name;
		input.min = String(lo);
		input.max = String(hi);
		input.step = "0.5";
		input.value = "0";

		const number = doc.createElement("input");
		number.type = "number";
		number.className = "slider-value";
		number.min = String(lo);
		number.max = String(hi);
		number.step = "0.5";
		number.value = "0";

		const error = doc.createElement("span");
		error.className = "slider-error";
		error.hidden = true;

		const apply = (raw: number) => {
			const clamped = Math.min(hi, Math.max(lo, raw));
			values[name] = clamped;
			input.value = String(clamped);
			number.value = String(clamped);
			commit({ ...values });
		};
		input.addEventListener("input", () => apply(Number(input.value)));
		number.addEventListener("change", () => apply(Number(number.value) || 0));

		row.append(title, input, number, error);
		element.append(row);
		rows.set(name, { input, number, error });
	}

	return {
		element,
		values: () => ({ ...values }),
		setValues(next) {
			const clamped = clampToLimits(next, options.limits);
			for (const [name, row] of rows) {
				values[name] = clamped[name];
				row.input.value = String(clamped[name]);
				row.number.value = String(clamped[name]);
			}
		},
		setFieldError(field, message) {
			for (const [name, row] of rows) {
				const active = field === name;
				row.error.hidden = !active;
				row.error.textContent = active ? (message ?? "invalid value") : "";
			}
		},
		reset() {
			commit.cancel();
			this.setValues(zeroSliders());
		},
	};
}
