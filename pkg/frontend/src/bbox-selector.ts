import type { Bbox } from "./api.js";

export const MIN_BOX_SIDE = 5; // px in original-image coordinates; <= 4 is degenerate

/** Map a point in display (client) coordinates into original-image pixels,
 * undoing whatever scale the layout applied to the displayed image. */
export function displayToImage(
	clientX: number,
	clientY: number,
	displayRect: { left: number; top: number; width: number; height: number },
	imageWidth: number,
	imageHeight: number,
): [number, number] {
	const sx = imageWidth / displayRect.width;
	const sy = imageHeight / displayRect.height;
	return [(clientX - displayRect.left) * sx, (clientY - displayRect.top) * sy];
}

export function dragToBbox(
	start: [number, number],
	end: [number, number],
): Bbox | null {
	const x0 = Math.min(start[0], end[0]);
	const y0 = Math.min(start[1], end[1]);
	const w = Math.abs(end[0] - start[0]);
	const h = Math.abs(end[1] - start[1]);
	if (w < MIN_BOX_SIDE || h < MIN_BOX_SIDE) return null;
	return [Math.round(x0), Math.round(y0), Math.round(w), Math.round(h)];
}

export interface BboxSelectorOptions {
	imageWidth: number;
	imageHeight: number;
	candidates: Bbox[];
	onSelect: (bbox: Bbox) => void;
	onReject?: (hint: string) => void;
	doc?: Document;
}

export interface BboxSelector {
	element: HTMLElement;
	/** Programmatic candidate pick (also used by click handlers). */
	pickCandidate(index: number): void;
	/** Feed a completed drag in client coordinates (exposed for tests). */
	completeDrag(
		start: { clientX: number; clientY: number },
		end: { clientX: number; clientY: number },
		rect: { left: number; top: number; width: number; height: number },
	): Bbox | null;
}

/** Overlay offering detected-person boxes to click plus free-draw selection.
 * Emitted boxes are always in original-image pixel coordinates regardless of
 * how the image is scaled on screen. */
export function createBboxSelector(options: BboxSelectorOptions): BboxSelector {
	const doc = options.doc ?? document;
	const element = doc.createElement("div");
	element.className = "bbox-selector";

	for (let i = 0; i < options.candidates.length; i++) {
		const [x, y, w, h] = options.candidates[i];
		const box = doc.createElement("button");
		box.type = "button";
		box.className = "bbox-candidate";
		box.dataset.index = String(i);
		box.title = `person ${i + 1}`;
		box.style.left = `${(100 * x) / options.imageWidth}%`;
		box.style.top = `${(100 * y) / options.imageHeight}%`;
		box.style.width = `${(100 * w) / options.imageWidth}%`;
		box.style.height = `${(100 * h) / options.imageHeight}%`;
		box.addEventListener("click", () => selector.pickCandidate(i));
		element.append(box);
	}

	let dragStart: [number, number] | null = null;
	element.addEventListener("mousedown", (ev) => {
		const rect = element.getBoundingClientRect();
		dragStart = displayToImage(ev.clientX, ev.clientY, rect, options.imageWidth, options.imageHeight);
	});
	element.addEventListener("mouseup", (ev) => {
		if (!dragStart) return;
		const rect = element.getBoundingClientRect();
		const end = displayToImage(ev.clientX, ev.clientY, rect, options.imageWidth, options.imageHeight);
		const bbox = dragToBbox(dragStart, end);
		dragStart = null;
		if (bbox) options.onSelect(bbox);
		else options.onReject?.("draw a larger box around one person");
	});

	const selector: BboxSelector = {
		element,
		pickCandidate(index) {
			options.onSelect(options.candidates[index]);
		},
		completeDrag(start, end, rect) {
			const a = displayToImage(start.clientX, start.clientY, rect, options.imageWidth, options.imageHeight);
			const b = displayToImage(end.clientX, end.clientY, rect, options.imageWidth, options.imageHeight);
			const bbox = dragToBbox(a, b);
			if (bbox) options.onSelect(bbox);
			else options.onReject?.("draw a larger box around one person");
			return bbox;
		},
	};
	return selector;
}
