/** Before/after comparison: side-by-side and draggable-split modes, pixel
 * aligned, plus a lossless export of the served bytes. */

export interface BeforeAfterOptions {
	doc?: Document;
}

export interface BeforeAfterView {
	element: HTMLElement;
	setImages(originalUrl: string, resultUrl: string): void;
	setMode(mode: "side-by-side" | "split"): void;
	setSplit(fraction: number): void;
	/** Bytes for the export button; stored verbatim and downloaded unmodified. */
	setExportBytes(bytes: ArrayBuffer | null, filename?: string): void;
	exportBlob(): Blob | null;
}

export function createBeforeAfterView(options: BeforeAfterOptions = {}): BeforeAfterView {
	const doc = options.doc ?? document;
	const element = doc.createElement("div");
	element.className = "before-after side-by-side";

	const beforePane = doc.createElement("div");
	beforePane.className = "pane before";
	const beforeImg = doc.createElement("img");
	beforeImg.alt = "original";
	beforePane.append(beforeImg);

	const afterPane = doc.createElement("div");
	afterPane.className = "pane after";
	const afterImg = doc.createElement("img");
	afterImg.alt = "result";
	afterPane.append(afterImg);

	const divider = doc.createElement("input");
	divider.type = "range";
	divider.className = "split-divider";
	divider.min = "0";
	divider.max = "100";
	divider.value = "50";

	const exportButton = doc.createElement("button");
	exportButton.type = "button";
	exportButton.className = "export";
	exportButton.textContent = "Export PNG";
	exportButton.disabled = true;

	element.append(beforePane, afterPane, divider, exportButton);

	let exportBytes: ArrayBuffer | null = null;
	let exportName = "reshaped.png";

	divider.addEventListener("input", () => view.setSplit(Number(divider.value) / 100));
	exportButton.addEventListener("click", () => {
		const blob = view.exportBlob();
		if (!blob) return;
		const anchor = doc.createElement("a");
		anchor.href = URL.createObjectURL(blob);
		anchor.download = exportName;
		anchor.click();
		URL.revokeObjectURL(anchor.href);
	});

	const view: BeforeAfterView = {
		element,
		setImages(originalUrl, resultUrl) {
			beforeImg.src = originalUrl;
			afterImg.src = resultUrl;
		},
		setMode(mode) {
			element.classList.toggle("side-by-side", mode === "side-by-side");
			element.classList.toggle("split", mode === "split");
		},
		setSplit(fraction) {
			const pct = Math.min(100, Math.max(0, fraction * 100));
			afterPane.style.clipPath = `inset(0 0 0 ${pct}%)`;
			divider.value = String(Math.round(pct));
		},
		setExportBytes(bytes, filename) {
			exportBytes = bytes;
			if (filename) exportName = filename;
			exportButton.disabled = bytes === null;
		},
		exportBlob() {
			return exportBytes ? new Blob([exportBytes], { type: "image/png" }) : null;
		},
	};
	return view;
}
