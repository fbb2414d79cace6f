/** Typed client for the reshape service HTTP API. All server interaction goes
 * through these endpoints and nothing else. */

export type SliderName = "d_height" | "d_weight" | "d_leg_girth" | "d_proportion";

export type SliderValues = Record<SliderName, number>;

export type SliderLimits = Record<SliderName, [number, number]>;

export type Bbox = [number, number, number, number]; // x, y, width, height

export interface SessionStatus {
	id: string;
	status: "preprocessing" | "fitting" | "ready" | "failed";
	bboxes: Bbox[];
	stages: Record<string, number>;
	history: { sliders: SliderValues; result_id: string }[];
	selection_required: boolean;
	error?: string;
}

export interface ApiErrorBody {
	code: string;
	message: string;
	field?: string;
}

export class ApiRequestError extends Error {
	constructor(
		public status: number,
		public body: ApiErrorBody,
	) {
		super(body.message);
	}
}

async function parseOrThrow<T>(res: Response): Promise<T> {
	if (!res.ok) {
		let body: ApiErrorBody;
		try {
			body = (await res.json()) as ApiErrorBody;
		} catch {
			body = { code: "http_error", message: `HTTP ${res.status}` };
		}
		throw new ApiRequestError(res.status, body);
	}
	return (await res.json()) as T;
}

export class ApiClient {
	constructor(
		private baseUrl: string = "",
		private fetchFn: typeof fetch = fetch,
	) {}

	async limits(): Promise<SliderLimits> {
		const res = await this.fetchFn(`${this.baseUrl}/api/limits`);
		const data = await parseOrThrow<{ sliders: SliderLimits }>(res);
		return data.sliders;
	}

	async createSession(file: Blob, filename: string): Promise<string> {
		const form = new FormData();
		form.append("image", file, filename);
		const res = await this.fetchFn(`${this.baseUrl}/api/sessions`, { method: "POST", body: form });
		const data = await parseOrThrow<{ id: string }>(res);
		return data.id;
	}

	async getSession(id: string): Promise<SessionStatus> {
		const res = await this.fetchFn(`${this.baseUrl}/api/sessions/${id}`);
		return parseOrThrow<SessionStatus>(res);
	}

	async selectPerson(id: string, bbox: Bbox): Promise<void> {
		const res = await this.fetchFn(`${this.baseUrl}/api/sessions/${id}/select`, {
			method: "POST",
			headers: { "Content-Type": "application/json" },
			body: JSON.stringify({ bbox }),
		});
		await parseOrThrow(res);
	}

	async reshape(id: string, sliders: SliderValues): Promise<string> {
		const res = await this.fetchFn(`${this.baseUrl}/api/sessions/${id}/reshape`, {
			method: "POST",
			headers: { "Content-Type": "application/json" },
			body: JSON.stringify(sliders),
		});
		const data = await parseOrThrow<{ result_id: string }>(res);
		return data.result_id;
	}

	resultUrl(id: string, resultId: string): string {
		return `${this.baseUrl}/api/sessions/${id}/results/${resultId}`;
	}

	originalUrl(id: string): string {
		return `${this.baseUrl}/api/sessions/${id}/original`;
	}

	async fetchResultBytes(id: string, resultId: string): Promise<ArrayBuffer> {
		const res = await this.fetchFn(this.resultUrl(id, resultId));
		if (!res.ok) throw new ApiRequestError(res.status, { code: "http_error", message: `HTTP ${res.status}` });
		return res.arrayBuffer();
	}

	async waitUntilSettled(id: string, pollMs = 300, timeoutMs = 120000): Promise<SessionStatus> {
		const start = Date.now();
		for (;;) {
			const status = await this.getSession(id);
			if (status.status === "ready" || status.status === "failed") return status;
			if (Date.now() - start > timeoutMs) throw new Error("session polling timed out");
			await new Promise((resolve) => setTimeout(resolve, pollMs));
		}
	}
}
