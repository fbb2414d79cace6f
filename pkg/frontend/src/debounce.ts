/** Trailing-edge debouncer: the callback fires once, delayMs after the last
 * call. A newer schedule supersedes any pending one. */
export function createDebouncer<T>(delayMs: number, fn: (value: T) => void) {
	let timer: ReturnType<typeof setTimeout> | null = null;
	const schedule = (value: T) => {
		if (timer !== null) clearTimeout(timer);
		timer = setTimeout(() => {
			timer = null;
			fn(value);
		}, delayMs);
	};
	schedule.cancel = () => {
		if (timer !== null) clearTimeout(timer);
		timer = null;
	};
	schedule.pending = () => timer !== null;
	return schedule;
}
