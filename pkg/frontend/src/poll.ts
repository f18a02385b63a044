/** Status polling loop: one request a second drives the whole view. */

import { parseStatus, type SessionView } from "./types.js";

export const POLL_INTERVAL_MS = 1000;

export interface PollOptions {
  fetchFn?: typeof fetch;
  intervalMs?: number;
  base?: string;
  /** Network failure hook; the last known view must remain untouched. */
  onConnectionLost?: (lost: boolean) => void;
}

export interface PollHandle {
  stop(): void;
  /** Runs one poll immediately; exposed for tests and initial paint. */
  tick(): Promise<void>;
}

export function startStatusPoll(
  onView: (view: SessionView) => void,
  options: PollOptions = {},
): PollHandle {
  const fetchFn = options.fetchFn ?? fetch;
  const base = options.base ?? "";
  const interval = options.intervalMs ?? POLL_INTERVAL_MS;
  const onConnectionLost = options.onConnectionLost ?? (() => undefined);
  let stopped = false;

  async function tick(): Promise<void> {
    try {
      const response = await fetchFn(`${base}/status`);
      if (!response.ok) {
        throw new Error(`status ${response.status}`);
      }
      const view = parseStatus(await response.json());
      if (!stopped) {
        onConnectionLost(false);
        onView(view);
      }
    } catch {
      // Keep the last known view; just surface the reconnect banner.
      if (!stopped) {
        onConnectionLost(true);
      }
    }
  }

  const timer = setInterval(() => {
    void tick();
  }, interval);
  void tick();

  return {
    stop() {
      stopped = true;
      clearInterval(timer);
    },
    tick,
  };
}
