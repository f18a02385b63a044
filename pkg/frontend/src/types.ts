/** Shapes mirrored from the gateway's /status endpoint. */

export type SessionState = "loader" | "vm_running" | "terminated";

export interface TransitionEntry {
  timestamp: number;
  from: string;
  event: string;
  to: string;
  cause: string | null;
}

/** One /status payload, parsed and validated. Never locally invented. */
export interface SessionView {
  state: SessionState;
  sessionId: string;
  configId: string | null;
  cause: string | null;
  timestamps: Record<string, number>;
  transitions: TransitionEntry[];
}

const KNOWN_STATES: readonly string[] = ["loader", "vm_running", "terminated"];

/**
 * Parse a raw /status JSON document into a SessionView.
 *
 * Unknown states are an error rather than a guess: the view must stay an
 * exact mirror of what the server reported.
 */
export function parseStatus(payload: unknown): SessionView {
  if (typeof payload !== "object" || payload === null) {
    throw new Error("status payload is not an object");
  }
  const doc = payload as Record<string, unknown>;
  const state = doc["state"];
  if (typeof state !== "string" || !KNOWN_STATES.includes(state)) {
    throw new Error(`unknown session state: ${String(state)}`);
  }
  return {
    state: state as SessionState,
    sessionId: String(doc["session_id"] ?? ""),
    configId: (doc["config_id"] as string | null) ?? null,
    cause: (doc["cause"] as string | null) ?? null,
    timestamps: (doc["timestamps"] as Record<string, number>) ?? {},
    transitions: (doc["transitions"] as TransitionEntry[]) ?? [],
  };
}
