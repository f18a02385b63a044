/** Pure view routing plus the DOM renderer for the three session views. */

import type { SessionState, SessionView } from "./types.js";

export type ViewKind = "loader" | "desktop" | "terminated";

/** The view is a pure function of the server-reported state. */
export function viewFor(state: SessionState): ViewKind {
  if (state === "vm_running") {
    return "desktop";
  }
  if (state === "terminated") {
    return "terminated";
  }
  return "loader";
}

/** Path (same origin) where the proxied guest desktop is mounted. */
export const DESKTOP_MOUNT_PATH = "/";

/** Marker text the gateway serves when the proxied display endpoint is down. */
export const DISPLAY_UNAVAILABLE_MARKER = "guest display unavailable";

/**
 * True when a same-origin desktop frame loaded the gateway's 502 page
 * instead of the guest display client.
 */
export function frameShowsProxyError(frame: {
  contentDocument?: { body?: { textContent?: string | null } | null } | null;
}): boolean {
  try {
    const text = frame.contentDocument?.body?.textContent ?? "";
    return text.includes(DISPLAY_UNAVAILABLE_MARKER);
  } catch {
    return false; // cross-origin access would throw; never expected here
  }
}

export class AppView {
  readonly root: HTMLElement;
  readonly loaderSection: HTMLElement;
  readonly dropZone: HTMLElement;
  readonly fileInput: HTMLInputElement;
  readonly progressBar: HTMLElement;
  readonly progressFill: HTMLElement;
  readonly message: HTMLElement;
  readonly desktopSection: HTMLElement;
  readonly overlay: HTMLElement;
  readonly terminatedSection: HTMLElement;
  readonly transitionLog: HTMLElement;
  readonly banner: HTMLElement;

  private frame: HTMLIFrameElement | null = null;
  private kind: ViewKind | null = null;

  constructor(root: HTMLElement) {
    this.root = root;
    const doc = root.ownerDocument;

    this.loaderSection = doc.createElement("section");
    this.loaderSection.className = "loader-view";
    this.dropZone = doc.createElement("div");
    this.dropZone.className = "drop-zone";
    this.dropZone.textContent = "Drop a QCOW2 disk image here or pick a file";
    this.fileInput = doc.createElement("input");
    this.fileInput.type = "file";
    this.fileInput.accept = ".qcow2";
    this.progressBar = doc.createElement("div");
    this.progressBar.className = "progress";
    this.progressBar.hidden = true;
    this.progressFill = doc.createElement("span");
    this.progressBar.appendChild(this.progressFill);
    this.message = doc.createElement("p");
    this.message.className = "message";
    this.loaderSection.append(
      this.dropZone,
      this.fileInput,
      this.progressBar,
      this.message,
    );

    this.desktopSection = doc.createElement("section");
    this.desktopSection.className = "desktop-view";
    this.desktopSection.hidden = true;
    this.overlay = doc.createElement("div");
    this.overlay.className = "overlay";
    this.overlay.hidden = true;
    this.overlay.textContent = "guest display unavailable";
    this.desktopSection.appendChild(this.overlay);

    this.terminatedSection = doc.createElement("section");
    this.terminatedSection.className = "terminated-view";
    this.terminatedSection.hidden = true;
    const heading = doc.createElement("h2");
    heading.textContent = "Session ended";
    this.transitionLog = doc.createElement("pre");
    this.transitionLog.className = "transition-log";
    this.terminatedSection.append(heading, this.transitionLog);

    this.banner = doc.createElement("div");
    this.banner.className = "reconnect-banner";
    this.banner.hidden = true;
    this.banner.textContent = "connection lost; retrying";

    root.append(this.banner, this.loaderSection, this.desktopSection, this.terminatedSection);
  }

  get currentKind(): ViewKind | null {
    return this.kind;
  }

  get desktopFrame(): HTMLIFrameElement | null {
    return this.frame;
  }

  setProgress(fraction: number): void {
    this.progressBar.hidden = false;
    const percent = Math.max(0, Math.min(100, Math.round(fraction * 100)));
    this.progressFill.style.width = `${percent}%`;
    this.progressFill.dataset["percent"] = String(percent);
  }

  showError(text: string): void {
    this.message.textContent = text;
    this.message.classList.add("error");
  }

  showInfo(text: string): void {
    this.message.textContent = text;
    this.message.classList.remove("error");
  }

  setConnectionLost(lost: boolean): void {
    this.banner.hidden = !lost;
  }

  setDisplayUnavailable(unavailable: boolean): void {
    this.overlay.hidden = !unavailable;
  }

  /** Idempotent render: identical consecutive states cause no DOM churn. */
  render(view: SessionView): void {
    const kind = viewFor(view.state);
    if (kind === this.kind) {
      return;
    }
    this.kind = kind;
    this.loaderSection.hidden = kind !== "loader";
    this.desktopSection.hidden = kind !== "desktop";
    this.terminatedSection.hidden = kind !== "terminated";
    if (kind === "desktop" && this.frame === null) {
      // Same-origin mount: the proxied desktop lives on this very endpoint.
      const frame = this.root.ownerDocument.createElement("iframe");
      frame.className = "desktop-frame";
      frame.title = "guest desktop";
      frame.setAttribute("src", DESKTOP_MOUNT_PATH);
      frame.addEventListener("load", () => {
        this.setDisplayUnavailable(frameShowsProxyError(frame));
      });
      this.desktopSection.appendChild(frame);
      this.frame = frame;
    }
    if (kind === "terminated") {
      this.transitionLog.textContent = JSON.stringify(view.transitions, null, 2);
    }
  }
}
