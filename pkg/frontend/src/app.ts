/** Wiring: drop zone and file input feed the uploader; the poll drives views. */

import { startStatusPoll, type PollHandle } from "./poll.js";
import type { SessionView } from "./types.js";
import {
  UploadRejected,
  XhrTransport,
  uploadImage,
  type UploadTransport,
} from "./upload.js";
import { AppView } from "./view.js";

export interface AppOptions {
  fetchFn?: typeof fetch;
  transport?: UploadTransport;
  pollIntervalMs?: number;
}

export class App {
  readonly view: AppView;
  private readonly transport: UploadTransport;
  private readonly poll: PollHandle;
  private uploading = false;

  constructor(root: HTMLElement, options: AppOptions = {}) {
    this.view = new AppView(root);
    this.transport = options.transport ?? new XhrTransport();
    this.wireInputs();
    this.poll = startStatusPoll((view) => this.onStatus(view), {
      fetchFn: options.fetchFn,
      intervalMs: options.pollIntervalMs,
      onConnectionLost: (lost) => this.view.setConnectionLost(lost),
    });
  }

  stop(): void {
    this.poll.stop();
  }

  /** Exposed for tests: apply one status payload synchronously. */
  onStatus(view: SessionView): void {
    this.view.render(view);
  }

  private wireInputs(): void {
    const { dropZone, fileInput } = this.view;
    dropZone.addEventListener("dragover", (event) => {
      event.preventDefault();
      dropZone.classList.add("hover");
    });
    dropZone.addEventListener("dragleave", () => dropZone.classList.remove("hover"));
    dropZone.addEventListener("drop", (event) => {
      event.preventDefault();
      dropZone.classList.remove("hover");
      const files = (event as DragEvent).dataTransfer?.files;
      if (files && files.length > 0) {
        void this.startUpload(files[0]);
      }
    });
    fileInput.addEventListener("change", () => {
      const file = fileInput.files?.[0];
      if (file) {
        void this.startUpload(file);
      }
    });
  }

  async startUpload(file: Blob): Promise<void> {
    if (this.uploading || this.view.currentKind !== "loader") {
      return;
    }
    this.uploading = true;
    this.view.showInfo("uploading image");
    try {
      await uploadImage(file, {
        transport: this.transport,
        onProgress: (fraction) => this.view.setProgress(fraction),
      });
      this.view.showInfo("upload accepted; launching guest");
    } catch (err) {
      // Server-side rejection (bad format, too large) renders inline and
      // leaves the loader usable for a retry.
      if (err instanceof UploadRejected) {
        this.view.showError(err.message);
      } else {
        this.view.showError("upload failed; check the connection and retry");
      }
    } finally {
      this.uploading = false;
    }
  }
}

export function mount(root: HTMLElement, options: AppOptions = {}): App {
  return new App(root, options);
}
