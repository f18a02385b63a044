/** Image upload: streaming POST /upload with progress reporting. */

export interface UploadResult {
  accepted: boolean;
  sizeBytes: number;
  uploadSeconds: number;
}

export class UploadRejected extends Error {
  readonly status: number;

  constructor(status: number, detail: string) {
    super(detail);
    this.status = status;
  }
}

export interface UploadTransport {
  send(
    url: string,
    body: Blob,
    onProgress: (fraction: number) => void,
  ): Promise<UploadResult>;
}

function parseResult(status: number, text: string): UploadResult {
  let payload: Record<string, unknown> = {};
  try {
    payload = JSON.parse(text) as Record<string, unknown>;
  } catch {
    // non-JSON error bodies fall through to the detail below
  }
  if (status !== 200) {
    const detail =
      typeof payload["detail"] === "string"
        ? (payload["detail"] as string)
        : `upload rejected (${status})`;
    throw new UploadRejected(status, detail);
  }
  return {
    accepted: payload["accepted"] === true,
    sizeBytes: Number(payload["size_bytes"] ?? 0),
    uploadSeconds: Number(payload["upload_seconds"] ?? 0),
  };
}

/** Browser transport: XMLHttpRequest for native upload progress events. */
export class XhrTransport implements UploadTransport {
  send(
    url: string,
    body: Blob,
    onProgress: (fraction: number) => void,
  ): Promise<UploadResult> {
    return new Promise((resolve, reject) => {
      const xhr = new XMLHttpRequest();
      xhr.open("POST", url);
      xhr.upload.onprogress = (event) => {
        if (event.lengthComputable && event.total > 0) {
          onProgress(event.loaded / event.total);
        }
      };
      xhr.onload = () => {
        try {
          resolve(parseResult(xhr.status, xhr.responseText));
        } catch (err) {
          reject(err);
        }
      };
      xhr.onerror = () => reject(new Error("upload failed: network error"));
      xhr.send(body);
    });
  }
}

/** Fetch-based transport for non-browser drivers; progress is coarse. */
export class FetchTransport implements UploadTransport {
  private readonly fetchFn: typeof fetch;

  constructor(fetchFn: typeof fetch = fetch) {
    this.fetchFn = fetchFn;
  }

  async send(
    url: string,
    body: Blob,
    onProgress: (fraction: number) => void,
  ): Promise<UploadResult> {
    onProgress(0);
    const response = await this.fetchFn(url, { method: "POST", body });
    const text = await response.text();
    const result = parseResult(response.status, text);
    onProgress(1);
    return result;
  }
}

export interface UploadOptions {
  transport: UploadTransport;
  /** Origin prefix; empty for same-origin relative requests. */
  base?: string;
  onProgress?: (fraction: number) => void;
}

export async function uploadImage(
  file: Blob,
  options: UploadOptions,
): Promise<UploadResult> {
  const base = options.base ?? "";
  const onProgress = options.onProgress ?? (() => undefined);
  return options.transport.send(`${base}/upload`, file, onProgress);
}
