// Typed client for the scene service. The UI only ever mutates server state
// through POST/DELETE /edit; everything else is idempotent reads.

import type { EditRequest, FramePayload, ScenePayload, TrackSummary } from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class SceneApi {
  constructor(
    private base: string = "",
    private fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchImpl(`${this.base}${path}`, init);
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const body = await resp.json();
        if (body && typeof body.detail === "string") detail = body.detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(resp.status, detail);
    }
    return (await resp.json()) as T;
  }

  getScene(): Promise<ScenePayload> {
    return this.request<ScenePayload>("/scene");
  }

  getTracks(): Promise<TrackSummary[]> {
    return this.request<TrackSummary[]>("/tracks");
  }

  getFrame(t: number, signal?: AbortSignal): Promise<FramePayload> {
    return this.request<FramePayload>(`/frame?t=${encodeURIComponent(t)}`, { signal });
  }

  applyEdit(edit: EditRequest): Promise<unknown> {
    return this.request("/edit", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(edit),
    });
  }

  clearEdit(): Promise<unknown> {
    return this.request("/edit", { method: "DELETE" });
  }
}
