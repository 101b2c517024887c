import type {
  AnnotationEvent,
  MaskLevel,
  PatchesPayload,
  RoundResult,
  SessionInfo,
} from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

/** Thin typed client over the review service endpoints. */
export class ApiClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchFn(`${this.baseUrl}${path}`, init);
    const body = await res.json().catch(() => ({}));
    if (!res.ok) {
      throw new ApiError(res.status, (body as { detail?: string }).detail ?? res.statusText);
    }
    return body as T;
  }

  getSession(): Promise<SessionInfo> {
    return this.json<SessionInfo>("/api/session");
  }

  getPatches(round?: number): Promise<PatchesPayload> {
    const suffix = round === undefined ? "" : `?round=${round}`;
    return this.json<PatchesPayload>(`/api/patches${suffix}`);
  }

  postAnnotations(events: AnnotationEvent[]): Promise<{ accepted: number; pending: number }> {
    return this.json("/api/annotations", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(events),
    });
  }

  postRound(): Promise<RoundResult> {
    return this.json<RoundResult>("/api/round", { method: "POST" });
  }

  /** URL for the current mask PNG; the browser <img> fetches it directly. */
  maskUrl(level: MaskLevel, cacheBust: number): string {
    return `${this.baseUrl}/api/mask?level=${level}&t=${cacheBust}`;
  }
}
