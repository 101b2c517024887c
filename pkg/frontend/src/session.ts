import { ApiClient, ApiError } from "./api.js";
import type { AnnotationEvent, DiceEntry, PatchInfo, SessionInfo } from "./types.js";

export type SessionStatus = "idle" | "round-running" | "offline";

/**
 * Client-side session state. The server is the single source of truth:
 * every mutation here either queues pending events locally or replays the
 * state the server returned. Masks are never edited locally.
 */
export class UISession {
  info: SessionInfo | null = null;
  patches: PatchInfo[] = [];
  pending: AnnotationEvent[] = [];
  selectedClass = 0;
  status: SessionStatus = "idle";
  lastError: string | null = null;

  constructor(readonly api: ApiClient, private readonly now: () => number = Date.now) {}

  get round(): number {
    return this.info?.round_index ?? 0;
  }

  get diceHistory(): DiceEntry[] {
    return this.info?.dice_log ?? [];
  }

  /** Pull session metadata and the patch grid; reconstructs state on refresh. */
  async sync(): Promise<void> {
    try {
      this.info = await this.api.getSession();
      this.patches = (await this.api.getPatches(this.info.round_index)).patches;
      if (this.status === "offline") {
        this.status = "idle";
      }
      this.lastError = null;
    } catch (err) {
      this.status = "offline";
      this.lastError = err instanceof Error ? err.message : String(err);
      throw err;
    }
  }

  /**
   * Queue one correction locally. A second correction for the same patch
   * replaces the first, mirroring the server's last-event-wins rule.
   */
  stageCorrection(patchId: number, classIndex: number): void {
    this.pending = this.pending.filter((ev) => ev.patch_id !== patchId);
    this.pending.push({ patch_id: patchId, class_index: classIndex, timestamp: this.now() });
  }

  /**
   * Push pending events; on ack the queue is cleared and the grid
   * re-fetched. On any failure (validation or network) the events stay
   * queued so nothing the reviewer entered is lost.
   */
  async submitCorrections(): Promise<number> {
    if (this.pending.length === 0) {
      throw new Error("no pending corrections");
    }
    const batch = [...this.pending];
    try {
      const ack = await this.api.postAnnotations(batch);
      this.pending = [];
      this.patches = (await this.api.getPatches()).patches;
      this.lastError = null;
      return ack.accepted;
    } catch (err) {
      this.lastError = err instanceof Error ? err.message : String(err);
      if (!(err instanceof ApiError)) {
        this.status = "offline";
      }
      throw err;
    }
  }

  /** Trigger one refinement round; no-ops and busy responses are surfaced. */
  async runRound(): Promise<{ noop: boolean; busy: boolean }> {
    if (this.status === "round-running") {
      return { noop: true, busy: true };
    }
    this.status = "round-running";
    try {
      const result = await this.api.postRound();
      await this.sync();
      return { noop: result.noop, busy: false };
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        this.lastError = err.detail;
        return { noop: true, busy: true };
      }
      throw err;
    } finally {
      if (this.status === "round-running") {
        this.status = "idle";
      }
    }
  }
}
