import { ApiClient, ApiError, QueryMode, QueryResponse } from "./api.js";
import { maskArea } from "./rle.js";

export type OverlayKind = "none" | "mask" | "relevanceHeatmap" | "pca";

export interface ViewState {
  frame: number;
  queryText: string;
  queryMode: QueryMode;
  overlay: OverlayKind;
  lastResult: QueryResponse | null;
  /** True when the last query returned no matching pixels in any frame. */
  noMatch: boolean;
  /** Inline service-error message; null when the last request succeeded. */
  error: string | null;
  busy: boolean;
}

function emptyResult(result: QueryResponse): boolean {
  return (
    result.selectedFrames.length === 0 &&
    result.masks.every((m) => maskArea(m) === 0)
  );
}

/**
 * Owns the view state. Query submission is the only operation that talks to
 * the service; scrubbing and overlay switches are purely local so the cached
 * response is reused until the next submit.
 */
export class ViewerController {
  readonly state: ViewState;
  private inFlight = false;

  constructor(
    private readonly api: ApiClient,
    readonly frameCount: number,
  ) {
    if (frameCount < 1) throw new Error("scene must have at least one frame");
    this.state = {
      frame: 0,
      queryText: "",
      queryMode: "timeSensitive",
      overlay: "none",
      lastResult: null,
      noMatch: false,
      error: null,
      busy: false,
    };
  }

  /** Clamp to the valid range and move; never triggers a network request. */
  scrub(t: number): void {
    this.state.frame = Math.min(Math.max(Math.trunc(t), 0), this.frameCount - 1);
  }

  async submitQuery(text: string, mode: QueryMode): Promise<void> {
    if (this.inFlight) return; // at most one in-flight query
    this.inFlight = true;
    this.state.busy = true;
    this.state.error = null;
    try {
      const result = await this.api.query(text, mode);
      this.state.queryText = text;
      this.state.queryMode = mode;
      this.state.lastResult = result;
      this.state.noMatch = emptyResult(result);
      this.state.overlay = this.state.noMatch ? "none" : "mask";
    } catch (err) {
      this.state.lastResult = null;
      this.state.noMatch = false;
      this.state.overlay = "none";
      this.state.error =
        err instanceof ApiError ? err.message : `service unreachable: ${err}`;
    } finally {
      this.inFlight = false;
      this.state.busy = false;
    }
  }

  setOverlay(kind: OverlayKind): void {
    this.state.overlay = kind;
  }

  /** Frames to highlight on the timeline: exactly the response's selection. */
  highlightedFrames(): Set<number> {
    return new Set(this.state.lastResult?.selectedFrames ?? []);
  }

  /** Whether the current frame's mask is shown full or dimmed. */
  frameSelected(t: number): boolean {
    const result = this.state.lastResult;
    if (result === null) return false;
    if (result.mode === "timeAgnostic") return true;
    return result.selectedFrames.includes(t);
  }

  maskFor(t: number) {
    return this.state.lastResult?.masks[t] ?? null;
  }

  /** Raw per-frame scores straight from the API (tooltips show these). */
  rawScores(): (number | null)[] {
    return this.state.lastResult?.scores ?? [];
  }

  /** Scores min-max rescaled to [0, 1] for the plot. */
  plotScores(): (number | null)[] {
    const raw = this.rawScores();
    const present = raw.filter((s): s is number => s !== null);
    if (present.length === 0) return raw;
    const lo = Math.min(...present);
    const hi = Math.max(...present);
    const span = hi - lo;
    return raw.map((s) => (s === null ? null : span > 0 ? (s - lo) / span : 0.5));
  }

  /** Threshold mapped into the same rescaled plot coordinates. */
  plotThreshold(): number | null {
    const result = this.state.lastResult;
    if (result === null || result.threshold === null) return null;
    const present = this.rawScores().filter((s): s is number => s !== null);
    if (present.length === 0) return null;
    const lo = Math.min(...present);
    const hi = Math.max(...present);
    const span = hi - lo;
    return span > 0 ? (result.threshold - lo) / span : 0.5;
  }
}
