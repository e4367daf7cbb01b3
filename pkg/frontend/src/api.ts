/** Thin HTTP client. Every number or mask the viewer shows comes from here. */

export interface Rle {
  size: number[];
  counts: number[];
}

export interface Meta {
  frames: number;
  width: number;
  height: number;
  num_states: number;
  levels: string[];
}

export interface QueryResponse {
  masks: Rle[];
  scores: (number | null)[];
  selectedFrames: number[];
  threshold: number | null;
  level: string;
  mode: string;
}

export type QueryMode = "timeAgnostic" | "timeSensitive";

export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{ ok: boolean; status: number; json(): Promise<unknown> }>;

export class ApiError extends Error {
  constructor(
    message: string,
    readonly status: number,
  ) {
    super(message);
  }
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike,
  ) {}

  frameUrl(t: number): string {
    return `${this.baseUrl}/frame/${t}.png`;
  }

  renderUrl(payload: "rgb" | "pca", t: number): string {
    return `${this.baseUrl}/render/${payload}/${t}.png`;
  }

  relevanceUrl(t: number, query: string): string {
    return `${this.baseUrl}/render/relevance/${t}.png?query=${encodeURIComponent(query)}`;
  }

  async meta(): Promise<Meta> {
    const resp = await this.fetchImpl(`${this.baseUrl}/meta`);
    if (!resp.ok) {
      throw new ApiError(`meta request failed (${resp.status})`, resp.status);
    }
    return (await resp.json()) as Meta;
  }

  async query(text: string, mode: QueryMode): Promise<QueryResponse> {
    const resp = await this.fetchImpl(`${this.baseUrl}/query`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ text, mode }),
    });
    if (!resp.ok) {
      let detail = `query failed (${resp.status})`;
      try {
        const body = (await resp.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        // keep the generic message when the error body is not JSON
      }
      throw new ApiError(detail, resp.status);
    }
    return (await resp.json()) as QueryResponse;
  }
}
