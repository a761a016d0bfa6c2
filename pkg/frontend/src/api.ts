// Thin client over the retrieval service. The UI does no ranking math;
// it renders exactly what the service returns.

export interface ResultTile {
  id: string;
  label: string;
  distance: number;
  thumbnail_url: string;
  mode: "pre" | "post";
}

export interface QueryResponse {
  results: ResultTile[];
  latency_ms: number;
}

export class ServiceError extends Error {
  readonly status: number | null;

  constructor(message: string, status: number | null = null) {
    super(message);
    this.status = status;
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Base64 without data: prefix, as the service expects. */
export function pngToBase64(png: Uint8Array): string {
  let binary = "";
  for (const byte of png) binary += String.fromCharCode(byte);
  return btoa(binary);
}

/**
 * Query client enforcing a single in-flight request: a new submit aborts
 * the pending one, so stale results can never land after fresh ones.
 */
export class QueryClient {
  private readonly baseUrl: string;
  private readonly fetchFn: FetchLike;
  private pending: AbortController | null = null;

  constructor(baseUrl: string, fetchFn: FetchLike = fetch) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.fetchFn = fetchFn;
  }

  async query(png: Uint8Array, k: number, rerank: boolean): Promise<QueryResponse> {
    this.pending?.abort();
    const controller = new AbortController();
    this.pending = controller;
    let resp: Response;
    try {
      resp = await this.fetchFn(`${this.baseUrl}/query`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ sketch_png_base64: pngToBase64(png), k, rerank }),
        signal: controller.signal,
      });
    } catch (err) {
      if (controller.signal.aborted) throw new ServiceError("superseded by a newer query");
      throw new ServiceError(`service unreachable: ${String(err)}`);
    } finally {
      if (this.pending === controller) this.pending = null;
    }
    if (!resp.ok) {
      let reason = resp.statusText || `HTTP ${resp.status}`;
      try {
        const body = await resp.json();
        if (body && typeof body.error === "string") reason = body.error;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ServiceError(reason, resp.status);
    }
    return (await resp.json()) as QueryResponse;
  }

  thumbnailUrl(tile: ResultTile): string {
    return `${this.baseUrl}${tile.thumbnail_url}`;
  }

  async health(): Promise<{ status: string; d: number; index_size: number }> {
    const resp = await this.fetchFn(`${this.baseUrl}/health`);
    if (!resp.ok) throw new ServiceError(`health check failed`, resp.status);
    return resp.json();
  }
}
