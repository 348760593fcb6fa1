import type {
  HealthResponse,
  QueryRequest,
  QueryResponse,
  UploadResponse,
} from "./types.js";

/** Server-reported failure, carrying the machine code and human message. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function raiseForStatus(resp: Response): Promise<void> {
  if (resp.ok) return;
  let code = "error";
  let message = `HTTP ${resp.status}`;
  try {
    const body = await resp.json();
    const detail = body?.detail;
    if (detail && typeof detail === "object") {
      code = detail.code ?? code;
      message = detail.message ?? message;
    } else if (typeof detail === "string") {
      message = detail;
    }
  } catch {
    // non-JSON error body; keep the generic message
  }
  throw new ApiError(resp.status, code, message);
}

/** Thin typed client over the service's three endpoints. */
export class ApiClient {
  private readonly fetchFn: FetchLike;

  constructor(
    readonly baseUrl: string,
    fetchFn?: FetchLike,
  ) {
    this.fetchFn = fetchFn ?? ((input, init) => fetch(input, init));
  }

  /** POST raw PNG bytes; the server resizes and caches the encoded tokens. */
  async registerImage(png: ArrayBuffer | Uint8Array): Promise<UploadResponse> {
    const body = png instanceof Uint8Array ? new Uint8Array(png).buffer : png;
    const resp = await this.fetchFn(`${this.baseUrl}/v1/images`, {
      method: "POST",
      headers: { "content-type": "image/png" },
      body,
    });
    await raiseForStatus(resp);
    return (await resp.json()) as UploadResponse;
  }

  async query(req: QueryRequest): Promise<QueryResponse> {
    const resp = await this.fetchFn(`${this.baseUrl}/v1/query`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(req),
    });
    await raiseForStatus(resp);
    return (await resp.json()) as QueryResponse;
  }

  async healthz(): Promise<HealthResponse> {
    const resp = await this.fetchFn(`${this.baseUrl}/v1/healthz`);
    await raiseForStatus(resp);
    return (await resp.json()) as HealthResponse;
  }
}
