/** Typed client for the session service. Every request the UI makes goes
 * through this module, so the documented endpoints are the only ones it can
 * reach. */

export interface Meta {
  max_levels: number;
  latent_dim: number;
  num_classes: number;
  steps_default: number;
  cfg_scale_default: number;
  grid_default: { t: number; h: number; w: number };
  decode_multiples: { height: number; width: number; fps: number };
}

export interface CreateBody {
  class_id?: number;
  seed?: number;
  steps?: number;
  cfg_scale?: number;
  grid?: { t: number; h: number; w: number };
}

export interface SessionInfo {
  id: string;
  levels_done: number;
  max_levels: number;
}

export interface SessionStatus extends SessionInfo {
  class_id: number;
  seed: number;
  grid: number[];
  steps: number;
  cfg_scale: number;
  level_digests: string[];
}

export interface Scale {
  height: number;
  width: number;
  fps: number;
  frame: number;
}

/** Non-2xx response. `message` is the server's `detail` string verbatim. */
export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

type Fetch = (url: string, init?: RequestInit) => Promise<Response>;

async function raise(res: Response): Promise<never> {
  let message = `${res.status} ${res.statusText}`;
  try {
    const body = await res.json();
    if (body && typeof body.detail === "string") message = body.detail;
  } catch {
    // non-JSON error body; keep the status line
  }
  throw new ApiError(res.status, message);
}

export class Api {
  private readonly f: Fetch;

  constructor(readonly base: string, f?: Fetch) {
    this.f = f ?? ((url, init) => fetch(url, init));
  }

  private url(path: string): string {
    return new URL(path, this.base).toString();
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.f(this.url(path), init);
    if (!res.ok) await raise(res);
    return (await res.json()) as T;
  }

  meta(): Promise<Meta> {
    return this.json("/api/meta");
  }

  create(body: CreateBody): Promise<SessionInfo> {
    return this.json("/api/sessions", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  status(id: string): Promise<SessionStatus> {
    return this.json(`/api/sessions/${id}`);
  }

  refine(id: string): Promise<SessionInfo> {
    return this.json(`/api/sessions/${id}/refine`, { method: "POST" });
  }

  /** PNG bytes for the first `levels` levels rendered at `scale`. */
  async decode(id: string, levels: number, scale: Scale): Promise<Uint8Array> {
    const q = new URLSearchParams({
      levels: String(levels),
      height: String(scale.height),
      width: String(scale.width),
      fps: String(scale.fps),
      frame: String(scale.frame),
    });
    const res = await this.f(this.url(`/api/sessions/${id}/decode?${q}`));
    if (!res.ok) await raise(res);
    return new Uint8Array(await res.arrayBuffer());
  }

  async remove(id: string): Promise<void> {
    const res = await this.f(this.url(`/api/sessions/${id}`), { method: "DELETE" });
    if (!res.ok) await raise(res);
  }
}
