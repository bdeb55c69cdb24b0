/** Shared test plumbing: a canned-route fetch double that records every call,
 * and a minimal PNG byte fixture (valid signature + IHDR, which is all the
 * client ever parses). */

export interface Call {
  method: string;
  url: URL;
}

export type Handler = (url: URL, init?: RequestInit) => Response | Promise<Response>;

export class FakeServer {
  calls: Call[] = [];
  private routes = new Map<string, Handler>();

  /** key is "METHOD /path" with no query string */
  on(method: string, path: string, handler: Handler): this {
    this.routes.set(`${method} ${path}`, handler);
    return this;
  }

  json(method: string, path: string, status: number, body: unknown): this {
    return this.on(method, path, () =>
      new Response(JSON.stringify(body), {
        status,
        headers: { "Content-Type": "application/json" },
      }));
  }

  png(method: string, path: string, bytes: Uint8Array): this {
    return this.on(method, path, () =>
      new Response(bytes.slice().buffer as ArrayBuffer, {
        status: 200,
        headers: { "Content-Type": "image/png" },
      }));
  }

  fetch = async (url: string, init?: RequestInit): Promise<Response> => {
    const parsed = new URL(url);
    const method = init?.method ?? "GET";
    this.calls.push({ method, url: parsed });
    const handler = this.routes.get(`${method} ${parsed.pathname}`);
    if (!handler) {
      return new Response(JSON.stringify({ detail: "Not Found" }), { status: 404 });
    }
    return handler(parsed, init);
  };

  callCount(method: string, pathPrefix: string): number {
    return this.calls.filter(
      (c) => c.method === method && c.url.pathname.startsWith(pathPrefix),
    ).length;
  }
}

/** PNG with a correct signature and IHDR. `tag` lands in a trailing chunk so
 * fixtures for different levels differ byte-wise. */
export function fakePng(width: number, height: number, tag = 0): Uint8Array {
  const bytes = new Uint8Array(8 + 25 + 13 + tag % 7);
  bytes.set([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a], 0);
  const view = new DataView(bytes.buffer);
  view.setUint32(8, 13); // IHDR length
  bytes.set([0x49, 0x48, 0x44, 0x52], 12);
  view.setUint32(16, width);
  view.setUint32(20, height);
  bytes.set([8, 6, 0, 0, 0], 24);
  bytes[33] = tag & 0xff; // stand-in CRC; the client never checks it
  bytes.set([0x49, 0x45, 0x4e, 0x44], 37);
  return bytes;
}

export const META = {
  max_levels: 4,
  latent_dim: 8,
  num_classes: 3,
  steps_default: 50,
  cfg_scale_default: 6,
  grid_default: { t: 1, h: 4, w: 4 },
  decode_multiples: { height: 4, width: 4, fps: 1 },
};
