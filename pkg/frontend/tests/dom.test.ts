import { beforeEach, describe, expect, test } from "vitest";

import { App } from "../src/app.js";
import { FakeServer, fakePng, META } from "./helpers.js";

const BASE = "http://unit.test:9";

function pngResponse(bytes: Uint8Array): Response {
  return new Response(bytes.slice().buffer as ArrayBuffer, {
    status: 200,
    headers: { "Content-Type": "image/png" },
  });
}

/** Service double with one session: refines count up, decode renders the
 * requested size and varies by level, height must be a multiple of 4. */
function sessionServer(maxLevels = 4): FakeServer {
  const state = { levels: 0 };
  const srv = new FakeServer()
    .json("GET", "/api/meta", 200, { ...META, max_levels: maxLevels })
    .on("POST", "/api/sessions", () => {
      state.levels = 0;
      return new Response(JSON.stringify(
        { id: "abc123", levels_done: 0, max_levels: maxLevels }), { status: 201 });
    })
    .on("GET", "/api/sessions/abc123", () => new Response(JSON.stringify(
      { id: "abc123", levels_done: state.levels, max_levels: maxLevels,
        class_id: 0, seed: 0, grid: [1, 4, 4], steps: 8, cfg_scale: 6,
        level_digests: [] }), { status: 200 }))
    .on("POST", "/api/sessions/abc123/refine", () => {
      if (state.levels >= maxLevels) {
        return new Response(JSON.stringify(
          { detail: `session already holds all ${maxLevels} levels` }), { status: 409 });
      }
      state.levels++;
      return new Response(JSON.stringify(
        { id: "abc123", levels_done: state.levels, max_levels: maxLevels }),
        { status: 200 });
    })
    .on("GET", "/api/sessions/abc123/decode", (url) => {
      const h = Number(url.searchParams.get("height"));
      const w = Number(url.searchParams.get("width"));
      const levels = Number(url.searchParams.get("levels"));
      if (h % 4 !== 0) {
        return new Response(JSON.stringify(
          { detail: "height must be a positive multiple of 4" }), { status: 422 });
      }
      return pngResponse(fakePng(w, h, levels));
    });
  return srv;
}

async function bootApp(srv: FakeServer): Promise<App> {
  const root = document.createElement("div");
  document.body.append(root);
  const app = new App(root, BASE, { fetchImpl: srv.fetch });
  await app.boot();
  return app;
}

function field(app: App, id: string): HTMLInputElement {
  return app.root.querySelector(`#${id}`) as HTMLInputElement;
}

function button(app: App, id: string): HTMLButtonElement {
  return app.root.querySelector(`#${id}`) as HTMLButtonElement;
}

async function click(app: App, id: string): Promise<void> {
  button(app, id).click();
  await app.idle();
}

async function createSession(app: App): Promise<void> {
  (app.root.querySelector("#create-form") as HTMLFormElement)
    .dispatchEvent(new Event("submit", { cancelable: true }));
  await app.idle();
}

beforeEach(() => {
  document.body.innerHTML = "";
  location.hash = "";
});

describe("create form", () => {
  test("defaults come from /api/meta", async () => {
    const app = await bootApp(sessionServer());
    expect(app.root.querySelectorAll("#class option")).toHaveLength(3);
    expect(field(app, "steps").value).toBe("50");
    expect(field(app, "cfg").value).toBe("6");
    expect(field(app, "height").value).toBe("32");
    expect(field(app, "width").value).toBe("32");
    expect(field(app, "fps").value).toBe("1");
  });

  test("submit posts the typed seed and shows an empty panel", async () => {
    const srv = sessionServer();
    const app = await bootApp(srv);
    field(app, "seed").value = "17";
    await createSession(app);
    const post = srv.calls.find((c) => c.method === "POST");
    expect(post).toBeDefined();
    const text = app.root.querySelector("#counter")?.textContent;
    expect(text).toBe("0 / 4 levels");
    expect(app.root.querySelectorAll("#strip figure")).toHaveLength(0);
    expect(app.view.session?.id).toBe("abc123");
    expect(location.hash).toBe("#s=abc123");
  });

  test("seed round-trips into the POST body", async () => {
    let body: Record<string, unknown> = {};
    const srv = sessionServer();
    const inner = srv.fetch;
    const app = await bootApp(Object.assign(srv, {
      fetch: async (url: string, init?: RequestInit) => {
        if (init?.method === "POST" && url.endsWith("/api/sessions")) {
          body = JSON.parse(init.body as string);
        }
        return inner(url, init);
      },
    }));
    field(app, "seed").value = "17";
    await createSession(app);
    expect(body.seed).toBe(17);
  });

  test("unreachable server shows an inline error and the app survives", async () => {
    const root = document.createElement("div");
    document.body.append(root);
    const app = new App(root, BASE, {
      fetchImpl: () => Promise.reject(new TypeError("fetch failed")),
    });
    await app.boot();
    const error = app.root.querySelector("#error") as HTMLElement;
    expect(error.hidden).toBe(false);
    expect(error.textContent).toContain("cannot reach server");
    expect(app.root.querySelector("#counter")?.textContent).toBe("no session");
  });
});

describe("refine", () => {
  test("each press appends a labeled image with its latency", async () => {
    const app = await bootApp(sessionServer());
    await createSession(app);
    await click(app, "refine");
    let figures = app.root.querySelectorAll("#strip figure");
    expect(figures).toHaveLength(1);
    expect(figures[0]?.querySelector("img")?.getAttribute("alt")).toBe("level 1");
    expect(figures[0]?.querySelector("figcaption")?.textContent)
      .toMatch(/^level 1 \(\d+ ms\)$/);

    await click(app, "refine");
    figures = app.root.querySelectorAll("#strip figure");
    expect(figures).toHaveLength(2);
    expect(app.root.querySelector("#counter")?.textContent).toBe("2 / 4 levels");
  });

  test("four presses with n=4 fill the strip and disable the button", async () => {
    const srv = sessionServer();
    const app = await bootApp(srv);
    await createSession(app);
    for (let i = 0; i < 4; i++) await click(app, "refine");
    expect(app.root.querySelectorAll("#strip figure")).toHaveLength(4);
    expect(button(app, "refine").disabled).toBe(true);

    const before = srv.calls.length;
    button(app, "refine").click();
    await app.idle();
    expect(srv.calls.length).toBe(before);
  });

  test("a 409 from the server lands in the error line verbatim", async () => {
    // server caps at 2 but advertises 3, so the button stays enabled
    const srv = sessionServer(3);
    srv.on("POST", "/api/sessions/abc123/refine", () => new Response(
      JSON.stringify({ detail: "session already holds all 2 levels" }),
      { status: 409 }));
    const app = await bootApp(srv);
    await createSession(app);
    await click(app, "refine");
    const error = app.root.querySelector("#error") as HTMLElement;
    expect(error.hidden).toBe(false);
    expect(error.textContent).toBe("session already holds all 2 levels");
  });

  test("images for earlier levels keep their bytes across later refines", async () => {
    const app = await bootApp(sessionServer());
    await createSession(app);
    await click(app, "refine");
    const first = app.root.querySelector("#strip img")?.getAttribute("src");
    for (let i = 0; i < 3; i++) await click(app, "refine");
    const again = app.root.querySelectorAll("#strip img")[0]?.getAttribute("src");
    expect(again).toBe(first);
  });
});

describe("scale selector", () => {
  test("switching scale re-requests every shown level at the new size", async () => {
    const srv = sessionServer();
    const app = await bootApp(srv);
    await createSession(app);
    await click(app, "refine");
    await click(app, "refine");

    field(app, "height").value = "64";
    field(app, "width").value = "64";
    await click(app, "apply-scale");

    const imgs = app.root.querySelectorAll("#strip img");
    expect(imgs).toHaveLength(2);
    for (const img of imgs) expect((img as HTMLImageElement).width).toBe(64);
    expect(srv.callCount("GET", "/api/sessions/abc123/decode")).toBe(4);
  });

  test("a non-divisible scale shows the 422 message verbatim", async () => {
    const app = await bootApp(sessionServer());
    await createSession(app);
    await click(app, "refine");
    field(app, "height").value = "13";
    await click(app, "apply-scale");
    expect(app.root.querySelector("#error")?.textContent)
      .toBe("height must be a positive multiple of 4");
  });

  test("switching back serves images from the cache, byte-identical", async () => {
    const srv = sessionServer();
    const app = await bootApp(srv);
    await createSession(app);
    await click(app, "refine");
    const original = app.root.querySelector("#strip img")?.getAttribute("src");

    field(app, "height").value = "64";
    field(app, "width").value = "64";
    await click(app, "apply-scale");
    const decodesAfterSwitch = srv.callCount("GET", "/api/sessions/abc123/decode");

    field(app, "height").value = "32";
    field(app, "width").value = "32";
    await click(app, "apply-scale");
    expect(srv.callCount("GET", "/api/sessions/abc123/decode")).toBe(decodesAfterSwitch);
    expect(app.root.querySelector("#strip img")?.getAttribute("src")).toBe(original);
  });
});

describe("reload", () => {
  test("the view rebuilds from GET endpoints alone", async () => {
    const srv = sessionServer();
    const seeded = await bootApp(srv);
    await createSession(seeded);
    await click(seeded, "refine");
    await click(seeded, "refine");

    // fresh app instance, same hash: hydrate via status + decode
    const app = await bootApp(srv);
    expect(app.root.querySelector("#counter")?.textContent).toBe("2 / 4 levels");
    expect(app.root.querySelectorAll("#strip img")).toHaveLength(2);
    expect(button(app, "refine").disabled).toBe(false);
  });
});
