/** End-to-end drive of the UI logic against a real running service with a
 * trained checkpoint. Needs E2E_BASE (scripts/e2e.mjs boots the server and
 * sets it); without it the suite is skipped so unit runs stay hermetic. */

import { describe, expect, test } from "vitest";

import { App } from "../src/app.js";
import { pngDims } from "../src/png.js";
import { cacheKey } from "../src/state.js";
import { ApiError, type Scale } from "../src/api.js";

const BASE = process.env.E2E_BASE ?? "";

function field(app: App, id: string): HTMLInputElement {
  return app.root.querySelector(`#${id}`) as HTMLInputElement;
}

function button(app: App, id: string): HTMLButtonElement {
  return app.root.querySelector(`#${id}`) as HTMLButtonElement;
}

describe.runIf(BASE !== "")("live service", () => {
  test("create, refine to max, decode at two scales", async () => {
    const root = document.createElement("div");
    document.body.append(root);
    location.hash = "";
    const app = new App(root, BASE);
    await app.boot();
    expect(app.view.error).toBeNull();
    const meta = app.view.meta!;
    expect(meta.max_levels).toBeGreaterThanOrEqual(2);

    // session with pinned seed; fewer steps keeps the walk quick
    field(app, "seed").value = "7";
    field(app, "steps").value = "8";
    (root.querySelector("#create-form") as HTMLFormElement)
      .dispatchEvent(new Event("submit", { cancelable: true }));
    await app.idle();
    expect(app.view.error).toBeNull();
    expect(root.querySelector("#counter")?.textContent)
      .toBe(`0 / ${meta.max_levels} levels`);

    const scaleA: Scale = { ...app.view.scale };
    const sideA = scaleA.height;

    // refine to max; capture level-1 bytes after the first refine
    let level1: Uint8Array | null = null;
    for (let m = 1; m <= meta.max_levels; m++) {
      button(app, "refine").click();
      await app.idle();
      expect(app.view.error).toBeNull();
      expect(app.view.session?.levelsDone).toBe(m);
      const png = app.view.cache[cacheKey(m, scaleA)];
      expect(png, `level ${m} decoded`).toBeTruthy();
      expect(pngDims(png!.bytes)).toEqual({ width: sideA, height: sideA });
      if (m === 1) level1 = png!.bytes.slice();
    }
    expect(root.querySelectorAll("#strip figure")).toHaveLength(meta.max_levels);
    expect(button(app, "refine").disabled).toBe(true);

    // earlier-level images stay byte-stable across later refines: the cached
    // entry never changed, and a fresh server fetch returns the same bytes
    const cached = app.view.cache[cacheKey(1, scaleA)]!.bytes;
    expect(cached).toEqual(level1!);
    const refetched = await app.api.decode(app.view.session!.id, 1, scaleA);
    expect(refetched).toEqual(level1!);

    // second scale: twice the side length
    const sideB = sideA * 2;
    field(app, "height").value = String(sideB);
    field(app, "width").value = String(sideB);
    button(app, "apply-scale").click();
    await app.idle();
    expect(app.view.error).toBeNull();
    for (let m = 1; m <= meta.max_levels; m++) {
      const png = app.view.cache[cacheKey(m, { ...scaleA, height: sideB, width: sideB })];
      expect(png, `level ${m} at ${sideB}`).toBeTruthy();
      expect(pngDims(png!.bytes)).toEqual({ width: sideB, height: sideB });
    }

    // switch back: byte-identical images from the cache
    field(app, "height").value = String(sideA);
    field(app, "width").value = String(sideA);
    button(app, "apply-scale").click();
    await app.idle();
    expect(app.view.cache[cacheKey(1, scaleA)]!.bytes).toEqual(level1!);

    // refine past max is refused by the server too, not just the button
    const err = await app.api.refine(app.view.session!.id).catch((e) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(409);

    await app.api.remove(app.view.session!.id);
  });

  test("non-divisible decode scale surfaces the server message", async () => {
    const root = document.createElement("div");
    document.body.append(root);
    location.hash = "";
    const app = new App(root, BASE);
    await app.boot();
    field(app, "steps").value = "4";
    (root.querySelector("#create-form") as HTMLFormElement)
      .dispatchEvent(new Event("submit", { cancelable: true }));
    await app.idle();
    button(app, "refine").click();
    await app.idle();

    field(app, "height").value = String(app.view.scale.height + 1);
    button(app, "apply-scale").click();
    await app.idle();
    expect(app.view.error).toMatch(/multiple of \d+/);
    await app.api.remove(app.view.session!.id);
  });
});
