/** DOM controller. Builds a static skeleton once, then re-renders the dynamic
 * regions (counter, error line, buttons, level strip) from the view model
 * after every server response. One request in flight at a time; the buttons
 * stay disabled while one is pending. */

import { Api, ApiError, type CreateBody, type Scale } from "./api.js";
import { pngDataUrl, pngDims } from "./png.js";
import * as s from "./state.js";

export interface AppOptions {
  fetchImpl?: (url: string, init?: RequestInit) => Promise<Response>;
  onBaseChange?: (base: string) => void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text) node.textContent = text;
  return node;
}

export class App {
  view: s.View = s.initialView();
  readonly api: Api;
  private inflight: Promise<void> = Promise.resolve();
  private populated = false;

  constructor(
    readonly root: HTMLElement,
    readonly base: string,
    readonly opts: AppOptions = {},
  ) {
    this.api = new Api(base, opts.fetchImpl);
    this.buildSkeleton();
    this.render();
  }

  /** Load /api/meta, then rebuild the session named in the URL hash if any. */
  async boot(): Promise<void> {
    await this.run(async () => {
      this.view = s.withMeta(this.view, await this.api.meta());
      this.populateOnce();
    });
    const match = /#s=([0-9a-f]+)/.exec(location.hash);
    if (match && match[1]) await this.hydrate(match[1]);
  }

  /** Settles when the current operation (if any) is done. */
  async idle(): Promise<void> {
    while (this.view.pending) await this.inflight;
    await this.inflight;
  }

  private run(fn: () => Promise<void>): Promise<void> {
    if (this.view.pending) return this.inflight;
    this.view = s.beginOp(this.view);
    this.render();
    this.inflight = (async () => {
      try {
        await fn();
        this.view = s.endOp(this.view);
      } catch (err) {
        if (err instanceof ApiError) {
          this.view = s.failOp(this.view, err.message);
        } else {
          const reason = err instanceof Error ? err.message : String(err);
          this.view = s.failOp(this.view, `cannot reach server at ${this.base}: ${reason}`);
        }
      }
      this.render();
    })();
    return this.inflight;
  }

  async createSession(): Promise<void> {
    if (!s.canCreate(this.view)) return;
    const body: CreateBody = {
      class_id: this.intField("class", 0),
      seed: this.intField("seed", 0),
      steps: this.intField("steps", 1),
      cfg_scale: this.numField("cfg", 0),
    };
    await this.run(async () => {
      const info = await this.api.create(body);
      this.view = s.withSession(this.view, info);
      location.hash = `s=${info.id}`;
    });
  }

  async refineOnce(): Promise<void> {
    if (!s.canRefine(this.view)) return;
    await this.run(async () => {
      const id = this.view.session!.id;
      const t0 = performance.now();
      const info = await this.api.refine(id);
      this.view = s.afterRefine(this.view, info, Math.round(performance.now() - t0));
      await this.fillStrip();
    });
  }

  async applyScale(): Promise<void> {
    if (!s.canDecode(this.view)) return;
    const scale: Scale = {
      height: this.intField("height", this.view.scale.height),
      width: this.intField("width", this.view.scale.width),
      fps: this.intField("fps", this.view.scale.fps),
      frame: this.view.scale.frame,
    };
    await this.run(async () => {
      this.view = s.withScale(this.view, scale);
      await this.fillStrip();
    });
  }

  async hydrate(id: string): Promise<void> {
    await this.run(async () => {
      const status = await this.api.status(id);
      this.view = s.withSession(this.view, status);
      await this.fillStrip();
    });
  }

  /** Request every shown level that lacks a decode at the current scale. */
  private async fillStrip(): Promise<void> {
    const id = this.view.session!.id;
    for (const level of s.missingDecodes(this.view)) {
      const bytes = await this.api.decode(id, level, this.view.scale);
      const dims = pngDims(bytes);
      this.view = s.withDecoded(this.view, level, this.view.scale, {
        bytes,
        dataUrl: pngDataUrl(bytes),
        ...dims,
      });
      this.render();
    }
  }

  // -- DOM ------------------------------------------------------------

  private buildSkeleton(): void {
    this.root.replaceChildren();

    const top = el("div", { id: "topbar" });
    top.append(el("h1", {}, "levelflow"));
    const baseLabel = el("label", {}, "server ");
    const baseInput = el("input", { id: "base-url", type: "text" });
    baseInput.value = this.base;
    baseInput.addEventListener("change", () => {
      this.opts.onBaseChange?.(baseInput.value);
    });
    baseLabel.append(baseInput);
    top.append(baseLabel);

    const form = el("form", { id: "create-form" });
    form.addEventListener("submit", (e) => {
      e.preventDefault();
      void this.createSession();
    });
    const classLabel = el("label", {}, "class ");
    classLabel.append(el("select", { id: "class" }));
    const seedLabel = el("label", {}, "seed ");
    seedLabel.append(el("input", { id: "seed", type: "number", value: "0" }));
    const stepsLabel = el("label", {}, "steps ");
    stepsLabel.append(el("input", { id: "steps", type: "number" }));
    const cfgLabel = el("label", {}, "cfg ");
    cfgLabel.append(el("input", { id: "cfg", type: "number", step: "0.5" }));
    form.append(classLabel, seedLabel, stepsLabel, cfgLabel,
                el("button", { id: "create", type: "submit" }, "new session"));

    const panel = el("div", { id: "session" });
    const controls = el("div", { id: "controls" });
    const refine = el("button", { id: "refine", type: "button" }, "refine");
    refine.addEventListener("click", () => void this.refineOnce());
    const heightLabel = el("label", {}, "height ");
    heightLabel.append(el("input", { id: "height", type: "number" }));
    const widthLabel = el("label", {}, "width ");
    widthLabel.append(el("input", { id: "width", type: "number" }));
    const fpsLabel = el("label", {}, "fps ");
    fpsLabel.append(el("input", { id: "fps", type: "number" }));
    const apply = el("button", { id: "apply-scale", type: "button" }, "decode at scale");
    apply.addEventListener("click", () => void this.applyScale());
    controls.append(refine, heightLabel, widthLabel, fpsLabel, apply);

    panel.append(
      el("div", { id: "counter" }),
      el("div", { id: "error", role: "alert", hidden: "" }),
      controls,
      el("div", { id: "strip" }),
    );

    this.root.append(top, form, panel);
  }

  /** Fill form defaults from /api/meta. Runs once so later renders never
   * clobber what the user typed. */
  private populateOnce(): void {
    const meta = this.view.meta;
    if (this.populated || !meta) return;
    this.populated = true;
    const select = this.input<HTMLSelectElement>("class");
    for (let c = 0; c < meta.num_classes; c++) {
      select.append(el("option", { value: String(c) }, `class ${c}`));
    }
    this.input("steps").value = String(meta.steps_default);
    this.input("cfg").value = String(meta.cfg_scale_default);
    this.input("height").value = String(this.view.scale.height);
    this.input("width").value = String(this.view.scale.width);
    this.input("fps").value = String(this.view.scale.fps);
  }

  render(): void {
    const view = this.view;
    this.text("counter", s.counterText(view));
    const error = this.byId("error");
    error.textContent = view.error ?? "";
    error.hidden = view.error === null;
    (this.byId("create") as HTMLButtonElement).disabled = !s.canCreate(view);
    (this.byId("refine") as HTMLButtonElement).disabled = !s.canRefine(view);
    (this.byId("apply-scale") as HTMLButtonElement).disabled = !s.canDecode(view);

    const strip = this.byId("strip");
    strip.replaceChildren();
    for (const entry of s.stripEntries(view)) {
      const fig = el("figure", { class: entry.png ? "level" : "level pending" });
      if (entry.png) {
        const img = el("img", { src: entry.png.dataUrl, alt: `level ${entry.level}` });
        img.width = entry.png.width;
        img.height = entry.png.height;
        fig.append(img);
      }
      const label = entry.latencyMs === null
        ? `level ${entry.level}`
        : `level ${entry.level} (${entry.latencyMs} ms)`;
      fig.append(el("figcaption", {}, entry.png ? label : `${label} (decoding)`));
      strip.append(fig);
    }
  }

  // -- small helpers ----------------------------------------------------

  private byId(id: string): HTMLElement {
    return this.root.querySelector(`#${id}`) as HTMLElement;
  }

  private input<T extends HTMLElement = HTMLInputElement>(id: string): T & { value: string } {
    return this.byId(id) as T & { value: string };
  }

  private text(id: string, value: string): void {
    this.byId(id).textContent = value;
  }

  private intField(id: string, fallback: number): number {
    const raw = this.input(id).value.trim();
    if (raw === "") return fallback;
    const n = Number(raw);
    return Number.isInteger(n) ? n : fallback;
  }

  private numField(id: string, fallback: number): number {
    const raw = this.input(id).value.trim();
    const n = Number(raw);
    return raw !== "" && Number.isFinite(n) ? n : fallback;
  }
}
