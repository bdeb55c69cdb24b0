/** View model and reducers. Everything here is a pure function: the view is
 * derived from server responses plus the user's local selections, so a reload
 * can rebuild the identical view from GET endpoints alone. */

import type { Meta, Scale, SessionInfo, SessionStatus } from "./api.js";

export interface CachedPng {
  bytes: Uint8Array;
  dataUrl: string;
  width: number;
  height: number;
}

export interface SessionState {
  id: string;
  levelsDone: number;
  maxLevels: number;
}

export interface View {
  meta: Meta | null;
  session: SessionState | null;
  scale: Scale;
  /** decoded PNGs keyed by cacheKey; entries are immutable, which is what
   * makes switching a scale back byte-identical without a request */
  cache: Record<string, CachedPng>;
  /** wall-clock per refine, by level */
  latencies: Record<number, number>;
  pending: boolean;
  error: string | null;
}

export function initialView(): View {
  return {
    meta: null,
    session: null,
    scale: { height: 0, width: 0, fps: 1, frame: 0 },
    cache: {},
    latencies: {},
    pending: false,
    error: null,
  };
}

export function withMeta(view: View, meta: Meta): View {
  // default decode scale: 8 pixels per latent patch, smallest legal fps
  const scale: Scale = {
    height: 8 * meta.grid_default.h,
    width: 8 * meta.grid_default.w,
    fps: meta.decode_multiples.fps,
    frame: 0,
  };
  return { ...view, meta, scale };
}

export function beginOp(view: View): View {
  return { ...view, pending: true, error: null };
}

export function failOp(view: View, message: string): View {
  return { ...view, pending: false, error: message };
}

export function endOp(view: View): View {
  return { ...view, pending: false };
}

/** A created or reloaded session replaces whatever was on screen. */
export function withSession(view: View, info: SessionInfo | SessionStatus): View {
  return {
    ...view,
    session: {
      id: info.id,
      levelsDone: info.levels_done,
      maxLevels: info.max_levels,
    },
    cache: {},
    latencies: {},
    error: null,
  };
}

export function afterRefine(view: View, info: SessionInfo, latencyMs: number): View {
  if (!view.session || view.session.id !== info.id) return view;
  return {
    ...view,
    session: { ...view.session, levelsDone: info.levels_done },
    latencies: { ...view.latencies, [info.levels_done]: latencyMs },
  };
}

export function withScale(view: View, scale: Scale): View {
  return { ...view, scale };
}

export function cacheKey(levels: number, scale: Scale): string {
  return `${levels}|${scale.height}x${scale.width}|${scale.fps}fps|f${scale.frame}`;
}

export function withDecoded(
  view: View,
  levels: number,
  scale: Scale,
  png: CachedPng,
): View {
  return { ...view, cache: { ...view.cache, [cacheKey(levels, scale)]: png } };
}

export interface StripEntry {
  level: number;
  png: CachedPng | null;
  latencyMs: number | null;
}

/** One entry per finished level at the current scale, in level order. A null
 * png means the decode for this scale hasn't landed yet. */
export function stripEntries(view: View): StripEntry[] {
  if (!view.session) return [];
  const out: StripEntry[] = [];
  for (let m = 1; m <= view.session.levelsDone; m++) {
    out.push({
      level: m,
      png: view.cache[cacheKey(m, view.scale)] ?? null,
      latencyMs: view.latencies[m] ?? null,
    });
  }
  return out;
}

/** Levels that still need a decode request at the current scale. */
export function missingDecodes(view: View): number[] {
  return stripEntries(view).filter((e) => e.png === null).map((e) => e.level);
}

export function canCreate(view: View): boolean {
  return view.meta !== null && !view.pending;
}

export function canRefine(view: View): boolean {
  return (
    view.session !== null &&
    !view.pending &&
    view.session.levelsDone < view.session.maxLevels
  );
}

export function canDecode(view: View): boolean {
  return view.session !== null && !view.pending && view.session.levelsDone > 0;
}

export function counterText(view: View): string {
  if (!view.session) return "no session";
  return `${view.session.levelsDone} / ${view.session.maxLevels} levels`;
}
