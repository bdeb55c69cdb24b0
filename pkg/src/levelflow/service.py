"""HTTP surface for coarse-to-fine generation sessions.

Sessions live in memory behind a per-session lock: one refine or decode at
a time, concurrent calls answer 409 instead of interleaving. Decodes are
cached by their full parameter tuple so repeated requests return identical
bytes, and finished levels are digest-checked around every operation so a
mutation of finalized latents fails loudly rather than silently.
"""

from __future__ import annotations

import shutil
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException, Response
from fastapi.middleware.cors import CORSMiddleware

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import encode_png
from .diffusion import DiT, GenSession, new_session, rebuild_caches, refine
from .geometry import ScaleSpec
from .tokenizer import Tokenizer


@dataclass
class SessionRecord:
    sess: GenSession
    lock: threading.Lock = field(default_factory=threading.Lock)
    decode_cache: dict = field(default_factory=dict)
    last_used: float = 0.0


def _int_field(body: dict, name: str, default: int) -> int:
    value = body.get(name, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise HTTPException(400, f"{name} must be an integer")
    return value


class SessionHub:
    """Session store plus every operation the routes expose. Separate from
    the FastAPI app so tests and snapshot-restore can drive it directly."""

    CREATE_FIELDS = ("class_id", "seed", "steps", "cfg_scale", "grid")

    def __init__(self, tok: Tokenizer | None = None, model: DiT | None = None,
                 idle_ttl: float = 3600.0, snapshot_dir: str | Path | None = None,
                 clock=time.monotonic):
        self.tok = tok
        self.model = model
        self.idle_ttl = idle_ttl
        self.snapshot_dir = Path(snapshot_dir) if snapshot_dir else None
        self.clock = clock
        self.sessions: dict[str, SessionRecord] = {}
        self._registry_lock = threading.Lock()
        if self.snapshot_dir and self.model is not None:
            self._restore_snapshots()

    # -- plumbing ----------------------------------------------------------------
    def _require_model(self):
        if self.model is None or self.tok is None:
            raise HTTPException(503, "no model checkpoint loaded")

    def _expire_idle(self, now: float):
        for sid in [s for s, r in self.sessions.items()
                    if now - r.last_used > self.idle_ttl]:
            rec = self.sessions[sid]
            if rec.lock.acquire(blocking=False):
                del self.sessions[sid]
                rec.lock.release()
                self._drop_snapshot(sid)

    def _get(self, sid: str) -> SessionRecord:
        self._require_model()
        with self._registry_lock:
            self._expire_idle(self.clock())
            rec = self.sessions.get(sid)
        if rec is None:
            raise HTTPException(404, f"no session {sid}")
        return rec

    @staticmethod
    def _acquire(rec: SessionRecord):
        if not rec.lock.acquire(blocking=False):
            raise HTTPException(409, f"session {rec.sess.id} has an operation in flight")

    def _digests(self, sess: GenSession) -> list[str]:
        return [sess.level_digest(j) for j in range(1, sess.levels_done + 1)]

    # -- snapshots ---------------------------------------------------------------
    def _snapshot(self, sess: GenSession):
        if not self.snapshot_dir:
            return
        meta = {"id": sess.id, "class_id": sess.class_id, "seed": sess.seed,
                "grid": list(sess.grid), "steps": sess.steps,
                "cfg_scale": sess.cfg_scale, "levels_done": sess.levels_done}
        save_checkpoint(self.snapshot_dir / sess.id, "session", meta,
                        {"latents": sess.latents})

    def _drop_snapshot(self, sid: str):
        if self.snapshot_dir and (self.snapshot_dir / sid).exists():
            shutil.rmtree(self.snapshot_dir / sid)

    def _restore_snapshots(self):
        for child in sorted(self.snapshot_dir.glob("*/manifest.json")):
            try:
                kind, meta, arrays = load_checkpoint(child.parent)
            except CheckpointError:
                continue
            if kind != "session":
                continue
            sess = new_session(self.model, meta["id"], meta["class_id"],
                               meta["seed"], tuple(meta["grid"]),
                               steps=meta["steps"], cfg_scale=meta["cfg_scale"])
            sess.latents[...] = arrays["latents"]
            sess.levels_done = meta["levels_done"]
            rebuild_caches(self.model, sess)
            self.sessions[meta["id"]] = SessionRecord(sess, last_used=self.clock())

    # -- operations --------------------------------------------------------------
    def create(self, body: dict) -> dict:
        self._require_model()
        for key in body:
            if key not in self.CREATE_FIELDS:
                raise HTTPException(400, f"unknown field {key!r}")
        class_id = _int_field(body, "class_id", 0)
        seed = _int_field(body, "seed", 0)
        steps = body.get("steps")
        if steps is not None and (not isinstance(steps, int) or isinstance(steps, bool)
                                  or steps < 1):
            raise HTTPException(400, "steps must be a positive integer")
        cfg_scale = body.get("cfg_scale")
        if cfg_scale is not None:
            if not isinstance(cfg_scale, (int, float)) or isinstance(cfg_scale, bool) \
                    or cfg_scale < 0:
                raise HTTPException(400, "cfg_scale must be a number >= 0")
            cfg_scale = float(cfg_scale)
        grid_body = body.get("grid")
        if grid_body is None:
            k = self.tok.config.k
            grid = (1, k, k)
        else:
            if not isinstance(grid_body, dict) or set(grid_body) - {"t", "h", "w"}:
                raise HTTPException(400, "grid must be an object with t, h, w")
            dims = [_int_field(grid_body, a, 1) for a in ("t", "h", "w")]
            if min(dims) < 1:
                raise HTTPException(400, "grid dimensions must be >= 1")
            grid = tuple(dims)
        sid = uuid.uuid4().hex[:12]
        try:
            sess = new_session(self.model, sid, class_id, seed, grid,
                               steps=steps, cfg_scale=cfg_scale)
        except ValueError as e:
            raise HTTPException(400, str(e))
        rec = SessionRecord(sess, last_used=self.clock())
        with self._registry_lock:
            self._expire_idle(self.clock())
            self.sessions[sid] = rec
        return {"id": sid, "levels_done": 0, "max_levels": sess.max_levels}

    def refine(self, sid: str) -> dict:
        rec = self._get(sid)
        self._acquire(rec)
        try:
            sess = rec.sess
            if sess.levels_done >= sess.max_levels:
                raise HTTPException(409, f"session already holds all "
                                         f"{sess.max_levels} levels")
            before = self._digests(sess)
            refine(self.model, sess)
            if self._digests(sess)[:len(before)] != before:
                raise HTTPException(500, "finalized levels changed during refine")
            self._snapshot(sess)
            return {"id": sid, "levels_done": sess.levels_done,
                    "max_levels": sess.max_levels}
        finally:
            rec.last_used = self.clock()
            rec.lock.release()

    def decode(self, sid: str, height: int | None, width: int | None,
               fps: int | None, frame: int, levels: int | None) -> bytes:
        rec = self._get(sid)
        self._acquire(rec)
        try:
            sess = rec.sess
            if sess.levels_done == 0:
                raise HTTPException(409, "session has no finished levels to decode")
            if levels is None:
                levels = sess.levels_done
            if not 1 <= levels <= sess.levels_done:
                raise HTTPException(422, f"levels must lie in [1, {sess.levels_done}]")
            T, hg, wg = sess.grid
            k_t = self.tok.config.k_t
            height = 8 * hg if height is None else height
            width = 8 * wg if width is None else width
            fps = k_t if fps is None else fps
            if height < hg or height % hg:
                raise HTTPException(422, f"height must be a positive multiple of {hg}")
            if width < wg or width % wg:
                raise HTTPException(422, f"width must be a positive multiple of {wg}")
            if height // hg != width // wg:
                raise HTTPException(422, f"height and width must be the same "
                                         f"multiple of ({hg}, {wg})")
            if fps < k_t or fps % k_t:
                raise HTTPException(422, f"fps must be a positive multiple of {k_t}")
            frames = (fps // k_t) * T
            if not 0 <= frame < frames:
                raise HTTPException(422, f"frame must lie in [0, {frames})")
            key = (levels, height, width, fps, frame)
            if key not in rec.decode_cache:
                target = ScaleSpec(height, width, fps, frames)
                before = self._digests(sess)
                sample = self.tok.decode(sess.to_grid(self.tok.config.n, levels),
                                         target)
                if self._digests(sess) != before:
                    raise HTTPException(500, "decode mutated session latents")
                rec.decode_cache[key] = encode_png(sample.pixels[frame])
            return rec.decode_cache[key]
        finally:
            rec.last_used = self.clock()
            rec.lock.release()

    def status(self, sid: str) -> dict:
        rec = self._get(sid)
        sess = rec.sess
        rec.last_used = self.clock()
        return {"id": sid, "class_id": sess.class_id, "seed": sess.seed,
                "grid": list(sess.grid), "steps": sess.steps,
                "cfg_scale": sess.cfg_scale, "levels_done": sess.levels_done,
                "max_levels": sess.max_levels,
                "level_digests": self._digests(sess)}

    def delete(self, sid: str):
        rec = self._get(sid)
        self._acquire(rec)
        try:
            with self._registry_lock:
                self.sessions.pop(sid, None)
            self._drop_snapshot(sid)
        finally:
            rec.lock.release()

    def meta(self) -> dict:
        self._require_model()
        tc, mc = self.tok.config, self.model.config
        return {"max_levels": mc.n, "latent_dim": mc.latent_dim,
                "num_classes": mc.num_classes,
                "steps_default": mc.steps, "cfg_scale_default": mc.cfg_scale,
                "grid_default": {"t": 1, "h": tc.k, "w": tc.k},
                "decode_multiples": {"height": tc.k, "width": tc.k, "fps": tc.k_t}}


def build_app(hub: SessionHub, cors_origin: str = "*") -> FastAPI:
    app = FastAPI(title="levelflow", docs_url=None, redoc_url=None)
    app.add_middleware(CORSMiddleware, allow_origins=[cors_origin],
                       allow_methods=["*"], allow_headers=["*"])
    app.state.hub = hub

    @app.get("/api/meta")
    def meta():
        return hub.meta()

    @app.post("/api/sessions", status_code=201)
    def create(body: dict | None = None):
        return hub.create(body or {})

    @app.get("/api/sessions/{sid}")
    def status(sid: str):
        return hub.status(sid)

    @app.post("/api/sessions/{sid}/refine")
    def refine_level(sid: str):
        return hub.refine(sid)

    @app.get("/api/sessions/{sid}/decode")
    def decode(sid: str, height: int | None = None, width: int | None = None,
               fps: int | None = None, frame: int = 0, levels: int | None = None):
        png = hub.decode(sid, height, width, fps, frame, levels)
        return Response(content=png, media_type="image/png")

    @app.delete("/api/sessions/{sid}", status_code=204)
    def delete(sid: str):
        hub.delete(sid)

    return app


def load_hub(ckpt_dir: str | Path, idle_ttl: float = 3600.0,
             snapshot_dir: str | Path | None = None) -> SessionHub:
    root = Path(ckpt_dir)
    tok = Tokenizer.load(root / "tokenizer")
    model = DiT.load(root / "dit")
    if (model.config.n, model.config.latent_dim) != (tok.config.n, tok.config.latent_dim):
        raise ValueError(
            f"checkpoint mismatch: model emits {model.config.n} x "
            f"{model.config.latent_dim} latents, tokenizer expects "
            f"{tok.config.n} x {tok.config.latent_dim}")
    return SessionHub(tok, model, idle_ttl=idle_ttl, snapshot_dir=snapshot_dir)


def run_server(ckpt_dir: str | Path, host: str = "127.0.0.1", port: int = 8000,
               cors_origin: str = "*", idle_ttl: float = 3600.0,
               snapshot_dir: str | Path | None = None):
    import uvicorn

    hub = load_hub(ckpt_dir, idle_ttl=idle_ttl, snapshot_dir=snapshot_dir)
    uvicorn.run(build_app(hub, cors_origin), host=host, port=port)
