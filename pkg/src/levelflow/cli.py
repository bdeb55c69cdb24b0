"""Command-line surface tying the library together.

Every subcommand resolves its options in three layers: built-in defaults,
then the --config JSON file, then explicit flags. Config keys must name a
known flag (train commands additionally accept the structured plan /
tokenizer / dit / weights objects). Any contract violation exits 1 with a
message on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import (
    Sample,
    load_corpus,
    load_png,
    make_corpus,
    render,
    save_corpus,
    save_png,
    save_video_dir,
)
from .geometry import ScaleSpec

PROG = "levelflow"


class _Parser(argparse.ArgumentParser):
    """argparse that honors the exit-1-with-message error contract."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: _Parser, out_help: str):
    p.add_argument("--seed", type=int, help="master random seed (default 0)")
    p.add_argument("--config", help="JSON file of option values; flags override it")
    p.add_argument("--out", help=out_help)


# -- subcommand registry ------------------------------------------------------------
# name -> (help, configure(parser), run(opts), defaults, extra config keys)

def _cfg_data_gen(p: _Parser):
    _add_common(p, "corpus manifest path to write (required)")
    p.add_argument("--count", type=int, help="number of scenes (default 64)")
    p.add_argument("--complexity-min", type=int, dest="complexity_min",
                   help="fewest primitives per scene (default 0)")
    p.add_argument("--complexity-max", type=int, dest="complexity_max",
                   help="most primitives per scene (default 8)")
    p.add_argument("--classes", type=int, help="number of class labels (default 4)")
    p.add_argument("--moving", action="store_true", default=argparse.SUPPRESS,
                   help="give primitives linear motion for video rendering")


def cmd_data_gen(o: dict) -> int:
    if not o.get("out"):
        raise ValueError("data_gen needs --out for the corpus manifest")
    scenes = make_corpus(o["count"], (o["complexity_min"], o["complexity_max"]),
                         num_classes=o["classes"], seed=o["seed"],
                         moving=o.get("moving", False))
    save_corpus(o["out"], scenes)
    print(f"wrote {len(scenes)} scenes to {o['out']}")
    return 0


def _load_train_blob(o: dict):
    from .training import LossWeights, TrainPlan

    blob = o.get("_config_doc") or {}
    plan = TrainPlan.from_dict(blob["plan"]) if "plan" in blob else None
    weights = LossWeights.from_dict(blob["weights"]) if "weights" in blob else LossWeights()
    if plan is not None:
        for flag in ("steps", "batch_size", "lr"):
            if flag in o.get("_explicit", ()):
                raise ValueError(
                    f"--{flag.replace('_', '-')} conflicts with the plan in --config; "
                    f"set stage fields there instead")
        if "seed" in o.get("_explicit", ()):
            plan = TrainPlan.from_dict({**plan.to_dict(), "seed": o["seed"]})
    return plan, weights, blob


def _cfg_train_tok(p: _Parser):
    _add_common(p, "output directory for checkpoint and metrics (required)")
    p.add_argument("--corpus", help="corpus manifest from data_gen (required)")
    p.add_argument("--steps", type=int, help="total steps of the default plan (default 3000)")
    p.add_argument("--batch-size", type=int, dest="batch_size", help="default 4")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-3)")
    p.add_argument("--heldout", type=int,
                   help="scenes reserved for the per-level PSNR log (default 8)")


def cmd_train_tok(o: dict) -> int:
    from .tokenizer import TokenizerConfig
    from .training import default_tokenizer_plan, train_tokenizer

    if not o.get("corpus") or not o.get("out"):
        raise ValueError("train_tok needs --corpus and --out")
    plan, weights, blob = _load_train_blob(o)
    if plan is None:
        plan = default_tokenizer_plan(o["steps"], o["batch_size"], o["lr"], o["seed"])
    config = (TokenizerConfig.from_dict(blob["tokenizer"]) if "tokenizer" in blob
              else TokenizerConfig())
    scenes = load_corpus(o["corpus"])
    held = min(o["heldout"], max(0, len(scenes) - 1))
    train_tokenizer(plan, config, scenes[held:], o["out"], weights=weights,
                    heldout_scenes=scenes[:held], quiet=False)
    print(f"tokenizer checkpoint at {Path(o['out']) / 'tokenizer'}")
    return 0


def _cfg_train_dit(p: _Parser):
    _add_common(p, "output directory for checkpoint and metrics (required)")
    p.add_argument("--corpus", help="corpus manifest from data_gen (required)")
    p.add_argument("--tok-ckpt", dest="tok_ckpt",
                   help="trained tokenizer checkpoint directory (required)")
    p.add_argument("--steps", type=int, help="total steps of the default plan (default 2000)")
    p.add_argument("--batch-size", type=int, dest="batch_size", help="default 8")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-3)")


def cmd_train_dit(o: dict) -> int:
    from .diffusion import DiTConfig
    from .tokenizer import Tokenizer
    from .training import default_dit_plan, train_dit

    for need in ("corpus", "tok_ckpt", "out"):
        if not o.get(need):
            raise ValueError(f"train_dit needs --{need.replace('_', '-')}")
    plan, weights, blob = _load_train_blob(o)
    if plan is None:
        plan = default_dit_plan(o["steps"], o["batch_size"], o["lr"], o["seed"])
    tok = Tokenizer.load(o["tok_ckpt"])
    config = (DiTConfig.from_dict(blob["dit"]) if "dit" in blob
              else DiTConfig(latent_dim=tok.config.latent_dim, n=tok.config.n))
    if config.latent_dim != tok.config.latent_dim or config.n != tok.config.n:
        raise ValueError(
            f"model wants {config.n} levels x {config.latent_dim} channels, tokenizer "
            f"provides {tok.config.n} x {tok.config.latent_dim}")
    train_dit(plan, config, tok, load_corpus(o["corpus"]), o["out"],
              weights=weights, quiet=False)
    print(f"velocity model checkpoint at {Path(o['out']) / 'dit'}")
    return 0


def _scale_from(o: dict, fallback: ScaleSpec | None = None) -> ScaleSpec | None:
    given = {k: o.get(k) for k in ("height", "width", "fps", "frames")}
    if all(v is None for v in given.values()):
        return fallback
    base = fallback or ScaleSpec(32, 32, 1, 1)
    return ScaleSpec(given["height"] or base.h, given["width"] or base.w,
                     given["fps"] or base.f, given["frames"] or base.t)


def _cfg_reconstruct(p: _Parser):
    _add_common(p, "PNG path (images) or frame directory (video) for the output")
    p.add_argument("--ckpt", help="tokenizer checkpoint directory (required)")
    p.add_argument("--image", help="input PNG (alternative to --corpus)")
    p.add_argument("--corpus", help="corpus manifest to render the input from")
    p.add_argument("--index", type=int, help="scene index within --corpus (default 0)")
    p.add_argument("--levels", type=int, help="uniform level budget (default: all)")
    p.add_argument("--height", type=int, help="decode height (default: input height)")
    p.add_argument("--width", type=int, help="decode width (default: input width)")
    p.add_argument("--fps", type=int, help="decode frame rate (default: input rate)")
    p.add_argument("--frames", type=int, help="decode frame count (default: input count)")
    p.add_argument("--in-height", type=int, dest="in_height",
                   help="render height for --corpus input (default 32)")
    p.add_argument("--in-width", type=int, dest="in_width",
                   help="render width for --corpus input (default 32)")


def _reconstruct_input(o: dict) -> Sample:
    if o.get("image"):
        px = load_png(o["image"])[None]
        return Sample(px, ScaleSpec(px.shape[1], px.shape[2], 1, 1))
    if o.get("corpus"):
        scenes = load_corpus(o["corpus"])
        idx = o["index"]
        if not 0 <= idx < len(scenes):
            raise ValueError(f"--index {idx} outside corpus of {len(scenes)} scenes")
        return render(scenes[idx], ScaleSpec(o["in_height"], o["in_width"], 1, 1))
    raise ValueError("reconstruct needs --image or --corpus")


def cmd_reconstruct(o: dict) -> int:
    from .tokenizer import Tokenizer

    if not o.get("ckpt"):
        raise ValueError("reconstruct needs --ckpt")
    tok = Tokenizer.load(o["ckpt"])
    sample = _reconstruct_input(o)
    target = _scale_from(o, fallback=sample.scale)
    budget = o["levels"] if o["levels"] is not None else tok.config.n
    if not 1 <= budget <= tok.config.n:
        raise ValueError(f"--levels must lie in [1, {tok.config.n}]")
    out, db = tok.reconstruct(sample, target=target, budget=budget)
    print(json.dumps({"levels": budget, "psnr_db": round(db, 4),
                      "scale": [target.t, target.h, target.w, target.f]}))
    if o.get("out"):
        if target.t > 1:
            save_video_dir(o["out"], out)
        else:
            save_png(o["out"], out.pixels[0])
    return 0


def _cfg_generate(p: _Parser):
    _add_common(p, "output directory (required): PNG(s) plus latents.npy")
    p.add_argument("--ckpt", help="directory holding tokenizer/ and dit/ (required)")
    p.add_argument("--class-id", type=int, dest="class_id", help="class label (default 0)")
    p.add_argument("--levels", type=int, help="levels to generate (default: all)")
    p.add_argument("--height", type=int, help="decode height (default 8*k)")
    p.add_argument("--width", type=int, help="decode width (default 8*k)")
    p.add_argument("--fps", type=int, help="decode frame rate (default 1)")
    p.add_argument("--frames", type=int, help="decode frame count (default 1)")
    p.add_argument("--grid", help="latent patch grid as T,H,W (default from tokenizer)")
    p.add_argument("--steps", type=int, help="sampler steps (default from model config)")
    p.add_argument("--cfg", type=float, help="guidance scale (default from model config)")
    p.add_argument("--progressive", action="store_true", default=argparse.SUPPRESS,
                   help="write level_{i}.png after each refinement")


def cmd_generate(o: dict) -> int:
    from .diffusion import DiT, new_session, refine
    from .tokenizer import Tokenizer

    if not o.get("ckpt") or not o.get("out"):
        raise ValueError("generate needs --ckpt and --out")
    tok = Tokenizer.load(Path(o["ckpt"]) / "tokenizer")
    model = DiT.load(Path(o["ckpt"]) / "dit")
    if (model.config.n, model.config.latent_dim) != (tok.config.n, tok.config.latent_dim):
        raise ValueError(
            f"checkpoint mismatch: model emits {model.config.n} x "
            f"{model.config.latent_dim} latents, tokenizer expects "
            f"{tok.config.n} x {tok.config.latent_dim}")
    k = tok.config.k
    if o.get("grid"):
        parts = [int(x) for x in str(o["grid"]).split(",")]
        if len(parts) != 3:
            raise ValueError("--grid must be T,H,W")
        grid = tuple(parts)
    else:
        grid = (1, k, k)
    levels = o["levels"] if o["levels"] is not None else model.config.n
    if not 1 <= levels <= model.config.n:
        raise ValueError(f"--levels must lie in [1, {model.config.n}]")
    target = _scale_from(o, fallback=ScaleSpec(8 * k, 8 * k, 1, 1))

    out_dir = Path(o["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    sess = new_session(model, "cli", o["class_id"], o["seed"], grid,
                       steps=o["steps"], cfg_scale=o["cfg"])

    def write(sample: Sample, stem: str):
        if target.t > 1:
            save_video_dir(out_dir / stem, sample)
        else:
            save_png(out_dir / f"{stem}.png", sample.pixels[0])

    # level by level so lower levels are the shared execution prefix of every
    # deeper run with the same seed
    for _ in range(levels):
        refine(model, sess)
        if o.get("progressive"):
            write(tok.decode(sess.to_grid(tok.config.n), target),
                  f"level_{sess.levels_done}")
    final = tok.decode(sess.to_grid(tok.config.n), target)
    write(final, "sample")
    np.save(out_dir / "latents.npy", sess.latents)
    print(json.dumps({"levels": levels, "grid": list(grid),
                      "scale": [target.t, target.h, target.w, target.f],
                      "out": str(out_dir)}))
    return 0


def _cfg_allocate(p: _Parser):
    _add_common(p, "JSON report path (default: stdout)")
    p.add_argument("--image", help="input PNG (required)")
    p.add_argument("--k", type=int, help="patch scale divisor (default 16)")
    p.add_argument("--target-mean", type=float, dest="target_mean",
                   help="desired mean levels per patch (default 2.0)")
    p.add_argument("--min-levels", type=int, dest="min_levels", help="default 1")
    p.add_argument("--max-levels", type=int, dest="max_levels", help="default 3")


def cmd_allocate(o: dict) -> int:
    from .allocation import AllocationParams, allocate_for
    from .geometry import patch_sizes

    if not o.get("image"):
        raise ValueError("allocate needs --image")
    px = load_png(o["image"])[None]
    sample = Sample(px, ScaleSpec(px.shape[1], px.shape[2], 1, 1))
    geom = patch_sizes(sample.scale, o["k"], 1)
    params = AllocationParams(n=o["target_mean"], m=o["min_levels"], M=o["max_levels"])
    grid = allocate_for(sample, geom, params)
    arr = grid.as_grid()
    doc = {
        "grid_dims": list(grid.grid),
        "tokens_per_patch": arr[0].tolist() if grid.grid[0] == 1 else arr.tolist(),
        "mean": grid.mean(),
        "params": params.to_dict(),
    }
    text = json.dumps(doc, indent=1)
    if o.get("out"):
        Path(o["out"]).write_text(text)
    else:
        print(text)
    return 0


def _cfg_eval(p: _Parser):
    _add_common(p, "JSON report path (default: stdout)")
    p.add_argument("--ckpt", help="tokenizer checkpoint directory (required)")
    p.add_argument("--corpus", help="corpus manifest of held-out scenes (required)")
    p.add_argument("--height", type=int, help="evaluation height (default 32)")
    p.add_argument("--width", type=int, help="evaluation width (default 32)")
    p.add_argument("--limit", type=int, help="evaluate at most this many scenes")
    p.add_argument("--alloc", action="store_true", default=argparse.SUPPRESS,
                   help="also compare uniform vs entropy-guided budgets")
    p.add_argument("--target-mean", type=float, dest="target_mean",
                   help="allocation target mean for --alloc (default 2.0)")
    p.add_argument("--min-levels", type=int, dest="min_levels", help="default 1")
    p.add_argument("--max-levels", type=int, dest="max_levels", help="default 3")


def cmd_eval(o: dict) -> int:
    from .tokenizer import Tokenizer
    from .training import heldout_psnr_per_level

    if not o.get("ckpt") or not o.get("corpus"):
        raise ValueError("eval needs --ckpt and --corpus")
    tok = Tokenizer.load(o["ckpt"])
    scenes = load_corpus(o["corpus"])
    if o["limit"] is not None:
        scenes = scenes[: o["limit"]]
    scale = ScaleSpec(o["height"], o["width"], 1, 1)
    doc = {"scenes": len(scenes), "scale": [scale.h, scale.w],
           "psnr_per_level": heldout_psnr_per_level(tok, scenes, scale)}
    if o.get("alloc"):
        from .allocation import AllocationParams, allocation_rd_report

        images = [render(s, scale) for s in scenes]
        params = AllocationParams(n=o["target_mean"], m=o["min_levels"],
                                  M=o["max_levels"])
        doc["allocation"] = allocation_rd_report(tok, images, params)
    text = json.dumps(doc, indent=1)
    if o.get("out"):
        Path(o["out"]).write_text(text)
    else:
        print(text)
    return 0


def _cfg_serve(p: _Parser):
    _add_common(p, "unused for serve")
    p.add_argument("--ckpt-dir", dest="ckpt_dir",
                   help="directory holding tokenizer/ and dit/ (required)")
    p.add_argument("--port", type=int, help="listen port (default 8000)")
    p.add_argument("--host", help="bind address (default 127.0.0.1)")
    p.add_argument("--cors-origin", dest="cors_origin",
                   help="allowed browser origin (default *)")
    p.add_argument("--idle-ttl", type=float, dest="idle_ttl",
                   help="seconds before idle sessions expire (default 3600)")
    p.add_argument("--snapshot-dir", dest="snapshot_dir",
                   help="directory for session latent snapshots (default: none)")


def cmd_serve(o: dict) -> int:
    if not o.get("ckpt_dir"):
        raise ValueError("serve needs --ckpt-dir")
    from .service import run_server

    run_server(o["ckpt_dir"], host=o["host"], port=o["port"],
               cors_origin=o["cors_origin"], idle_ttl=o["idle_ttl"],
               snapshot_dir=o.get("snapshot_dir"))
    return 0


_TRAIN_KEYS = ("plan", "tokenizer", "dit", "weights")

SUBCOMMANDS = {
    "data_gen": ("write a deterministic scene corpus manifest",
                 _cfg_data_gen, cmd_data_gen,
                 {"seed": 0, "count": 64, "complexity_min": 0, "complexity_max": 8,
                  "classes": 4}, ()),
    "train_tok": ("train the hierarchical tokenizer",
                  _cfg_train_tok, cmd_train_tok,
                  {"seed": 0, "steps": 3000, "batch_size": 4, "lr": 1e-3,
                   "heldout": 8}, _TRAIN_KEYS),
    "train_dit": ("train the velocity model on frozen-tokenizer latents",
                  _cfg_train_dit, cmd_train_dit,
                  {"seed": 0, "steps": 2000, "batch_size": 8, "lr": 1e-3}, _TRAIN_KEYS),
    "reconstruct": ("encode then decode one input, reporting PSNR",
                    _cfg_reconstruct, cmd_reconstruct,
                    {"seed": 0, "index": 0, "levels": None, "height": None,
                     "width": None, "fps": None, "frames": None,
                     "in_height": 32, "in_width": 32}, ()),
    "generate": ("sample latents coarse-to-fine and decode them",
                 _cfg_generate, cmd_generate,
                 {"seed": 0, "class_id": 0, "levels": None, "height": None,
                  "width": None, "fps": None, "frames": None, "grid": None,
                  "steps": None, "cfg": None}, ()),
    "allocate": ("entropy-guided per-patch level counts for an image",
                 _cfg_allocate, cmd_allocate,
                 {"seed": 0, "k": 16, "target_mean": 2.0, "min_levels": 1,
                  "max_levels": 3}, ()),
    "eval": ("held-out reconstruction quality per level budget",
             _cfg_eval, cmd_eval,
             {"seed": 0, "height": 32, "width": 32, "limit": None,
              "target_mean": 2.0, "min_levels": 1, "max_levels": 3}, ()),
    "serve": ("expose generation sessions over HTTP",
              _cfg_serve, cmd_serve,
              {"seed": 0, "port": 8000, "host": "127.0.0.1", "cors_origin": "*",
               "idle_ttl": 3600.0}, ()),
}


_DESTS: dict[str, frozenset] = {}


def build_parser() -> _Parser:
    parser = _Parser(prog=PROG, description=__doc__.split("\n")[0])
    subs = parser.add_subparsers(dest="command", metavar="command")
    for name, (help_text, configure, _, _, _) in SUBCOMMANDS.items():
        sp = subs.add_parser(name, help=help_text, description=help_text,
                             argument_default=argparse.SUPPRESS)
        configure(sp)
        _DESTS[name] = frozenset(a.dest for a in sp._actions) - {"help"}
    return parser


def _resolve(name: str, ns: argparse.Namespace) -> dict:
    _, _, _, defaults, extra_keys = SUBCOMMANDS[name]
    provided = {k: v for k, v in vars(ns).items() if k != "command"}
    opts = dict(defaults)
    doc = {}
    if provided.get("config"):
        doc = json.loads(Path(provided["config"]).read_text())
        for key, value in doc.items():
            if key in extra_keys:
                continue
            if key not in _DESTS[name]:
                raise ValueError(f"unknown config key {key!r} for {name}")
            opts[key] = value
    opts.update(provided)
    opts["_config_doc"] = {k: doc[k] for k in extra_keys if k in doc}
    opts["_explicit"] = frozenset(provided)
    return opts


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    if not getattr(ns, "command", None):
        parser.print_help()
        return 1
    name = ns.command
    run = SUBCOMMANDS[name][2]
    try:
        return run(_resolve(name, ns))
    except (ValueError, FileNotFoundError, NotADirectoryError, KeyError) as e:
        print(f"{PROG} {name}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
