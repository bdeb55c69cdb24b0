"""Shared plumbing for the demo scripts: checkpoint discovery and image strips."""

import argparse
import os
from pathlib import Path

import numpy as np

REPO = Path(__file__).resolve().parent.parent
OUT = Path(__file__).resolve().parent / "out"


def find_checkpoint() -> Path | None:
    env = os.environ.get("LEVELFLOW_CKPT")
    if env:
        return Path(env)
    art = REPO / "artifacts"
    if not art.is_dir():
        return None
    runs = [p for p in art.glob("toy-*")
            if (p / "train_report.json").exists() and (p / "tokenizer").is_dir()]
    runs.sort(key=lambda p: p.stat().st_mtime, reverse=True)
    return runs[0] if runs else None


def checkpoint_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--ckpt", type=Path, default=find_checkpoint(),
        help="dir holding tokenizer/ (and dit/ where needed); defaults to the "
             "newest artifacts/toy-* run. Build one with "
             "`PYTHONPATH=tests python3 -m toyrun` (about an hour on one core).")


def require_checkpoint(args: argparse.Namespace) -> Path:
    if args.ckpt is None or not Path(args.ckpt).is_dir():
        raise SystemExit("no checkpoint found; pass --ckpt or build the toy run "
                         "first: PYTHONPATH=tests python3 -m toyrun")
    return Path(args.ckpt)


def out_path(name: str) -> Path:
    OUT.mkdir(parents=True, exist_ok=True)
    return OUT / name


def image_strip(frames, gutter: int = 2, background: float = 1.0) -> np.ndarray:
    """Lay (h, w, 3) float frames side by side with a thin gutter."""
    frames = [np.asarray(f, dtype=np.float32) for f in frames]
    height = max(f.shape[0] for f in frames)
    width = sum(f.shape[1] for f in frames) + gutter * (len(frames) - 1)
    canvas = np.full((height, width, 3), background, dtype=np.float32)
    x = 0
    for f in frames:
        canvas[: f.shape[0], x : x + f.shape[1]] = f
        x += f.shape[1] + gutter
    return canvas
