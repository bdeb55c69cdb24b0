"""Rate-distortion curves: reconstruction PSNR as a function of level budget.

Renders fresh scenes in three complexity bands and sweeps the uniform budget
m = 1..n. Simple scenes should saturate early (more levels buy nothing),
complex scenes should keep climbing: that separation is what makes
per-content allocation worthwhile. Writes a matplotlib plot plus a text table.

    python3 demos/rate_distortion.py --per-band 8
"""

import argparse

import numpy as np

from levelflow.data import make_scene, render
from levelflow.geometry import ScaleSpec
from levelflow.tokenizer import Tokenizer

from _common import checkpoint_arg, out_path, require_checkpoint

BANDS = (("simple", (0, 2)), ("medium", (3, 5)), ("complex", (6, 8)))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    checkpoint_arg(ap)
    ap.add_argument("--per-band", type=int, default=8, help="scenes per band")
    ap.add_argument("--side", type=int, default=32)
    args = ap.parse_args()
    ckpt = require_checkpoint(args)

    tok = Tokenizer.load(ckpt / "tokenizer")
    levels = list(range(1, tok.config.n + 1))
    scale = ScaleSpec(args.side, args.side)

    curves = {}
    for band, (lo, hi) in BANDS:
        rows = []
        for i in range(args.per_band):
            complexity = lo + i % (hi - lo + 1)
            image = render(make_scene(7000 + i, i % 4, complexity), scale)
            rows.append([tok.reconstruct(image, budget=m)[1] for m in levels])
        curves[band] = np.mean(rows, axis=0)

    header = "band    " + "".join(f"  m={m:<5d}" for m in levels)
    print(header)
    for band, psnrs in curves.items():
        print(f"{band:8s}" + "".join(f"  {p:6.2f} " for p in psnrs))

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for band, psnrs in curves.items():
        ax.plot(levels, psnrs, marker="o", label=band)
    ax.set_xlabel("levels used (uniform)")
    ax.set_ylabel("PSNR (dB)")
    ax.set_xticks(levels)
    ax.legend()
    fig.tight_layout()
    path = out_path("rate_distortion.png")
    fig.savefig(path, dpi=160)
    print(f"curves -> {path}")


if __name__ == "__main__":
    main()
