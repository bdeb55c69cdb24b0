"""One scene reconstructed under growing level budgets.

Encodes a scene once per uniform budget m = 1..n and decodes each, printing
the PSNR ladder. Lower levels carry coarse structure, so m=1 should look like
a blurry sketch and each added level should recover detail. The strip written
to demos/out/ shows ground truth on the left, then m = 1..n.

    python3 demos/reconstruction_ladder.py --seed 123 --complexity 6
"""

import argparse

from levelflow.data import make_scene, render, save_png
from levelflow.geometry import ScaleSpec
from levelflow.tokenizer import Tokenizer

from _common import checkpoint_arg, image_strip, out_path, require_checkpoint


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    checkpoint_arg(ap)
    ap.add_argument("--seed", type=int, default=123)
    ap.add_argument("--class-id", type=int, default=2)
    ap.add_argument("--complexity", type=int, default=6)
    ap.add_argument("--side", type=int, default=32)
    args = ap.parse_args()
    ckpt = require_checkpoint(args)

    tok = Tokenizer.load(ckpt / "tokenizer")
    scene = make_scene(args.seed, args.class_id, args.complexity)
    image = render(scene, ScaleSpec(args.side, args.side))

    frames = [image.pixels[0]]
    print(f"scene seed={args.seed} complexity={args.complexity} at {args.side}px")
    for m in range(1, tok.config.n + 1):
        out, quality = tok.reconstruct(image, budget=m)
        frames.append(out.pixels[0])
        print(f"  levels={m}: {quality:.2f} dB")

    path = out_path("reconstruction_ladder.png")
    save_png(path, image_strip(frames))
    print(f"ground truth + ladder -> {path}")


if __name__ == "__main__":
    main()
