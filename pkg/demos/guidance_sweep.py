"""Classifier-free guidance strength, swept over one seed.

Generates the same session seed at several guidance scales and decodes the
full-level result. At scale 1 the model follows the unconditional field; as
the scale grows the class condition is amplified and samples commit harder to
class-typical structure. The strip makes the knob visible.

    python3 demos/guidance_sweep.py --scales 1 2 4 6 8
"""

import argparse

from levelflow.data import save_png
from levelflow.diffusion import DiT, sample
from levelflow.geometry import ScaleSpec
from levelflow.tokenizer import Tokenizer

from _common import checkpoint_arg, image_strip, out_path, require_checkpoint


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    checkpoint_arg(ap)
    ap.add_argument("--scales", type=float, nargs="+", default=[1.0, 2.0, 4.0, 6.0, 8.0])
    ap.add_argument("--class-id", type=int, default=2)
    ap.add_argument("--seed", type=int, default=5)
    ap.add_argument("--side", type=int, default=64)
    args = ap.parse_args()
    ckpt = require_checkpoint(args)

    tok = Tokenizer.load(ckpt / "tokenizer")
    dit = DiT.load(ckpt / "dit")
    k = tok.config.k
    target = ScaleSpec(args.side, args.side)

    frames = []
    for cfg in args.scales:
        latents = sample(dit, args.class_id, args.seed, dit.config.n,
                         (1, k, k), cfg_scale=cfg)
        frames.append(tok.decode(latents, target).pixels[0])
        print(f"cfg {cfg:g}: sampled and decoded")

    path = out_path("guidance_sweep.png")
    save_png(path, image_strip(frames))
    print(f"sweep (left to right: {', '.join(f'{s:g}' for s in args.scales)}) -> {path}")


if __name__ == "__main__":
    main()
