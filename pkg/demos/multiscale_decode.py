"""One latent grid, many output scales.

The patch grid is fixed by (k, k_t), so latents encoded from a 32px render
carry no resolution of their own: the decoder can map them to any scale whose
side is a multiple of the grid. This script encodes once and decodes at
several sides, comparing each against a fresh render of the same scene at
that scale. PSNR should stay in the same band across scales rather than
collapsing away from the encode resolution.

    python3 demos/multiscale_decode.py --sides 32 48 64 96
"""

import argparse

from levelflow.data import make_scene, psnr, render, save_png
from levelflow.geometry import ScaleSpec
from levelflow.tokenizer import Tokenizer

from _common import checkpoint_arg, image_strip, out_path, require_checkpoint


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    checkpoint_arg(ap)
    ap.add_argument("--seed", type=int, default=321)
    ap.add_argument("--class-id", type=int, default=1)
    ap.add_argument("--complexity", type=int, default=4)
    ap.add_argument("--encode-side", type=int, default=32)
    ap.add_argument("--sides", type=int, nargs="+", default=[32, 48, 64, 96])
    args = ap.parse_args()
    ckpt = require_checkpoint(args)

    tok = Tokenizer.load(ckpt / "tokenizer")
    scene = make_scene(args.seed, args.class_id, args.complexity)
    source = render(scene, ScaleSpec(args.encode_side, args.encode_side))
    latents = tok.encode(source)

    frames = []
    print(f"encoded once at {args.encode_side}px; decoding at {args.sides}")
    for side in args.sides:
        decoded = tok.decode(latents, ScaleSpec(side, side))
        reference = render(scene, ScaleSpec(side, side))
        quality = psnr(decoded.pixels, reference.pixels)
        frames.append(decoded.pixels[0])
        print(f"  {side}px: {quality:.2f} dB against a native render")

    path = out_path("multiscale_decode.png")
    save_png(path, image_strip(frames))
    print(f"decodes -> {path}")


if __name__ == "__main__":
    main()
