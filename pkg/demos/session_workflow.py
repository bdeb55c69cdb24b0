"""The browser workflow, headless: drive the HTTP service with plain requests.

Boots `levelflow serve` on a free port, then walks the same sequence the UI
performs: create a session, refine level by level with wall times, decode the
finished latents at two scales, and prove that an earlier level's PNG is
byte-identical when fetched again after later refines. PNGs land in
demos/out/session/.

    python3 demos/session_workflow.py --seed 11 --class-id 3
"""

import argparse
import json
import socket
import subprocess
import sys
import time
from pathlib import Path

import requests

from _common import checkpoint_arg, out_path, require_checkpoint


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def wait_ready(base: str, proc: subprocess.Popen, tries: int = 120) -> None:
    for _ in range(tries):
        if proc.poll() is not None:
            raise SystemExit(f"server exited early with {proc.returncode}")
        try:
            if requests.get(f"{base}/api/meta", timeout=2).ok:
                return
        except requests.ConnectionError:
            time.sleep(0.5)
    raise SystemExit("server never became ready")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    checkpoint_arg(ap)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--class-id", type=int, default=3)
    ap.add_argument("--steps", type=int, default=25)
    args = ap.parse_args()
    ckpt = require_checkpoint(args)

    port = free_port()
    base = f"http://127.0.0.1:{port}"
    proc = subprocess.Popen(
        [sys.executable, "-m", "levelflow.cli", "serve",
         "--ckpt-dir", str(ckpt), "--port", str(port)],
        stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    try:
        wait_ready(base, proc)
        meta = requests.get(f"{base}/api/meta").json()
        print(f"serving {ckpt} at {base}; model has {meta['max_levels']} levels")

        r = requests.post(f"{base}/api/sessions", json={
            "class_id": args.class_id, "seed": args.seed, "steps": args.steps})
        r.raise_for_status()
        sid = r.json()["id"]
        print(f"session {sid}: {r.json()['levels_done']} levels done")

        out_dir = out_path("session")
        out_dir.mkdir(exist_ok=True)
        side = 8 * meta["grid_default"]["h"]
        first_level_png = None
        for m in range(1, meta["max_levels"] + 1):
            t0 = time.monotonic()
            requests.post(f"{base}/api/sessions/{sid}/refine").raise_for_status()
            dt = time.monotonic() - t0
            png = requests.get(f"{base}/api/sessions/{sid}/decode",
                               params={"levels": m, "height": side, "width": side})
            png.raise_for_status()
            (out_dir / f"level_{m}.png").write_bytes(png.content)
            if m == 1:
                first_level_png = png.content
            print(f"  refine -> level {m} in {dt:.2f}s, decode {side}px "
                  f"({len(png.content)} bytes)")

        again = requests.get(f"{base}/api/sessions/{sid}/decode",
                             params={"levels": 1, "height": side, "width": side})
        print(f"level 1 fetched after all refines is byte-identical: "
              f"{again.content == first_level_png}")

        double = requests.get(f"{base}/api/sessions/{sid}/decode",
                              params={"height": 2 * side, "width": 2 * side})
        double.raise_for_status()
        (out_dir / f"final_{2 * side}px.png").write_bytes(double.content)
        print(f"final decode at {2 * side}px -> {out_dir}")

        status = requests.get(f"{base}/api/sessions/{sid}").json()
        print(f"status: {json.dumps({k: status[k] for k in ('levels_done', 'max_levels', 'seed')})}")
        requests.delete(f"{base}/api/sessions/{sid}")
    finally:
        proc.terminate()
        proc.wait(timeout=10)


if __name__ == "__main__":
    main()
