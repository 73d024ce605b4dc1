#!/usr/bin/env python3
"""Numba kernels vs the pure-numpy fallback on the visibility hot path.

Each backend runs in its own subprocess because ``OCCLUFORGE_NUMBA`` is read
at import time. Usage:

    python3 benchmarks/bench_visibility.py [--frames 200] [--repeat 3]
"""

import argparse
import json
import os
import subprocess
import sys
import time

WORKER = r"""
import json, sys, time
import numpy as np
from occluforge import kernels
from occluforge.occlusion import simulate_visibility
from occluforge.toy import toy_character, toy_motion, toy_rig

frames, repeat = int(sys.argv[1]), int(sys.argv[2])
ch = toy_character()
motion = toy_motion(np.random.default_rng(0), 5, frames, 1.0, 60.0).to_motion()
verts = ch.vertices(motion)
from occluforge.kinematics import marker_positions
markers = marker_positions(ch.layout, verts, ch.mesh.triangles)
rig = toy_rig("one_side", 5, 0.2)

# warm-up compiles the numba kernels (cached on disk afterwards)
simulate_visibility(markers[:2], verts[:2], ch.mesh.triangles, rig)
best = float("inf")
for _ in range(repeat):
    t0 = time.perf_counter()
    mask = simulate_visibility(markers, verts, ch.mesh.triangles, rig)
    best = min(best, time.perf_counter() - t0)
print(json.dumps({"numba": kernels.USE_NUMBA, "seconds": best,
                  "frames": frames, "triangles": int(len(ch.mesh.triangles)),
                  "mask": mask.visible.astype(int).tolist()}))
"""


def run(flag: str, frames: int, repeat: int) -> dict:
    env = dict(os.environ, OCCLUFORGE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", WORKER, str(frames), str(repeat)],
                         env=env, check=True, capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    t0 = time.perf_counter()
    fast = run("1", args.frames, args.repeat)
    slow = run("0", args.frames, args.repeat)
    same = fast["mask"] == slow["mask"]
    rays = args.frames * 2 * 12
    print(f"toy scene: {fast['triangles']} triangles, {args.frames} frames, 2 cameras, 12 markers")
    for name, r in (("numba", fast), ("numpy", slow)):
        print(f"  {name:6s} {r['seconds']:8.4f} s   {rays / r['seconds']:12.0f} rays/s")
    print(f"  speedup {slow['seconds'] / fast['seconds']:.1f}x   masks identical: {same}")
    print(f"(total wall time {time.perf_counter() - t0:.1f} s)")
    return 0 if same else 1


if __name__ == "__main__":
    sys.exit(main())
