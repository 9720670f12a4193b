"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N] [--tokens-side S]

Both backends run on identical inputs; results are checked for agreement
before timing.
"""

import argparse
import time

import numpy as np

from vlncache import _accel, kernels
from vlncache import simulator as sim
from vlncache.geometry import Intrinsics, camera_pose, relative_pose


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--tokens-side", type=int, default=14, help="grid side; 14 gives 196 tokens")
    ap.add_argument("--dim", type=int, default=64)
    args = ap.parse_args(argv)
    if not _accel.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")

    side, patch = args.tokens_side, 16
    k = Intrinsics(fx=0.875 * side * patch, fy=0.875 * side * patch, cx=side * patch / 2, cy=side * patch / 2,
                   width=side * patch, height=side * patch, patch=patch)
    scene, _ = sim.preset("turn-heavy", 0)
    prev = camera_pose((3.0, 3.0, 1.5), 0.2)
    cur = camera_pose((3.1, 3.02, 1.5), 0.24)
    corners, eu, ev, normals = scene.arrays()
    dirs = sim.camera_rays(cur, k)
    o_prev = sim.render(scene, prev, k, args.dim)
    o_cur = sim.render(scene, cur, k, args.dim)
    t_rel = relative_pose(cur, prev)
    centers = k.grid().centers

    jobs = {
        "raycast": lambda: kernels.raycast(cur.translation, dirs, corners, eu, ev, normals),
        "remap 3x3": lambda: kernels.remap_search(centers, o_cur.depth, t_rel.rotation, t_rel.translation, k,
                                                  o_cur.features, o_prev.features, 1, 1e-6, 1e-4),
        "remap 5x5": lambda: kernels.remap_search(centers, o_cur.depth, t_rel.rotation, t_rel.translation, k,
                                                  o_cur.features, o_prev.features, 2, 1e-6, 1e-4),
    }
    print(f"M={k.num_tokens} tokens, D={args.dim}, {len(scene.surfaces)} surfaces, best of {args.repeat}")
    print(f"{'kernel':<12}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    before = kernels.backend()
    try:
        for name, fn in jobs.items():
            kernels.set_backend("numpy")
            ref = fn()
            t_np = best_of(fn, args.repeat)
            kernels.set_backend("numba")
            got = fn()  # first call compiles (or loads the on-disk cache)
            for a, b in zip(ref if isinstance(ref, tuple) else (ref,), got if isinstance(got, tuple) else (got,)):
                if not np.allclose(a, b, rtol=1e-12, atol=1e-12):
                    raise SystemExit(f"{name}: backends disagree")
            t_nb = best_of(fn, args.repeat)
            print(f"{name:<12}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>9.1f}x")
    finally:
        kernels.set_backend(before)


if __name__ == "__main__":
    main()
