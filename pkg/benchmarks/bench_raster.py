"""Forward and backward rasterization time for the compiled and numpy kernels.

    python3 benchmarks/bench_raster.py [--splats 200 500] [--size 64 128] [--repeat 5]
"""
import argparse
import time

import numpy as np

from meshsplat import kernels
from meshsplat.core import Camera
from meshsplat.gradients import backward_render
from meshsplat.renderer import render
from meshsplat.splats import SplatSet


def scene(n, size, seed=0):
    rng = np.random.default_rng(seed)
    pos = rng.uniform([-1, -1, -0.5], [1, 1, 0.5], (n, 3))
    s = SplatSet.create(pos, np.exp(rng.uniform(-3.0, -1.8, (n, 3))), rng.uniform(0.3, 0.9, n),
                        rotations=rng.normal(size=(n, 4)), colors=rng.uniform(0, 1, (n, 3)))
    cam = Camera.look_at([0, 0, -4], [0, 0, 0], [0, -1, 0], 0.9 * size, 0.9 * size, size, size)
    return s, cam


def timeit(fn, repeat):
    fn()
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--splats", type=int, nargs="+", default=[200, 1000])
    ap.add_argument("--size", type=int, nargs="+", default=[64, 128])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = sorted(kernels.BACKENDS)
    print(f"{'splats':>7} {'size':>5} " + " ".join(f"{b + ' fwd':>12} {b + ' bwd':>12}" for b in backends)
          + (f" {'speedup':>8}" if len(backends) > 1 else ""))
    for n in args.splats:
        for size in args.size:
            s, cam = scene(n, size)
            g = np.random.default_rng(1).normal(size=(size, size, 3))
            row = {}
            for b in backends:
                out = render(s, cam, backend=b, update_visibility=False)
                fwd = timeit(lambda: render(s, cam, backend=b, update_visibility=False), args.repeat)
                bwd = timeit(lambda: backward_render(s, out, g), args.repeat)
                row[b] = (fwd, bwd)
            line = f"{n:>7} {size:>5} " + " ".join(f"{row[b][0] * 1e3:>10.2f}ms {row[b][1] * 1e3:>10.2f}ms"
                                                   for b in backends)
            if len(backends) > 1:
                line += f" {sum(row['python']) / sum(row['cython']):>7.1f}x"
            print(line)


if __name__ == "__main__":
    main()
