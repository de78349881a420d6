"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each pair is run on identical inputs; the script checks that both agree
before timing them and prints one line per kernel.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from se3dif import liegroup as lg
from se3dif import evaluation as ev
from se3dif import motionopt as mo


def best_time(fn, args, repeat):
    fn(*args)  # warm-up (triggers compilation for the numba twin)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    cost = rng.uniform(0.0, 1.0, (200, 200))
    yield "hungarian n=200", ev._hungarian_numba, ev._hungarian_numpy, (cost,), lambda out: out[0]

    a = lg.expmap(rng.standard_normal((500, 6)) * 0.5)
    b = lg.expmap(rng.standard_normal((500, 6)) * 0.5)
    args = tuple(np.ascontiguousarray(x) for x in (lg.translation(a), lg.rotation(a), lg.translation(b), lg.rotation(b)))
    yield "pairwise se3 500x500", lg._pairwise_numba, lg._pairwise_numpy, args, lambda out: out[0] + out[1]

    pts = rng.uniform(-0.5, 0.5, (50 * 32 * 9, 3))
    pose = lg.expmap(np.array([0.1, 0.0, 0.2, 0.3, -0.2, 0.5]))
    args = (pts, np.ascontiguousarray(pose[:3, :3]), np.ascontiguousarray(pose[:3, 3]), np.array([0.1, 0.2, 0.15]))
    yield "box sdf 14400 pts", mo._box_sdf_numba, mo._box_sdf_numpy, args, lambda out: out[0]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<24}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for name, fast, slow, inputs, key in cases(rng):
        if not np.allclose(key(fast(*inputs)), key(slow(*inputs)), atol=1e-12):
            raise SystemExit(f"{name}: numba and numpy twins disagree")
        tf = best_time(fast, inputs, args.repeat)
        ts = best_time(slow, inputs, args.repeat)
        print(f"{name:<24}{1e3 * tf:>12.3f}{1e3 * ts:>12.3f}{ts / tf:>9.1f}x")


if __name__ == "__main__":
    main()
