"""Time the compiled kernels against the numpy fallback on typical inputs.

    python benchmarks/bench_kernels.py [--repeat 200]
"""
import argparse
import timeit

import numpy as np

from mbsocnav import _pykernels

try:
    from mbsocnav import _ckernels
except ImportError:
    _ckernels = None


def workload(seed=0):
    rng = np.random.default_rng(seed)
    angles = np.linspace(-np.pi / 2, np.pi / 2, 180)
    circles = np.column_stack([rng.uniform(-5, 5, (12, 2)), np.full(12, 0.3)])
    segments = np.array([[-6, -6, 6, -6], [6, -6, 6, 6], [6, 6, -6, 6], [-6, 6, -6, -6]], float)
    ranges = rng.uniform(0.05, 8.0, (10, 180))
    rel = np.column_stack([rng.uniform(-0.5, 0.5, 10), rng.uniform(-0.5, 0.5, 10), rng.uniform(-0.3, 0.3, 10)])
    return {
        "cast_rays": lambda k: k.cast_rays(0.1, -0.2, angles, circles, segments),
        "rasterize": lambda k: k.rasterize(ranges[0], angles, 6.0, 0.0, 0.0, 0.0, 64, 64, 0.1),
        "rasterize_stack": lambda k: k.rasterize_stack(ranges, angles, 6.0, rel, 64, 64, 0.1),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    impls = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'kernel':<18}" + "".join(f"{name + ' us':>14}" for name, _ in impls) + f"{'speedup':>10}")
    for name, fn in workload().items():
        if _ckernels is not None:
            a, b = fn(_pykernels), fn(_ckernels)
            assert np.allclose(a, b, equal_nan=True), name
        times = [min(timeit.repeat(lambda: fn(k), number=args.repeat, repeat=3)) / args.repeat * 1e6
                 for _, k in impls]
        speed = f"{times[0] / times[1]:>9.1f}x" if len(times) > 1 else f"{'n/a':>10}"
        print(f"{name:<18}" + "".join(f"{t:>14.1f}" for t in times) + speed)
    if _ckernels is None:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
