"""Time the numba and numpy path kernels on the registered models.

    python benchmarks/bench_kernels.py --samples 2000 --steps 4096
"""

import argparse
import math
import time

import numpy as np

from sdeconv import accel
from sdeconv.models import build_model

CASES = [
    ("heston32", accel.KernelScheme(1.0, 1.0)),
    ("ait-sahalia", accel.KernelScheme(1.0, 0.0)),
    ("gbm", accel.KernelScheme(1.0, 0.0)),
    ("poly-stress", accel.KernelScheme(1.0, 1.0)),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=4096)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    h = 1.0 / args.steps
    dw = np.random.default_rng(0).standard_normal((args.samples, args.steps)) * math.sqrt(h)
    print(f"{args.samples} paths x {args.steps} steps, best of {args.repeat}")
    print(f"{'model':<12} {'numba [s]':>10} {'numpy [s]':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, scheme in CASES:
        model = build_model(name)
        run = lambda b: accel.simulate(model.kernel, model.x0[0], dw, h, scheme,  # noqa: E731
                                       model.positive_domain, backend=b)
        run("numba")  # compile or load from cache outside the timing
        t_nb = best_of(lambda: run("numba"), args.repeat)
        t_np = best_of(lambda: run("numpy"), args.repeat)
        diff = float(np.max(np.abs(run("numba").terminal - run("numpy").terminal)))
        print(f"{name:<12} {t_nb:>10.3f} {t_np:>10.3f} {t_np / t_nb:>8.1f} {diff:>11.2e}")


if __name__ == "__main__":
    main()
