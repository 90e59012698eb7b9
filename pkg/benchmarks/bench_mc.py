"""Time the compiled Monte-Carlo kernel against the numpy fallback.

Usage::

    python benchmarks/bench_mc.py [--repeats 5] [--batch 256]

For each shape it reports the median wall time of ``mc_loss_grad`` (the
training hot path) and ``mc_probs`` per backend, the speed-up, and the
largest absolute difference between the two backends' outputs.
"""

import argparse
import time

import numpy as np

from lcm4rec import mc
from lcm4rec.kernel import KernelCdfParams, derive

SHAPES = [  # (set size, K, S)
    (4, 5, 5),
    (4, 10, 5),
    (4, 5, 50),
    (8, 5, 5),
    (4, 20, 20),
]


def _inputs(rng, N, C, K, S):
    raw = KernelCdfParams(rng.normal(0, 0.5, K), rng.uniform(0.2, 1.5, K), 0.8)
    arrays = mc._dk_arrays(derive(raw))
    delta = rng.normal(0, 1, (N, C - 1))
    z = mc.to_logits(rng.random((N, K, S)))
    return delta, z, arrays


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if "cython" not in mc.BACKENDS:
        raise SystemExit("compiled backend not built; run 'pip install -e . --no-build-isolation' first")
    rng = np.random.default_rng(args.seed)
    print(f"batch {args.batch}, median of {args.repeats} runs")
    print(f"{'C':>3} {'K':>3} {'S':>3} | {'op':<12} {'numpy ms':>10} {'cython ms':>10} {'speed-up':>9} {'max |diff|':>11}")
    for C, K, S in SHAPES:
        delta, z, arrays = _inputs(rng, args.batch, C, K, S)
        for op in ("mc_loss_grad", "mc_probs"):
            res = {}
            for name in ("numpy", "cython"):
                fn = getattr(mc.BACKENDS[name], op)
                res[name] = _median_time(lambda: fn(delta, z, *arrays), args.repeats)
            a, b = res["numpy"][1], res["cython"][1]
            a = a if isinstance(a, tuple) else (a,)
            b = b if isinstance(b, tuple) else (b,)
            diff = max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(a, b))
            tn, tc = res["numpy"][0] * 1e3, res["cython"][0] * 1e3
            print(f"{C:>3} {K:>3} {S:>3} | {op:<12} {tn:>10.3f} {tc:>10.3f} {tn / tc:>8.1f}x {diff:>11.2e}")


if __name__ == "__main__":
    main()
