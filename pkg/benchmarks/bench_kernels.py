"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--n 2000] [--width 32] [--depth 3] [--repeat 5]

Both backends are imported side by side, so the env flag does not matter here.
The first numba call is excluded from timing (compilation or cache load).
"""

import argparse
import time

import numpy as np

from refinelab import _kernels
from refinelab._kernels import layer_offsets
from refinelab.nnet import NetworkSpec, init_network


def epoch_args(n, d, p, width, depth, batch, seed=0):
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(d, width, depth, 2.0, clip=True)
    params = init_network(spec, seed)
    sizes = np.asarray(spec.layer_sizes, dtype=np.int64)
    X = rng.uniform(size=(n, d))
    F = rng.uniform(-0.5, 0.5, size=(n, p))
    y = rng.normal(size=n)
    perm = rng.permutation(n).astype(np.int64)

    def fresh():
        return (params.theta.copy(), np.zeros_like(params.theta), sizes,
                layer_offsets(spec.layer_sizes), X, F, y, np.zeros(p), np.zeros(p),
                np.ones(1), np.zeros(1), perm, batch, 0.01, 0.9, 2.0, True, True, True)

    return params, X, fresh


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--d", type=int, default=2)
    ap.add_argument("--p", type=int, default=4)
    ap.add_argument("--width", type=int, default=32)
    ap.add_argument("--depth", type=int, default=3)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    params, X, fresh = epoch_args(args.n, args.d, args.p, args.width, args.depth, args.batch)
    sizes, offsets = fresh()[2], fresh()[3]
    cases = {
        "forward": (lambda k: k(params.theta, sizes, offsets, X, True),
                    _kernels.forward_numba, _kernels.forward_numpy),
        "sgd epoch": (lambda k: k(*fresh()), _kernels.epoch_numba, _kernels.epoch_numpy),
    }
    print(f"n={args.n} d={args.d} width={args.width} depth={args.depth} batch={args.batch}")
    print(f"{'kernel':<12}{'numba (ms)':>12}{'numpy (ms)':>12}{'speedup':>10}")
    for name, (call, fast, slow) in cases.items():
        call(fast)
        a = best_of(lambda: call(fast), args.repeat)
        b = best_of(lambda: call(slow), args.repeat)
        print(f"{name:<12}{a * 1e3:>12.2f}{b * 1e3:>12.2f}{b / a:>9.1f}x")
    np.testing.assert_allclose(cases["forward"][0](_kernels.forward_numba),
                               cases["forward"][0](_kernels.forward_numpy), rtol=1e-12)


if __name__ == "__main__":
    main()
