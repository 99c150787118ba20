"""Compare the compiled kernels with the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel is timed on the
same inputs under both backends and the outputs are checked for agreement.
"""

import argparse
import time
from functools import partial

import numpy as np

from gencdet import _kernels_py, nn

try:
    from gencdet import _kernels
except ImportError:  # extension not built
    _kernels = None


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def case_train_epoch(rng):
    spec = nn.FnnSpec(10, (64, 32), 8 * 3, seed=1)
    flat = nn.init_params(spec).flat
    n = 45_000
    x, y = rng.uniform(size=(n, 10)), rng.uniform(size=(n, 1))
    perm = rng.permutation(n)

    def run(mod):
        f = flat.copy()
        m1, m2 = np.zeros_like(f), np.zeros_like(f)
        mod.mdn_train_epoch(f, spec.layer_dims, 0.01, x, y, perm, 128, 8, 1e-3, m1, m2, 0, 1e-3, 0.9, 0.999, 1e-8)
        return f

    return "mdn_train_epoch (45k rows, 10-64-32-24)", run


def case_log_density(rng):
    raw, y = rng.normal(size=(200_000, 24)), rng.normal(size=(200_000, 1))
    return "mdn_log_density (200k rows, G=8)", lambda mod: mod.mdn_log_density(raw, y, 8, 1e-3)


def case_nll_grad(rng):
    raw, y = rng.normal(size=(200_000, 24)), rng.normal(size=(200_000, 1))
    return "mdn_nll_grad (200k rows, G=8)", lambda mod: mod.mdn_nll_grad(raw, y, 8, 1e-3)[1]


def case_perm(rng):
    m, k = 1000, 300
    codes = rng.integers(0, k, size=2 * m)
    uniforms = rng.uniform(size=(500, m))
    return "perm_u_numerators (m=1000, 500 perms)", lambda mod: mod.perm_u_numerators(codes, m, k, uniforms)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; only the numpy backend is available")
    print(f"{'kernel':42s} {'numpy s':>10s} {'compiled s':>11s} {'speedup':>8s} {'max |diff|':>11s}")
    for make in (case_train_epoch, case_log_density, case_nll_grad, case_perm):
        name, run = make(np.random.default_rng(0))
        t_py = best_of(partial(run, _kernels_py), args.repeats)
        if _kernels is None:
            print(f"{name:42s} {t_py:10.4f}")
            continue
        t_c = best_of(partial(run, _kernels), args.repeats)
        diff = np.max(np.abs(np.asarray(run(_kernels_py), float) - np.asarray(run(_kernels), float)))
        print(f"{name:42s} {t_py:10.4f} {t_c:11.4f} {t_py / t_c:7.1f}x {diff:11.2e}")


if __name__ == "__main__":
    main()
