"""Compare the numba and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]

Each case runs once per backend to warm up (numba compiles on first call),
then reports the best of ``--repeat`` timings and the max abs difference
between backends.
"""
import argparse
import time

import numpy as np

from trajcvae import _accel, kernels
from trajcvae.cvae import CVAE, ModelConfig


def _time(fn, repeat):
    fn()
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(rng):
    x = rng.standard_normal((64, 32, 14))
    w = rng.standard_normal((128, 32, 4))
    gy = rng.standard_normal((64, 128, 6))
    yield "conv corr (64x32x14, k4 s2)", lambda: kernels.corr(x, w, 2)
    yield "conv grad_w", lambda: kernels.corr_grad_w(x, gy, 4, 2)
    yield "conv scatter", lambda: kernels.scatter(gy, w, 2, 14)

    n, d = 120, 3
    mu = rng.standard_normal((n, d))
    var = rng.uniform(0.05, 1.0, (n, d))
    days = np.arange(n)
    yield "BC exceedance, 120 days all pairs", lambda: kernels.bc_exceed_count(mu, var, days, mu, var, days, 0.8, 0, True)

    m = 60
    a = (rng.random((m, m)) < 0.3).astype(float)
    a = np.triu(a, 1)
    a = a + a.T
    mask = np.ones((m, m)) - np.eye(m)
    tau0 = rng.dirichlet(np.ones(4), size=m)
    log_rho = np.log(np.full(4, 0.25))
    alpha = rng.uniform(0.1, 0.9, (4, 4))
    alpha = 0.5 * (alpha + alpha.T)
    la, l1a = np.log(alpha), np.log1p(-alpha)
    yield "SBM mean-field sweep (60 nodes, R=4)", lambda: kernels.ve_sweep(a, mask, tau0.copy(), log_rho, la, l1a)

    model = CVAE(ModelConfig(seed=0))
    y = rng.standard_normal((64, 24, 2))
    cov = rng.standard_normal((64, 2))
    eps = rng.standard_normal((64, 3))
    yield "CVAE train step (batch 64)", lambda: model.loss_and_grads(y, cov, eps, scale=1 / 64)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not _accel.HAS_NUMBA:
        print("numba not installed; only the numpy backend is available")
    print(f"{'case':42s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max|diff|':>10s}")
    for name, fn in _cases(np.random.default_rng(0)):
        _accel.set_backend("numpy")
        t_np = _time(fn, args.repeat)
        ref = fn()
        if _accel.HAS_NUMBA:
            _accel.set_backend("numba")
            t_nb = _time(fn, args.repeat)
            got = fn()
            diff = max(float(np.max(np.abs(np.asarray(r, dtype=float) - np.asarray(g, dtype=float))))
                       for r, g in zip(ref if isinstance(ref, tuple) else (ref,), got if isinstance(got, tuple) else (got,)))
            print(f"{name:42s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.2f} {diff:10.2e}")
        else:
            print(f"{name:42s} {1e3 * t_np:10.3f} {'-':>10s} {'-':>8s} {'-':>10s}")
    _accel.set_backend("numba" if _accel.HAS_NUMBA else "numpy")


if __name__ == "__main__":
    main()
