"""Kernel benchmark: JIT-compiled vs plain-numpy implementations.

Usage:  python3 -m pcagan.bench [--d 40] [--batch 64] [--p-pca 100]
                                [--repeats 30]

Times each hot kernel under the active backend and under the uncompiled
reference implementations from kernels.PLAIN.  When PCAGAN_NO_NUMBA is
set, both columns time the same plain functions.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from . import kernels
from .rng import stream


def _time(fn, args, repeats: int) -> float:
    fn(*args)  # warm-up (and JIT compile)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--d", type=int, default=40)
    ap.add_argument("--d-z", type=int, default=None)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--p-rc", type=int, default=2)
    ap.add_argument("--p-pca", type=int, default=100)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--repeats", type=int, default=30)
    args = ap.parse_args(argv)

    d = args.d
    dz = args.d_z or d
    bn = args.batch
    rng = stream(0, "bench")
    A = rng.standard_normal((d, d)) / np.sqrt(d)
    B = rng.standard_normal((d, dz)) / np.sqrt(d)
    bv = np.zeros(d)
    wx = rng.standard_normal(d) / np.sqrt(d)
    wy = rng.standard_normal(d) / np.sqrt(d)
    X = rng.standard_normal((bn, d))
    Y = rng.standard_normal((bn, d))
    Z = rng.standard_normal((bn, args.p_rc, dz))
    Zp = rng.standard_normal((bn, args.p_pca, dz))
    grad = rng.standard_normal(d * d + d * dz + d)
    vals = np.zeros_like(grad)
    mom = np.zeros_like(grad)

    cases = {
        "rc_step_value_grad": (
            (A, B, bv, wx, wy, 0.1, X, Y, Z, 1e-5, 1.0, 0.3),
        ),
        "pca_step_value_grad": (
            (A, B, bv, X, Y, Zp, args.k, 1e-2, 1e-2, True, 1.0 / args.p_pca, 1e-10),
        ),
        "disc_step_value_grad": (
            (wx, wy, 0.1, A, B, bv, X, Y, Z, 10.0),
        ),
        "adam_kernel": (
            (vals, grad, mom, mom, 1, 1e-3, 0.0, 0.99, 1e-8),
        ),
    }

    print("backend: %s   (d=%d d_z=%d batch=%d P_rc=%d P_pca=%d K=%d)" % (
        kernels.BACKEND, d, dz, bn, args.p_rc, args.p_pca, args.k,
    ))
    print("%-22s %12s %12s %9s" % ("kernel", "plain ms", kernels.BACKEND + " ms", "speedup"))
    for name, (call_args,) in cases.items():
        plain = _time(kernels.PLAIN[name], call_args, args.repeats)
        fast = _time(getattr(kernels, name), call_args, args.repeats)
        print("%-22s %12.3f %12.3f %8.1fx" % (
            name, plain * 1e3, fast * 1e3, plain / fast if fast > 0 else float("inf"),
        ))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
