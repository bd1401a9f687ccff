"""Timing comparison of the numba and numpy kernel backends.

Runs each hot kernel at desk scale and at full document scale
(l=500, d=300, n=50), printing per-call wall time for both backends.
Usage: python3 benchmarks/bench_kernels.py [--repeat N]

The backends share one process here, so this imports the private
implementations directly instead of going through the CATN_KERNELS
switch (which is resolved once at import).
"""

import argparse
import time

import numpy as np

from catn import kernels


def _time(fn, *args, repeat=5):
    fn(*args)  # warm-up (numba compiles on first call)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _backends():
    numpy_impl = {
        "conv1d_fwd": kernels._conv1d_fwd_numpy,
        "conv1d_bwd": kernels._conv1d_bwd_numpy,
        "embedding_scatter": kernels._embedding_scatter_numpy,
    }
    try:
        fwd, bwd, scatter = kernels._build_numba_kernels()
    except ImportError:
        return {"numpy": numpy_impl}
    return {
        "numpy": numpy_impl,
        "numba": {"conv1d_fwd": fwd, "conv1d_bwd": bwd,
                  "embedding_scatter": scatter},
    }


SCALES = (
    ("desk  (B=16, l=96,  d=32,  n=16)", 16, 96, 32, 16),
    ("paper (B=8,  l=500, d=300, n=50)", 8, 500, 300, 50),
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    impls = _backends()
    print(f"backends available: {', '.join(impls)}")
    for label, B, l, d, n in SCALES:
        s = 3
        x = rng.normal(size=(B, l, d))
        w = rng.normal(size=(n, s, d))
        b = rng.normal(size=n)
        go = rng.normal(size=(B, l, n))
        ids = rng.integers(0, 1000, size=(B, l))
        ge = rng.normal(size=(B, l, d))
        print(f"\n{label}")
        rows = {}
        for name, impl in impls.items():
            rows[name] = (
                _time(impl["conv1d_fwd"], x, w, b, repeat=args.repeat),
                _time(impl["conv1d_bwd"], x, w, go, repeat=args.repeat),
                _time(impl["embedding_scatter"], ids, ge, 1000,
                      repeat=args.repeat),
            )
        print(f"  {'backend':8s} {'conv fwd':>12s} {'conv bwd':>12s} {'emb scatter':>12s}")
        for name, (f, bwd, e) in rows.items():
            print(f"  {name:8s} {f * 1e3:9.2f} ms {bwd * 1e3:9.2f} ms {e * 1e3:9.2f} ms")
        if len(rows) == 2:
            f_np, b_np, e_np = rows["numpy"]
            f_nb, b_nb, e_nb = rows["numba"]
            print(f"  {'speedup':8s} {f_np / f_nb:11.2f}x {b_np / b_nb:11.2f}x "
                  f"{e_np / e_nb:11.2f}x")

    # agreement audit: both backends within loop-oracle distance of each other
    if len(impls) == 2:
        x = rng.normal(size=(4, 32, 8))
        w = rng.normal(size=(6, 3, 8))
        b = rng.normal(size=6)
        go = rng.normal(size=(4, 32, 6))
        d_fwd = np.abs(impls["numba"]["conv1d_fwd"](x, w, b)
                       - impls["numpy"]["conv1d_fwd"](x, w, b)).max()
        parts = zip(impls["numba"]["conv1d_bwd"](x, w, go),
                    impls["numpy"]["conv1d_bwd"](x, w, go))
        d_bwd = max(np.abs(a - b_).max() for a, b_ in parts)
        print(f"\nmax |numba - numpy|: fwd {d_fwd:.2e}, bwd {d_bwd:.2e}")


if __name__ == "__main__":
    main()
