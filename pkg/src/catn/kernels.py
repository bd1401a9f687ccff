"""Hot numeric kernels with two interchangeable backends.

The convolution and embedding-scatter inner loops dominate training time.
Each has a numba ``@njit`` implementation and a pure-numpy implementation;
the active backend is chosen once at import from the ``CATN_KERNELS``
environment variable ("numba" or "numpy", default numba when importable).
Both backends produce results equal to a scalar-loop reference within
1e-12; they may differ in the last float bits because accumulation order
differs, so checkpoints are reproducible per backend, not across backends.

All arrays are float64; token/id arrays are int64.

Shapes:
    conv1d_fwd(x (B,l,d), w (n,s,d), b (n))          -> (B,l,n)
    conv1d_bwd(x, w, go (B,l,n))                     -> gx, gw, gb
    embedding_scatter(ids (B,l), go (B,l,d), (V,d))  -> gradient table
"""

import os

import numpy as np


def _conv1d_fwd_numpy(x, w, b):
    B, l, d = x.shape
    n, s, _ = w.shape
    p = (s - 1) // 2
    out = np.empty((B, l, n))
    out[:] = b
    for t in range(s):
        o = t - p
        a, z = max(0, -o), min(l, l - o)
        if a >= z:
            continue
        out[:, a:z, :] += x[:, a + o:z + o, :] @ w[:, t, :].T
    return out


def _conv1d_bwd_numpy(x, w, go):
    B, l, d = x.shape
    n, s, _ = w.shape
    p = (s - 1) // 2
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    gb = go.sum(axis=(0, 1))
    for t in range(s):
        o = t - p
        a, z = max(0, -o), min(l, l - o)
        if a >= z:
            continue
        gw[:, t, :] = np.einsum("bhi,bhc->ic", go[:, a:z, :], x[:, a + o:z + o, :])
        gx[:, a + o:z + o, :] += go[:, a:z, :] @ w[:, t, :]
    return gx, gw, gb


def _embedding_scatter_numpy(ids, go, n_rows):
    d = go.shape[-1]
    gt = np.zeros((n_rows, d))
    np.add.at(gt, ids.reshape(-1), go.reshape(-1, d))
    return gt


def _build_numba_kernels():
    from numba import njit

    @njit(cache=True)
    def conv1d_fwd(x, w, b):
        B, l, d = x.shape
        n, s, _ = w.shape
        p = (s - 1) // 2
        out = np.empty((B, l, n))
        for bi in range(B):
            for h in range(l):
                for i in range(n):
                    acc = b[i]
                    for t in range(s):
                        j = h + t - p
                        if 0 <= j < l:
                            for c in range(d):
                                acc += w[i, t, c] * x[bi, j, c]
                    out[bi, h, i] = acc
        return out

    @njit(cache=True)
    def conv1d_bwd(x, w, go):
        B, l, d = x.shape
        n, s, _ = w.shape
        p = (s - 1) // 2
        gx = np.zeros((B, l, d))
        gw = np.zeros((n, s, d))
        gb = np.zeros(n)
        for bi in range(B):
            for h in range(l):
                for i in range(n):
                    g = go[bi, h, i]
                    gb[i] += g
                    for t in range(s):
                        j = h + t - p
                        if 0 <= j < l:
                            for c in range(d):
                                gw[i, t, c] += g * x[bi, j, c]
                                gx[bi, j, c] += g * w[i, t, c]
        return gx, gw, gb

    @njit(cache=True)
    def embedding_scatter(ids, go, n_rows):
        B, l, d = go.shape
        gt = np.zeros((n_rows, d))
        for bi in range(B):
            for h in range(l):
                r = ids[bi, h]
                for c in range(d):
                    gt[r, c] += go[bi, h, c]
        return gt

    return conv1d_fwd, conv1d_bwd, lambda ids, go, n: embedding_scatter(ids, go, n)


def _pick_backend():
    choice = os.environ.get("CATN_KERNELS", "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(f"CATN_KERNELS must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"
    return "numba"


BACKEND = _pick_backend()

if BACKEND == "numba":
    conv1d_fwd, conv1d_bwd, embedding_scatter = _build_numba_kernels()
else:
    conv1d_fwd = _conv1d_fwd_numpy
    conv1d_bwd = _conv1d_bwd_numpy
    embedding_scatter = _embedding_scatter_numpy
