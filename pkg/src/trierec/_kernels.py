"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The numba path is used when numba imports cleanly and ``TRIEREC_DISABLE_NUMBA``
is unset (or ``0``).  Both paths are exported under explicit names
(``np_*`` / ``nb_*``) so tests and the kernel benchmark can compare them.
"""

import os

import numpy as np

_flag = os.environ.get("TRIEREC_DISABLE_NUMBA", "0").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError("numba disabled by TRIEREC_DISABLE_NUMBA")
    import numba

    njit = numba.njit
    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def num_slots(L):
    """Size of a TRE table row: (L+1)^3 triples plus the padding sentinel."""
    return (L + 1) ** 3 + 1


# --------------------------------------------------------------------------
# TRE feature index: flat (d_lca, delta_u, delta_v) index per token pair
# --------------------------------------------------------------------------

def np_tre_feature_index(codes, lengths):
    """codes (B, T, L) int, lengths (B,) real item counts -> (B, T*L, T*L) int16.

    Position p = t*L + l carries trie depth l+1.  Pairs touching a padded item
    get the sentinel slot.
    """
    codes = np.asarray(codes)
    B, T, L = codes.shape
    side = L + 1
    # item-pair longest common prefix, computed once per (t, s)
    eq = codes[:, :, None, :] == codes[:, None, :, :]          # B,T,T,L
    lcp = np.cumprod(eq, axis=-1).sum(-1)                        # B,T,T
    depth = np.arange(1, L + 1)
    d = np.minimum(lcp[:, :, None, :, None], depth[None, None, :, None, None])
    d = np.minimum(d, depth[None, None, None, None, :])          # B,T,L,T,L
    du = depth[None, None, :, None, None] - d
    dv = depth[None, None, None, None, :] - d
    flat = (d * side + du) * side + dv
    real = np.arange(T)[None, :] < np.asarray(lengths)[:, None]  # B,T
    ok = real[:, :, None, None, None] & real[:, None, None, :, None]
    flat = np.where(ok, flat, side ** 3)
    return flat.reshape(B, T * L, T * L).astype(np.int16)


@njit(cache=True)
def _nb_tre_feature_index(codes, lengths, out):
    B, T, L = codes.shape
    side = L + 1
    sentinel = side * side * side
    for b in range(B):
        n = lengths[b]
        for t in range(T):
            for s in range(T):
                if t >= n or s >= n:
                    for l in range(L):
                        for m in range(L):
                            out[b, t * L + l, s * L + m] = sentinel
                    continue
                lcp = 0
                while lcp < L and codes[b, t, lcp] == codes[b, s, lcp]:
                    lcp += 1
                for l in range(L):
                    for m in range(L):
                        d = lcp
                        if l + 1 < d:
                            d = l + 1
                        if m + 1 < d:
                            d = m + 1
                        out[b, t * L + l, s * L + m] = ((d * side + (l + 1 - d)) * side
                                                        + (m + 1 - d))


def nb_tre_feature_index(codes, lengths):
    codes = np.ascontiguousarray(codes, dtype=np.int64)
    lengths = np.ascontiguousarray(lengths, dtype=np.int64)
    B, T, L = codes.shape
    out = np.empty((B, T * L, T * L), dtype=np.int16)
    _nb_tre_feature_index(codes, lengths, out)
    return out


# --------------------------------------------------------------------------
# nearest centroid (k-means assignment)
# --------------------------------------------------------------------------

def np_nearest_centroid(x, centroids):
    """Squared-distance argmin; ties go to the lowest centroid index."""
    diff = x[:, None, :] - centroids[None, :, :]
    d2 = np.einsum("nkd,nkd->nk", diff, diff)
    idx = np.argmin(d2, axis=1)
    return idx, d2[np.arange(len(x)), idx]


@njit(cache=True)
def _nb_nearest_centroid(x, c, idx, best):
    n, dim = x.shape
    k = c.shape[0]
    for i in range(n):
        bi = 0
        bd = np.inf
        for j in range(k):
            acc = 0.0
            for q in range(dim):
                t = x[i, q] - c[j, q]
                acc += t * t
            if acc < bd:
                bd = acc
                bi = j
        idx[i] = bi
        best[i] = bd


def nb_nearest_centroid(x, centroids):
    x = np.ascontiguousarray(x, dtype=np.float64)
    c = np.ascontiguousarray(centroids, dtype=np.float64)
    idx = np.empty(len(x), dtype=np.int64)
    best = np.empty(len(x), dtype=np.float64)
    _nb_nearest_centroid(x, c, idx, best)
    return idx, best


# --------------------------------------------------------------------------
# scatter-add of gradient rows (embedding backward)
# --------------------------------------------------------------------------

def np_scatter_add_rows(n_rows, idx, src):
    """out[idx[i]] += src[i]; idx (n,), src (n, d)."""
    out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
    np.add.at(out, idx, src)
    return out


@njit(cache=True)
def _nb_scatter_add_rows(out, idx, src):
    n, d = src.shape
    for i in range(n):
        r = idx[i]
        for j in range(d):
            out[r, j] += src[i, j]


def nb_scatter_add_rows(n_rows, idx, src):
    src = np.ascontiguousarray(src)
    out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
    _nb_scatter_add_rows(out, np.ascontiguousarray(idx, dtype=np.int64), src)
    return out


# --------------------------------------------------------------------------
# bias-table gradient: grad (B, H, N, M) summed into table slots (H, S)
# --------------------------------------------------------------------------

def np_bias_table_grad(grad, idx, n_slots):
    """idx is (B, N, M) per-sequence or (N, M) shared over the batch."""
    H = grad.shape[1]
    if idx.ndim == 2:
        g = grad.sum(axis=0)
    else:
        g = np.moveaxis(grad, 1, 0)
    g = g.reshape(H, -1)
    flat = np.asarray(idx).reshape(-1).astype(np.int64)
    out = np.zeros((H, n_slots), dtype=grad.dtype)
    for h in range(H):
        out[h] = np.bincount(flat, weights=g[h], minlength=n_slots)
    return out


@njit(cache=True)
def _nb_bias_table_grad(grad, idx, out):
    B, H, N, M = grad.shape
    for b in range(B):
        for i in range(N):
            for j in range(M):
                s = idx[b, i, j]
                for h in range(H):
                    out[h, s] += grad[b, h, i, j]


def nb_bias_table_grad(grad, idx, n_slots):
    grad = np.ascontiguousarray(grad)
    out = np.zeros((grad.shape[1], n_slots), dtype=np.float64)
    if idx.ndim == 2:
        grad = np.ascontiguousarray(grad.sum(axis=0)[None])
        idx = idx[None]
    _nb_bias_table_grad(grad, np.ascontiguousarray(idx, dtype=np.int64), out)
    return out.astype(grad.dtype)


# --------------------------------------------------------------------------
# GELU (tanh form): value and derivative in one pass
# --------------------------------------------------------------------------

_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def np_gelu(x):
    x3 = x * x
    x3 *= x
    x3 *= 0.044715
    x3 += x
    x3 *= _GELU_C
    th = np.tanh(x3, out=x3)                 # reuse buffer
    half = 0.5 * (1.0 + th)
    out = x * half
    # d/dx: 0.5(1+th) + 0.5 x (1-th^2) c (1 + 3a x^2)
    sech2 = 1.0 - th * th
    inner = x * x
    inner *= 0.134145
    inner += 1.0
    inner *= _GELU_C * 0.5
    inner *= x
    inner *= sech2
    inner += half
    return out.astype(x.dtype, copy=False), inner.astype(x.dtype, copy=False)


@njit(cache=True)
def _nb_gelu(x, out, deriv):
    for i in range(x.size):
        v = x[i]
        th = np.tanh(_GELU_C * (v + 0.044715 * v * v * v))
        out[i] = 0.5 * v * (1.0 + th)
        deriv[i] = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * (_GELU_C * (1.0 + 0.134145 * v * v))


def nb_gelu(x):
    flat = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(flat)
    deriv = np.empty_like(flat)
    _nb_gelu(flat, out, deriv)
    return out.reshape(x.shape), deriv.reshape(x.shape)


# numpy's vectorised tanh beats the scalar numba loop on this kernel
gelu = np_gelu

if HAVE_NUMBA:
    tre_feature_index = nb_tre_feature_index
    nearest_centroid = nb_nearest_centroid
    scatter_add_rows = nb_scatter_add_rows
    bias_table_grad = nb_bias_table_grad
else:
    tre_feature_index = np_tre_feature_index
    nearest_centroid = np_nearest_centroid
    scatter_add_rows = np_scatter_add_rows
    bias_table_grad = np_bias_table_grad

BACKEND = "numba" if HAVE_NUMBA else "numpy"
