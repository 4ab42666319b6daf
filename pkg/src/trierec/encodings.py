"""Trie-aware absolute encoding (TAE), topology-aware relative bias (TRE),
their ablation variants, and the bucketed sequence-distance bias."""

import functools
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from ._kernels import num_slots

TAE_MODES = ("full", "blocked", "prefix", "off")
TRE_MODES = ("full", "no_lca", "no_delta", "off")


@dataclass
class EncodingConfig:
    tae_mode: str = "full"
    tre_mode: str = "full"
    keep_baseline_bias: bool = True

    def __post_init__(self):
        if self.tae_mode not in TAE_MODES:
            raise ValueError(f"tae_mode must be one of {TAE_MODES}")
        if self.tre_mode not in TRE_MODES:
            raise ValueError(f"tre_mode must be one of {TRE_MODES}")

    def to_dict(self):
        return asdict(self)


# counts items pushed through the TAE encoder (cache instrumentation)
tae_evaluations = 0


def reset_tae_counter():
    global tae_evaluations
    tae_evaluations = 0


def tae_param_shapes(L, d):
    Ld = L * d
    return {
        "tae.mlp1.w": (Ld, Ld), "tae.mlp1.b": (Ld,),
        "tae.mlp2.w": (Ld, Ld), "tae.mlp2.b": (Ld,),
        "tae.ln.g": (Ld,), "tae.ln.b": (Ld,),
        "tae.proj.w": (L, Ld, d), "tae.proj.b": (L, d),
    }


def blocked_mask(L, d, dtype=np.float64):
    """Coordinate j at any depth may only mix with coordinate j at any depth."""
    j = np.arange(L * d) % d
    return (j[:, None] == j[None, :]).astype(dtype)


def tae_encode(path_emb, params, mode="full"):
    """Positional vectors for a batch of item paths.

    path_emb: Tensor (n, L, d), the input embeddings of each item's L tokens.
    Returns Tensor (n, L, d).
    """
    global tae_evaluations
    n, L, d = path_emb.shape
    if mode == "off":
        return nx.Tensor(np.zeros((n, L, d), dtype=path_emb.dtype))
    if params["tae.proj.w"].shape != (L, L * d, d):
        raise nx.ShapeError(f"TAE expects paths of {params['tae.proj.w'].shape[0]} tokens "
                            f"of width {params['tae.proj.w'].shape[2]}, got {(L, d)}")
    tae_evaluations += n
    proj_w, proj_b = params["tae.proj.w"], params["tae.proj.b"]
    if mode == "prefix":
        # running sums e_1, e_1+e_2, ... each placed in its own layer block
        tri = np.tril(np.ones((L, L), dtype=path_emb.dtype))
        prefix = nx.matmul(nx.Tensor(tri), path_emb)                    # n, L, d
        eye = np.eye(L, dtype=path_emb.dtype)[None, :, :, None]
        spread = nx.mul(prefix.reshape(n, L, 1, d), nx.Tensor(eye))     # n, L, L, d
        per_layer = spread.reshape(n, L, L * d).transpose(1, 0, 2)      # L, n, Ld
    else:
        w1, w2 = params["tae.mlp1.w"], params["tae.mlp2.w"]
        if mode == "blocked":
            mask = nx.Tensor(blocked_mask(L, d, path_emb.dtype))
            w1, w2 = nx.mul(w1, mask), nx.mul(w2, mask)
        x = path_emb.reshape(n, L * d)
        h = nx.gelu(nx.matmul(x, w1) + params["tae.mlp1.b"])
        h = nx.layer_norm(nx.matmul(h, w2) + params["tae.mlp2.b"],
                          params["tae.ln.g"], params["tae.ln.b"])
        per_layer = h.reshape(1, n, L * d)
    p = nx.matmul(per_layer, proj_w)                                    # L, n, d
    return p.transpose(1, 0, 2) + proj_b


def apply_tae(token_emb, items, lengths, token_table, path_tokens, params, mode="full"):
    """Add TAE vectors to a right-padded encoder stream.

    token_emb: Tensor (B, T*L, d) input embeddings of the stream.
    items: (B, T) item indices, padding ignored beyond ``lengths``.
    path_tokens: (n_items, L) embedding-table rows of every item's path.
    Each distinct item in the batch is encoded once and reused at every
    occurrence and all of its L positions.
    """
    if mode == "off":
        return token_emb
    items = np.asarray(items)
    B, T = items.shape
    L = path_tokens.shape[1]
    d = token_emb.shape[-1]
    if token_emb.shape[1] != T * L:
        raise nx.ShapeError("stream length does not match T*L")
    real = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    uniq, inverse = np.unique(items[real], return_inverse=True)
    path = nx.embedding(token_table, path_tokens[uniq])                 # U, L, d
    p = tae_encode(path, params, mode).reshape(len(uniq), L * d)
    p = nx.concat([p, nx.Tensor(np.zeros((1, L * d), dtype=p.dtype))], axis=0)
    slot = np.full((B, T), len(uniq), dtype=np.int64)
    slot[real] = np.asarray(inverse).reshape(-1)
    pos = nx.embedding(p, slot).reshape(B, T * L, d)
    return token_emb + pos


# --------------------------------------------------------------------------
# TRE
# --------------------------------------------------------------------------

def tre_slot_remap(L, mode):
    """Lookup table mapping a full-mode slot to the slot read under ``mode``."""
    side = L + 1
    s = np.arange(side ** 3)
    d, du, dv = s // (side * side), (s // side) % side, s % side
    if mode == "no_lca":
        d = np.zeros_like(d)
    elif mode == "no_delta":
        du = np.zeros_like(du)
        dv = np.zeros_like(dv)
    out = (d * side + du) * side + dv
    return np.append(out, side ** 3)


def sentinel_mask(heads, L, dtype=np.float64):
    m = np.ones((heads, num_slots(L)), dtype=dtype)
    m[:, -1] = 0.0
    return m


def tre_bias(slots, table, L, mode="full"):
    """Per-head attention bias from flat feature slots.

    slots: (B, N, N) int from :meth:`Trie.batch_feature_index`.
    table: Tensor (H, (L+1)^3 + 1); the last slot is the frozen padding
    sentinel whose value is always read as 0.
    Returns Tensor (B, H, N, N), or None when mode is "off".
    """
    if mode == "off":
        return None
    slots = np.asarray(slots)
    if slots.size and (slots.min() < 0 or slots.max() >= num_slots(L)):
        raise ValueError("feature slot out of range")
    if mode != "full":
        slots = tre_slot_remap(L, mode)[slots]
    masked = nx.mul(table, nx.Tensor(sentinel_mask(table.shape[0], L, table.dtype)))
    return nx.gather_bias(masked, slots)


# --------------------------------------------------------------------------
# bucketed sequence-distance bias
# --------------------------------------------------------------------------

def relative_position_bucket(relative_position, bidirectional=True, num_buckets=32,
                             max_distance=128):
    """Signed distance (key - query) -> bucket id, exact for small distances
    and log-spaced up to ``max_distance``."""
    rp = np.asarray(relative_position, dtype=np.int64)
    buckets = np.zeros_like(rp)
    if bidirectional:
        num_buckets //= 2
        buckets += (rp > 0).astype(np.int64) * num_buckets
        rp = np.abs(rp)
    else:
        rp = -np.minimum(rp, 0)
    max_exact = num_buckets // 2
    is_small = rp < max_exact
    safe = np.maximum(rp, 1).astype(np.float64)
    large = max_exact + (np.log(safe / max_exact) / math.log(max_distance / max_exact)
                         * (num_buckets - max_exact)).astype(np.int64)
    large = np.minimum(large, num_buckets - 1)
    return buckets + np.where(is_small, rp, large)


@functools.lru_cache(maxsize=256)
def bucket_grid(q_len, k_len, bidirectional=True, num_buckets=32, max_distance=128):
    rel = np.arange(k_len)[None, :] - np.arange(q_len)[:, None]
    grid = relative_position_bucket(rel, bidirectional, num_buckets, max_distance)
    grid.flags.writeable = False
    return grid


def baseline_relative_bias(table, q_len, k_len, bidirectional=True, max_distance=128):
    """table: Tensor (H, num_buckets) -> Tensor (1, H, q_len, k_len)."""
    grid = bucket_grid(q_len, k_len, bidirectional, table.shape[1], max_distance)
    return nx.gather_bias(table, grid)
