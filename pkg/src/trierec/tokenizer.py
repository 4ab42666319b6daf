"""Residual k-means item tokenizer.

Each item embedding is quantized coarse-to-fine: level 1 clusters the raw
vectors, level j+1 clusters what is left after subtracting the level-j
centroid.  A final collision token makes the code tuple unique per item.
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import _kernels


@dataclass
class Codebook:
    level: int
    centroids: np.ndarray  # (K, dim)

    @property
    def size(self):
        return self.centroids.shape[0]


@dataclass
class SemanticIds:
    """Item ids and their L-token codes (last column is the collision token)."""

    item_ids: list
    codes: np.ndarray  # (n_items, L) int64

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 2 or len(self.item_ids) != len(self.codes):
            raise ValueError("codes must be (n_items, L) aligned with item_ids")
        self._index = {item: i for i, item in enumerate(self.item_ids)}
        if len(self._index) != len(self.item_ids):
            raise ValueError("duplicate item ids")

    @property
    def L(self):
        return self.codes.shape[1]

    def __len__(self):
        return len(self.item_ids)

    def index_of(self, item):
        return self._index[item]

    def __contains__(self, item):
        return item in self._index

    def vocab_sizes(self):
        """Per-layer vocabulary: observed max code + 1 at each layer."""
        if not len(self.codes):
            return [1] * self.L
        return [int(v) + 1 for v in self.codes.max(axis=0)]

    def fingerprint(self):
        h = hashlib.sha256()
        for item, row in zip(self.item_ids, self.codes):
            h.update(f"{item}\t{' '.join(map(str, row))}\n".encode())
        return h.hexdigest()[:16]


def item_sort_key(item):
    s = str(item)
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


# --------------------------------------------------------------------------
# k-means
# --------------------------------------------------------------------------

def _kmeans_pp(x, k, rng):
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            pick = rng.choice(n, p=d2 / total)
        else:
            pick = rng.integers(n)
        centers[j] = x[pick]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans(x, k, rng, max_iter=100, tol=1e-6):
    """Lloyd iterations from k-means++ seeds.  Returns (centroids, assignment).

    Every iteration ends on a mean update, so the final assignment's energy
    never exceeds the energy of the input about the origin.
    """
    x = np.asarray(x, dtype=np.float64)
    k = min(k, len(x))
    c = _kmeans_pp(x, k, rng)
    for _ in range(max_iter):
        idx, d2 = _kernels.nearest_centroid(x, c)
        counts = np.bincount(idx, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, idx, x)
        new = c.copy()
        full = counts > 0
        new[full] = sums[full] / counts[full, None]
        far = d2.copy()
        for j in np.flatnonzero(~full):
            p = int(np.argmax(far))
            new[j] = x[p]
            far[p] = -1.0
        shift = np.sqrt(((new - c) ** 2).sum(axis=1)).max()
        c = new
        if shift <= tol:
            break
    idx, _ = _kernels.nearest_centroid(x, c)
    return c, idx


def _check_embeddings(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("embeddings must be a non-empty (n_items, dim) array")
    if not np.all(np.isfinite(x)):
        raise ValueError("embeddings contain non-finite values")
    return x


def rq_kmeans_fit(embeddings, levels=3, K=32, seed=0):
    """Fit ``levels`` residual codebooks of (at most) ``K`` centroids."""
    x = _check_embeddings(embeddings)
    residual = x.copy()
    books = []
    for level in range(1, levels + 1):
        rng = np.random.default_rng([seed, level])
        c, idx = kmeans(residual, K, rng)
        books.append(Codebook(level, c))
        residual = residual - c[idx]
    return books


def assign_codes(embeddings, codebooks, return_residual=False):
    """(n_items, levels) nearest-centroid codes of successive residuals."""
    x = _check_embeddings(embeddings)
    residual = x.copy()
    codes = np.empty((len(x), len(codebooks)), dtype=np.int64)
    for j, book in enumerate(codebooks):
        if book.centroids.shape[1] != x.shape[1]:
            raise ValueError(f"level {book.level}: codebook dim {book.centroids.shape[1]} "
                             f"!= embedding dim {x.shape[1]}")
        idx, _ = _kernels.nearest_centroid(residual, book.centroids)
        codes[:, j] = idx
        residual = residual - book.centroids[idx]
    if return_residual:
        return codes, residual
    return codes


def append_collision_tokens(item_ids, prefixes):
    """Disambiguate shared prefixes with 0, 1, 2, ... in ascending item-id order."""
    prefixes = np.asarray(prefixes, dtype=np.int64)
    order = sorted(range(len(item_ids)), key=lambda i: item_sort_key(item_ids[i]))
    seen = {}
    tokens = np.zeros(len(item_ids), dtype=np.int64)
    for i in order:
        key = tuple(prefixes[i])
        tokens[i] = seen.get(key, 0)
        seen[key] = tokens[i] + 1
    return SemanticIds(list(item_ids), np.concatenate([prefixes, tokens[:, None]], axis=1))


def quantization_report(embeddings, codebooks):
    x = _check_embeddings(embeddings)
    residual = x.copy()
    energy = []
    for book in codebooks:
        idx, _ = _kernels.nearest_centroid(residual, book.centroids)
        residual = residual - book.centroids[idx]
        energy.append(float((residual ** 2).sum()))
    codes = assign_codes(x, codebooks)
    _, inverse, counts = np.unique(codes, axis=0, return_inverse=True, return_counts=True)
    shared = counts[np.asarray(inverse).reshape(-1)] > 1
    return {
        "input_energy": float((x ** 2).sum()),
        "residual_energy": energy,
        "collision_rate": float(shared.mean()),
        "max_collisions": int(counts.max()),
    }


def tokenize(item_ids, embeddings, levels=3, K=32, seed=0):
    books = rq_kmeans_fit(embeddings, levels, K, seed)
    return append_collision_tokens(item_ids, assign_codes(embeddings, books)), books


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------

def read_embeddings(path):
    """CSV ``item_id,v1..vd`` (optional header) or raw binary + ``.json`` sidecar."""
    path = os.fspath(path)
    sidecar = path + ".json"
    if os.path.exists(sidecar) and not path.endswith(".csv"):
        with open(sidecar) as f:
            meta = json.load(f)
        n, dim = meta["n_items"], meta["dim"]
        x = np.fromfile(path, dtype=meta.get("dtype", "<f4"), count=n * dim)
        ids = [str(i) for i in meta.get("item_ids", range(n))]
        return ids, x.reshape(n, dim).astype(np.float64)
    ids, rows = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if lineno == 1 and parts[0].lower() in ("item_id", "item"):
                continue
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed embedding row") from None
            ids.append(parts[0])
    if len({len(r) for r in rows}) > 1:
        raise ValueError(f"{path}: rows have differing dimensions")
    return ids, np.asarray(rows, dtype=np.float64)


def write_embeddings_csv(path, item_ids, x):
    with open(path, "w") as f:
        f.write("item_id," + ",".join(f"v{j + 1}" for j in range(x.shape[1])) + "\n")
        for item, row in zip(item_ids, x):
            f.write(f"{item}," + ",".join(repr(float(v)) for v in row) + "\n")


def write_embeddings_binary(path, item_ids, x):
    path = os.fspath(path)
    np.ascontiguousarray(x, dtype="<f4").tofile(path)
    meta = {"dtype": "<f4", "n_items": len(x), "dim": int(x.shape[1]),
            "item_ids": [str(i) for i in item_ids]}
    with open(path + ".json", "w") as f:
        json.dump(meta, f)


def write_semantic_ids(path, sids):
    with open(path, "w") as f:
        for item, row in zip(sids.item_ids, sids.codes):
            f.write(f"{item}\t{' '.join(str(int(c)) for c in row)}\n")


def read_semantic_ids(path):
    ids, rows = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                item, codes = line.split("\t")
                rows.append([int(c) for c in codes.split()])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'item_id<TAB>c1 c2 ...'") from None
            ids.append(item)
    if len({len(r) for r in rows}) > 1:
        raise ValueError(f"{path}: inconsistent code length")
    return SemanticIds(ids, np.asarray(rows, dtype=np.int64).reshape(len(rows), -1))
