"""Prefix tree over semantic IDs and the pairwise structural features.

Node ids are assigned in BFS order with children visited in ascending token
order, so two tries built from the same code set are identical.  Root depth
is 0; the token at layer l (1-based) sits at depth l.
"""

import json
from collections import namedtuple

import numpy as np

from . import _kernels

PairFeatures = namedtuple("PairFeatures", ["d_lca", "delta_u", "delta_v"])


class DuplicateSemanticId(ValueError):
    """Two items share a full semantic id, so leaves would not be unique."""


class Trie:
    def __init__(self, codes):
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim != 2:
            raise ValueError("codes must be an (n_items, L) array")
        n, L = codes.shape
        if len({tuple(r) for r in codes}) != n:
            raise DuplicateSemanticId("duplicate semantic id")
        self.L = L
        self.codes = codes
        # build nested dicts, then renumber breadth-first
        root = {}
        for i, row in enumerate(codes):
            node = root
            for tok in row[:-1]:
                node = node.setdefault(int(tok), {})
            node[int(row[-1])] = i
        parent, depth, token, children, item = [-1], [0], [-1], [], []
        queue = [(root, 0)]
        head = 0
        while head < len(queue):
            sub, nid = queue[head]
            head += 1
            kids = {}
            for tok in sorted(sub):
                cid = len(parent)
                parent.append(nid)
                depth.append(depth[nid] + 1)
                token.append(tok)
                kids[tok] = cid
                if depth[nid] + 1 < L:
                    queue.append((sub[tok], cid))
            children.append(kids)
            item.append(-1)
        # leaves (depth L) have no children; item mapping filled below
        n_nodes = len(parent)
        children += [{} for _ in range(n_nodes - len(children))]
        item += [-1] * (n_nodes - len(item))
        self.parent = np.asarray(parent, dtype=np.int64)
        self.depth = np.asarray(depth, dtype=np.int64)
        self.token = np.asarray(token, dtype=np.int64)
        self.children = children
        self.path_of = np.empty((n, L), dtype=np.int64)
        for i, row in enumerate(codes):
            nid = 0
            for l, tok in enumerate(row):
                nid = children[nid][int(tok)]
                self.path_of[i, l] = nid
            item[nid] = i
        self.item_of = np.asarray(item, dtype=np.int64)
        self._ancestors = self._ancestor_table()

    @classmethod
    def from_semantic_ids(cls, sids):
        trie = cls(sids.codes)
        trie.item_ids = list(sids.item_ids)
        return trie

    def __len__(self):
        return len(self.parent)

    @property
    def n_items(self):
        return len(self.codes)

    def leaf_of(self, item_index):
        return int(self.path_of[item_index, -1])

    def _ancestor_table(self):
        # anc[v, k] = ancestor of v at depth k (or -1 if k > depth(v))
        anc = np.full((len(self), self.L + 1), -1, dtype=np.int64)
        anc[:, 0] = 0
        for v in range(1, len(self)):
            p = self.parent[v]
            anc[v, :self.depth[v]] = anc[p, :self.depth[v]]
            anc[v, self.depth[v]] = v
        return anc

    def _check(self, *nodes):
        for v in nodes:
            if not 0 <= v < len(self):
                raise ValueError(f"node {v} is not in this trie")

    def lca_depth(self, u, v):
        self._check(u, v)
        k = min(self.depth[u], self.depth[v])
        au, av = self._ancestors[u], self._ancestors[v]
        while au[k] != av[k]:
            k -= 1
        return int(k)

    def pair_features(self, u, v):
        d = self.lca_depth(u, v)
        return PairFeatures(d, int(self.depth[u]) - d, int(self.depth[v]) - d)

    def lca_bruteforce(self, u, v):
        """Walk parent pointers; independent of the ancestor table."""
        self._check(u, v)
        while self.depth[u] > self.depth[v]:
            u = self.parent[u]
        while self.depth[v] > self.depth[u]:
            v = self.parent[v]
        while u != v:
            u, v = self.parent[u], self.parent[v]
            if u < 0 or v < 0:
                raise ValueError("nodes do not share a root")
        return int(u)

    def pair_features_batch(self, u, v):
        """Vectorised :meth:`pair_features`: (n, 3) array for node arrays u, v."""
        u, v = np.asarray(u, dtype=np.int64), np.asarray(v, dtype=np.int64)
        self._check(*(u.min(), u.max(), v.min(), v.max()) if u.size else ())
        du, dv = self.depth[u], self.depth[v]
        k = np.minimum(du, dv)
        # ancestors agree on a prefix of depths, so count the matching ones
        cols = np.arange(self.L + 1)
        same = (self._ancestors[u] == self._ancestors[v]) & (cols[None, :] <= k[:, None])
        d = same.sum(axis=1) - 1
        return np.stack([d, du - d, dv - d], axis=1)

    def lca_bruteforce_batch(self, u, v):
        """Parent-pointer walk applied to arrays of node pairs."""
        u, v = np.array(u, dtype=np.int64), np.array(v, dtype=np.int64)
        for _ in range(self.L):
            deeper_u = self.depth[u] > self.depth[v]
            u = np.where(deeper_u, self.parent[u], u)
            deeper_v = self.depth[v] > self.depth[u]
            v = np.where(deeper_v, self.parent[v], v)
        for _ in range(self.L):
            differ = u != v
            u = np.where(differ, self.parent[u], u)
            v = np.where(differ, self.parent[v], v)
        if np.any(u != v):
            raise ValueError("nodes do not share a root")
        return u

    def allowed_children(self, node):
        self._check(node)
        if self.depth[node] >= self.L:
            raise ValueError(f"node {node} is a leaf")
        return sorted(self.children[node])

    # ------------------------------------------------------------------
    # token streams
    # ------------------------------------------------------------------

    def stream_index(self, items):
        """(t, layer, node) for every position of the flattened stream."""
        items = np.asarray(items, dtype=np.int64)
        t = np.repeat(np.arange(len(items)), self.L)
        layer = np.tile(np.arange(1, self.L + 1), len(items))
        nodes = self.path_of[items].reshape(-1)
        return np.stack([t, layer, nodes], axis=1)

    def sequence_feature_matrix(self, items):
        """(T*L, T*L, 3) array of (d_lca, delta_u, delta_v).

        The longest common prefix is computed once per item pair and reused
        for every token pair of the two items.
        """
        items = np.asarray(items, dtype=np.int64)
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise ValueError("unknown item in stream")
        T, L = len(items), self.L
        memo = {}
        out = np.empty((T * L, T * L, 3), dtype=np.int64)
        depth = np.arange(1, L + 1)
        for t in range(T):
            for s in range(T):
                key = (min(items[t], items[s]), max(items[t], items[s]))
                lcp = memo.get(key)
                if lcp is None:
                    a, b = self.codes[items[t]], self.codes[items[s]]
                    lcp = 0
                    while lcp < L and a[lcp] == b[lcp]:
                        lcp += 1
                    memo[key] = lcp
                d = np.minimum(np.minimum(lcp, depth[:, None]), depth[None, :])
                block = out[t * L:(t + 1) * L, s * L:(s + 1) * L]
                block[..., 0] = d
                block[..., 1] = depth[:, None] - d
                block[..., 2] = depth[None, :] - d
        return out

    def batch_feature_index(self, items, lengths):
        """Flat TRE slot per token pair for a right-padded (B, T) item batch."""
        items = np.asarray(items, dtype=np.int64)
        codes = self.codes[np.maximum(items, 0)]
        return _kernels.tre_feature_index(codes, lengths)

    # ------------------------------------------------------------------
    # serialisation
    # ------------------------------------------------------------------

    def to_json(self):
        nodes = []
        for v in range(len(self)):
            rec = {"id": v, "parent": int(self.parent[v]), "depth": int(self.depth[v]),
                   "token": None if v == 0 else int(self.token[v]),
                   "children": {str(t): c for t, c in sorted(self.children[v].items())}}
            if self.item_of[v] >= 0:
                i = int(self.item_of[v])
                rec["item"] = self.item_ids[i] if hasattr(self, "item_ids") else i
            nodes.append(rec)
        return json.dumps({"L": self.L, "n_items": self.n_items, "nodes": nodes},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text):
        """Inverse of :meth:`to_json` (leaf paths are read back from the tokens)."""
        doc = json.loads(text)
        nodes = doc["nodes"]
        leaves = sorted((n for n in nodes if "item" in n), key=lambda n: n["id"])
        items, codes = [], []
        for leaf in leaves:
            path, v = [], leaf
            while v["parent"] >= 0:
                path.append(v["token"])
                v = nodes[v["parent"]]
            codes.append(path[::-1])
            items.append(leaf["item"])
        trie = cls(np.asarray(codes, dtype=np.int64).reshape(len(codes), doc["L"]))
        trie.item_ids = items
        return trie


def build_trie(sids):
    """Trie over a :class:`~trierec.tokenizer.SemanticIds` map."""
    return Trie.from_semantic_ids(sids)


def flat_slot(features, L):
    """Flat TRE index of an (..., 3) feature array."""
    f = np.asarray(features)
    side = L + 1
    return (f[..., 0] * side + f[..., 1]) * side + f[..., 2]
