"""Trie-constrained beam search and its exhaustive oracle.

A scorer is any object with

* ``start(histories) -> state``
* ``step_log_probs(state, rows, prefix_codes) -> (R, V_t)`` log-probabilities
  of the layer-t token given each row's code prefix ``(R, t)``; ``rows``
  selects the user of every prefix.

and, optionally, ``path_log_probs(state, rows, codes) -> (R, L)`` for
teacher-forced scoring of complete paths.

Scores are sums of token log-probabilities under the unrestricted per-layer
softmax; tokens that are not children of the current trie node are simply
never expanded.  Ties are broken by ascending token path.
"""

import numpy as np


class DecodeError(RuntimeError):
    pass


def child_table(trie):
    """(n_nodes, max_children) arrays of child tokens / node ids, -1 padded."""
    cached = getattr(trie, "_child_table", None)
    if cached is not None:
        return cached
    width = max(1, max(len(c) for c in trie.children))
    tok = np.full((len(trie), width), -1, dtype=np.int64)
    node = np.full((len(trie), width), -1, dtype=np.int64)
    for v, kids in enumerate(trie.children):
        for j, t in enumerate(sorted(kids)):
            tok[v, j] = t
            node[v, j] = kids[t]
    trie._child_table = (tok, node)
    return tok, node


def allowed_children(trie, node):
    return set(trie.allowed_children(node))


def _radix(trie, step):
    # radix for combining path tokens into an order-preserving integer key
    return int(trie.codes[:, step].max()) + 1


def constrained_beam_search(scorer, histories, trie, beam_width=10, K=10):
    """Top-K (item_index, score) lists, one per history.

    Every returned item is a trie leaf; fewer than K entries are returned
    only when the catalog itself is smaller.
    """
    if beam_width < K:
        raise ValueError("beam_width must be >= K")
    B = len(histories)
    L = trie.L
    state = scorer.start(histories)
    ctok, cnode = child_table(trie)
    node = np.zeros((B, 1), dtype=np.int64)
    score = np.zeros((B, 1))
    key = np.zeros((B, 1), dtype=np.int64)
    prefix = np.zeros((B, 1, 0), dtype=np.int64)
    for t in range(L):
        W = node.shape[1]
        live = node >= 0
        users, beams = np.nonzero(live)
        logp_live = scorer.step_log_probs(state, users, prefix[users, beams])
        V = logp_live.shape[1]
        logp = np.full((B, W, V), -np.inf)
        logp[users, beams] = logp_live
        toks = ctok[np.maximum(node, 0)]                                  # B, W, C
        kids = cnode[np.maximum(node, 0)]
        ok = (toks >= 0) & live[:, :, None]
        # dead beams point at the root's children; clip so the gather stays in range
        picked = np.take_along_axis(logp, np.clip(toks, 0, V - 1), axis=2)
        cand = np.where(ok, score[:, :, None] + picked, -np.inf)
        ckey = key[:, :, None] * _radix(trie, t) + np.maximum(toks, 0)
        C = toks.shape[2]
        flat_cand = cand.reshape(B, W * C)
        flat_key = ckey.reshape(B, W * C)
        rows = np.repeat(np.arange(B), W * C)
        order = np.lexsort((flat_key.ravel(), -flat_cand.ravel(), rows)).reshape(B, W * C)
        order = order[:, :beam_width] - (np.arange(B) * W * C)[:, None]
        new_w = order.shape[1]
        src_beam = order // C
        new_score = np.take_along_axis(flat_cand, order, axis=1)
        new_node = np.take_along_axis(kids.reshape(B, W * C), order, axis=1)
        new_tok = np.take_along_axis(toks.reshape(B, W * C), order, axis=1)
        new_node = np.where(np.isfinite(new_score), new_node, -1)
        prefix = np.concatenate(
            [prefix[np.arange(B)[:, None], src_beam], new_tok[:, :, None]], axis=2)
        key = np.take_along_axis(flat_key, order, axis=1)
        node, score = new_node, new_score
        assert node.shape[1] == new_w
    results = []
    for b in range(B):
        out = []
        for w in range(min(K, node.shape[1])):
            v = node[b, w]
            if v < 0:
                continue
            item = trie.item_of[v]
            if trie.depth[v] != L or item < 0 or not np.array_equal(trie.codes[item], prefix[b, w]):
                raise DecodeError(f"beam produced an invalid path {prefix[b, w].tolist()}")
            out.append((int(item), float(score[b, w])))
        results.append(out)
    return results


def path_log_probs(scorer, state, rows, codes):
    """Teacher-forced (R, L) token log-probabilities of complete paths."""
    if hasattr(scorer, "path_log_probs"):
        return scorer.path_log_probs(state, rows, codes)
    R, L = codes.shape
    out = np.empty((R, L))
    for t in range(L):
        lp = scorer.step_log_probs(state, rows, codes[:, :t])
        out[:, t] = lp[np.arange(R), codes[:, t]]
    return out


def exhaustive_rank(scorer, history, trie):
    """Score every catalog item by teacher forcing; full ranking."""
    state = scorer.start([history])
    n = trie.n_items
    lp = path_log_probs(scorer, state, np.zeros(n, dtype=np.int64), trie.codes)
    scores = lp.sum(axis=1)
    keys = np.zeros(n, dtype=np.int64)
    for t in range(trie.L):
        keys = keys * _radix(trie, t) + trie.codes[:, t]
    order = np.lexsort((keys, -scores))
    return [(int(i), float(scores[i])) for i in order]
