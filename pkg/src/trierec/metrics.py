"""Single-ground-truth ranking metrics and batched ranking evaluation."""

import math

import numpy as np

from .decoding import constrained_beam_search


def recall_at_k(rank, k):
    """1 if the true item sits at 1-based ``rank`` <= k; ``rank=None`` is a miss."""
    if k <= 0:
        raise ValueError("k must be positive")
    return 1.0 if rank is not None and rank <= k else 0.0


def ndcg_at_k(rank, k):
    if k <= 0:
        raise ValueError("k must be positive")
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


def rank_of(ranked_items, target):
    for r, item in enumerate(ranked_items, 1):
        if item == target:
            return r
    return None


def rank_examples(scorer, trie, examples, beam_width=10, K=10, batch_size=256):
    """Beam-search top-K lists for (history, target) examples (item indices)."""
    out = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        out += constrained_beam_search(scorer, [h for h, _ in chunk], trie, beam_width, K)
    return out


def summarize(ranks, ks=(5, 10)):
    report = {"users": len(ranks)}
    for k in ks:
        report[f"recall@{k}"] = float(np.mean([recall_at_k(r, k) for r in ranks])) if ranks else 0.0
        report[f"ndcg@{k}"] = float(np.mean([ndcg_at_k(r, k) for r in ranks])) if ranks else 0.0
    return report


def evaluate_examples(scorer, trie, examples, ks=(5, 10), beam_width=10, batch_size=256):
    """Mean Recall@K / NDCG@K over examples with constrained beam search.

    Returns (report, per-example top lists)."""
    K = max(ks)
    lists = rank_examples(scorer, trie, examples, max(beam_width, K), K, batch_size)
    ranks = [rank_of([i for i, _ in top], target) for top, (_, target) in zip(lists, examples)]
    return summarize(ranks, ks), lists
