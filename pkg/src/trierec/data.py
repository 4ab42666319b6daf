"""Synthetic hierarchical catalogs, interaction ingestion, leave-one-out."""

import csv
import json
import os
from collections import Counter, namedtuple
from dataclasses import asdict, dataclass, field

import numpy as np

from .tokenizer import write_embeddings_csv

InteractionSequence = namedtuple("InteractionSequence", ["user", "items"])
Example = namedtuple("Example", ["user", "history", "target"])


@dataclass
class SyntheticConfig:
    n_items: int = 2000
    n_users: int = 5000
    dim: int = 16
    branching: list = field(default_factory=lambda: [8, 8, 8])
    leaf_capacity: int = 16
    center_scale: float = 1.0
    level_decay: float = 0.5
    noise: float = 0.3          # noise std as a multiple of center_scale
    mean_length: float = 15.0
    min_length: int = 5
    stickiness: float = 0.8
    seed: int = 0

    def __post_init__(self):
        self.branching = [int(b) for b in self.branching]
        if len(self.branching) != 3 or min(self.branching) < 1:
            raise ValueError("branching must list three positive fan-outs")
        leaves = int(np.prod(self.branching))
        if leaves > self.n_items or leaves * self.leaf_capacity < self.n_items:
            raise ValueError(f"infeasible branching: {leaves} leaves for {self.n_items} items "
                             f"at capacity {self.leaf_capacity}")
        if not 0.0 <= self.stickiness <= 1.0:
            raise ValueError("stickiness must be in [0, 1]")
        if self.mean_length < self.min_length or self.min_length < 1:
            raise ValueError("need 1 <= min_length <= mean_length")

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticData:
    item_ids: list
    embeddings: np.ndarray
    clusters: np.ndarray      # (n_items, 3) cluster index at each level
    sequences: list           # InteractionSequence
    config: SyntheticConfig


def generate_synthetic(config):
    rng = np.random.default_rng(config.seed)
    b1, b2, b3 = config.branching
    dim = config.dim
    s1 = config.center_scale
    s2 = s1 * config.level_decay
    s3 = s2 * config.level_decay
    c1 = rng.normal(0.0, s1, (b1, dim))
    c2 = rng.normal(0.0, s2, (b1, b2, dim))
    c3 = rng.normal(0.0, s3, (b1, b2, b3, dim))
    leaves = b1 * b2 * b3
    leaf = rng.permutation(np.arange(config.n_items) % leaves)
    l1, l2, l3 = leaf // (b2 * b3), (leaf // b3) % b2, leaf % b3
    x = c1[l1] + c2[l1, l2] + c3[l1, l2, l3]
    if config.noise > 0:
        x = x + rng.normal(0.0, config.noise * s1, x.shape)
    members = [np.flatnonzero(leaf == j) for j in range(leaves)]

    sequences = []
    n = config.n_items
    extra = config.mean_length - config.min_length
    for u in range(config.n_users):
        length = config.min_length + int(rng.poisson(extra))
        cur = int(rng.integers(n))
        seq = [cur]
        for _ in range(length - 1):
            if rng.random() < config.stickiness:
                group = members[leaf[cur]]
                if len(group) > 1:
                    others = group[group != cur]
                    cur = int(others[rng.integers(len(others))])
            else:
                cur = int(rng.integers(n))
            seq.append(cur)
        sequences.append(InteractionSequence(str(u), [str(i) for i in seq]))
    return SyntheticData([str(i) for i in range(n)], x,
                         np.stack([l1, l2, l3], axis=1), sequences, config)


def write_synthetic(data, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "interactions.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["user_id", "item_id", "timestamp"])
        for seq in data.sequences:
            for t, item in enumerate(seq.items):
                w.writerow([seq.user, item, t])
    write_embeddings_csv(os.path.join(out_dir, "embeddings.csv"), data.item_ids, data.embeddings)
    with open(os.path.join(out_dir, "clusters.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["item_id", "level1", "level2", "level3"])
        for item, row in zip(data.item_ids, data.clusters):
            w.writerow([item, *map(int, row)])
    with open(os.path.join(out_dir, "synthetic.json"), "w") as f:
        json.dump(data.config.to_dict(), f, indent=2)


# --------------------------------------------------------------------------
# ingestion
# --------------------------------------------------------------------------

def k_core(rows, k=5):
    """Drop users and items with fewer than k interactions until nothing changes."""
    rows = list(rows)
    while True:
        users = Counter(r[0] for r in rows)
        items = Counter(r[1] for r in rows)
        kept = [r for r in rows if users[r[0]] >= k and items[r[1]] >= k]
        if len(kept) == len(rows):
            return kept
        rows = kept


def load_interactions(path, k=5):
    """Read ``user_id,item_id,timestamp`` rows into per-user time-ordered sequences."""
    rows = []
    with open(path, newline="") as f:
        for lineno, rec in enumerate(csv.reader(f), 1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if lineno == 1 and rec[0].strip().lower() in ("user_id", "user"):
                continue
            if len(rec) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(rec)}")
            user, item, ts = (c.strip() for c in rec)
            try:
                ts = float(ts)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad timestamp {ts!r}") from None
            rows.append((user, item, ts, lineno))
    rows = k_core(rows, k)
    by_user = {}
    for user, item, ts, lineno in rows:
        by_user.setdefault(user, []).append((ts, lineno, item))
    out = []
    for user in sorted(by_user, key=_natural):
        events = sorted(by_user[user])
        out.append(InteractionSequence(user, [e[2] for e in events]))
    return out


def _natural(s):
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


def leave_one_out_split(sequences, max_items=20):
    """Last item -> test, second to last -> validation, every earlier
    position -> a training example.  Histories keep the latest ``max_items``."""
    train, val, test = [], [], []
    for seq in sequences:
        items = list(seq.items)
        if len(items) < 3:
            raise ValueError(f"user {seq.user}: sequence too short for leave-one-out")
        for j in range(1, len(items) - 2):
            train.append(Example(seq.user, items[max(0, j - max_items):j], items[j]))
        val.append(Example(seq.user, items[:-2][-max_items:], items[-2]))
        test.append(Example(seq.user, items[:-1][-max_items:], items[-1]))
    return train, val, test
