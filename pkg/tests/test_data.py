import numpy as np
import pytest
from scipy import stats

from trierec.data import (Example, InteractionSequence, SyntheticConfig, generate_synthetic,
                          k_core, leave_one_out_split, load_interactions, write_synthetic)


def write_rows(path, rows, header=True):
    lines = ["user_id,item_id,timestamp"] if header else []
    lines += [",".join(map(str, r)) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_zero_noise_leaf_members_identical():
    syn = generate_synthetic(SyntheticConfig(n_items=300, n_users=5, branching=[4, 4, 4],
                                             noise=0.0))
    leaf = syn.clusters @ np.array([16, 4, 1])
    for j in np.unique(leaf):
        members = syn.embeddings[leaf == j]
        assert np.all(members == members[0])


def test_zero_stickiness_is_uniform():
    cfg = SyntheticConfig(n_items=64, n_users=7500, branching=[4, 4, 4], stickiness=0.0,
                          mean_length=15, seed=1)
    syn = generate_synthetic(cfg)
    counts = np.zeros(64)
    for s in syn.sequences:
        for nxt in s.items[1:]:
            counts[int(nxt)] += 1
    assert counts.sum() >= 1e5
    assert stats.chisquare(counts).pvalue > 0.01


def test_full_stickiness_stays_in_leaf():
    syn = generate_synthetic(SyntheticConfig(n_items=200, n_users=100, branching=[4, 4, 4],
                                             stickiness=1.0))
    leaf = {i: tuple(c) for i, c in zip(syn.item_ids, syn.clusters)}
    for s in syn.sequences:
        assert len({leaf[i] for i in s.items}) == 1


def test_infeasible_branching_rejected():
    with pytest.raises(ValueError):
        SyntheticConfig(n_items=500, branching=[8, 8, 8])


def test_generation_is_seeded():
    a = generate_synthetic(SyntheticConfig(n_items=100, n_users=20, branching=[2, 2, 2]))
    b = generate_synthetic(SyntheticConfig(n_items=100, n_users=20, branching=[2, 2, 2]))
    assert a.embeddings.tobytes() == b.embeddings.tobytes()
    assert a.sequences == b.sequences


def test_sequence_lengths_respect_minimum():
    syn = generate_synthetic(SyntheticConfig(n_items=100, n_users=300, branching=[2, 2, 2]))
    lengths = [len(s.items) for s in syn.sequences]
    assert min(lengths) >= 5
    assert abs(np.mean(lengths) - 15) < 1.0


def test_write_then_load(tmp_path):
    syn = generate_synthetic(SyntheticConfig(n_items=100, n_users=50, branching=[2, 2, 2]))
    write_synthetic(syn, tmp_path)
    assert {p.name for p in tmp_path.iterdir()} >= {"interactions.csv", "embeddings.csv",
                                                      "clusters.csv", "synthetic.json"}
    seqs = load_interactions(tmp_path / "interactions.csv", k=1)
    assert {(s.user, tuple(s.items)) for s in seqs} == \
        {(s.user, tuple(s.items)) for s in syn.sequences}


# ---------------------------------------------------------------- ingestion

def test_empty_file(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    assert load_interactions(p) == []


def test_four_interactions_removed_by_five_core(tmp_path):
    p = write_rows(tmp_path / "i.csv", [("u", f"i{j}", j) for j in range(4)])
    assert load_interactions(p) == []


def test_six_row_cascade_two_core():
    rows = [("u1", "i1"), ("u1", "i2"), ("u2", "i1"), ("u2", "i2"), ("u3", "i2"), ("u3", "i3")]
    # i3 has one user -> dropped; u3 is left with one item -> dropped
    assert k_core(rows, k=2) == rows[:4]


def cascade_rows():
    """A 5x5 complete core plus fringe users whose removal cascades over four rounds."""
    core_users = [f"c{u}" for u in range(5)]
    core_items = [f"k{i}" for i in range(5)]
    rows = [(u, i) for u in core_users for i in core_items]
    fringe = ["f1", "f2", "f3", "f4"]
    for u in fringe:              # X has 4 users -> dropped in round 1
        rows += [(u, "X"), (u, "Y")] + [(u, k) for k in core_items[:3]]
    rows += [("g", "Y")] + [("g", k) for k in core_items[:4]]   # Y survives round 1 only
    return rows, [(u, i) for u in core_users for i in core_items]


def test_five_core_multi_round_cascade():
    rows, expected = cascade_rows()
    assert k_core(rows, 5) == expected
    assert k_core(k_core(rows, 5), 5) == expected


def test_time_order_and_ties(tmp_path):
    rows = [("u", "b", 2), ("u", "a", 1), ("u", "c", 2), ("u", "d", 0)]
    p = write_rows(tmp_path / "i.csv", rows)
    (seq,) = load_interactions(p, k=1)
    assert seq.items == ["d", "a", "b", "c"]


def test_malformed_row_reports_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("user_id,item_id,timestamp\nu,a,1\nu,b\n")
    with pytest.raises(ValueError, match=":3:"):
        load_interactions(p)


# ---------------------------------------------------------------- leave-one-out

def test_minimal_sequence():
    train, val, test = leave_one_out_split([InteractionSequence("u", ["a", "b", "c"])])
    assert train == []
    assert val == [Example("u", ["a"], "b")]
    assert test == [Example("u", ["a", "b"], "c")]


def test_five_item_trace():
    train, val, test = leave_one_out_split([InteractionSequence("u", list("abcde"))])
    assert train == [Example("u", ["a"], "b"), Example("u", ["a", "b"], "c")]
    assert val == [Example("u", list("abc"), "d")]
    assert test == [Example("u", list("abcd"), "e")]


def test_truncation_to_twenty():
    items = [f"i{j}" for j in range(25)]
    train, val, test = leave_one_out_split([InteractionSequence("u", items)])
    assert len(test[0].history) == 20 and test[0].history == items[4:24]
    assert len(val[0].history) == 20
    assert max(len(e.history) for e in train) == 20


def test_splits_disjoint_and_reproducible():
    rng = np.random.default_rng(0)
    seqs = [InteractionSequence(str(u), [f"u{u}p{j}" for j in range(rng.integers(3, 30))])
            for u in range(30)]
    a = leave_one_out_split(seqs)
    assert a == leave_one_out_split(seqs)
    train_t = {e.target for e in a[0]}
    val_t = {e.target for e in a[1]}
    test_t = {e.target for e in a[2]}
    assert not (train_t & val_t) and not (train_t & test_t) and not (val_t & test_t)


def test_too_short_sequence_rejected():
    with pytest.raises(ValueError):
        leave_one_out_split([InteractionSequence("u", ["a", "b"])])
