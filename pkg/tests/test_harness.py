import json

import numpy as np
import pytest

from trierec import harness as hs
from trierec.data import SyntheticConfig
from trierec.encodings import EncodingConfig
from trierec.model import ModelConfig
from trierec.train import TrainConfig


@pytest.fixture(scope="module")
def ds():
    return hs.synthetic_dataset(SyntheticConfig(n_items=60, n_users=80, branching=[2, 2, 4],
                                                mean_length=7), levels=3, K=4)


def configs(ds, tae="full", tre="full"):
    m = ModelConfig(ds.sids.vocab_sizes(), d=8, heads=2, layers=1, mlp_width=16,
                    encoding=EncodingConfig(tae, tre))
    return m, TrainConfig(epochs=1, batch_size=64, seed=0)


def test_single_variant_row_equals_evaluate(ds):
    mcfg, tcfg = configs(ds)
    table = hs.run_ablation(ds, mcfg, tcfg, ["TrieRec"], [0])
    assert len(table["rows"]) == 1
    model, _ = hs.fit(ds, mcfg, tcfg)
    report, _ = hs.evaluate(model, ds)
    row = table["rows"][0]
    for k in ("recall@5", "recall@10", "ndcg@5", "ndcg@10", "users", "config_fingerprint"):
        assert row[k] == report[k]
    assert table["summary"]["TrieRec"]["recall@10"] == row["recall@10"]


def test_variants_differ_only_in_encoding(ds):
    mcfg, tcfg = configs(ds)
    table = hs.run_ablation(ds, mcfg, tcfg, ["TrieRec", "baseline"], [0])
    a, b = (r["model"] for r in table["rows"])
    assert a["encoding"] != b["encoding"]
    a.pop("encoding"), b.pop("encoding")
    assert a == b
    assert table["rows"][0]["train"] == table["rows"][1]["train"]
    assert table["rows"][0]["config_fingerprint"] != table["rows"][1]["config_fingerprint"]


def test_reports_are_bounded_and_monotone(ds):
    mcfg, tcfg = configs(ds)
    model, _ = hs.fit(ds, mcfg, tcfg)
    rep, tops = hs.evaluate(model, ds, ks=(5, 10))
    for m in ("recall", "ndcg"):
        assert 0 <= rep[f"{m}@5"] <= rep[f"{m}@10"] <= 1
    assert len(tops) == rep["users"] == len(ds.test)
    assert all(len(t["topk"]) == 10 for t in tops)
    assert all(isinstance(t["topk"][0][0], str) for t in tops)


def test_checkpoint_fingerprint_guard(ds, tmp_path):
    mcfg, tcfg = configs(ds)
    model, _ = hs.fit(ds, mcfg, tcfg)
    path = tmp_path / "m.ckpt"
    hs.save_model(path, model, tcfg, ds)
    loaded, record = hs.load_model(path, ds.sids)
    assert record["ids_fingerprint"] == ds.sids.fingerprint()
    other = hs.synthetic_dataset(SyntheticConfig(n_items=60, n_users=80, branching=[2, 2, 4],
                                                 mean_length=7, seed=9), levels=3, K=4)
    with pytest.raises(hs.FingerprintMismatch):
        hs.load_model(path, other.sids)


def test_check_report_catches_non_monotone():
    with pytest.raises(AssertionError):
        hs.check_report({"recall@5": 0.5, "recall@10": 0.4, "ndcg@5": 0.1, "ndcg@10": 0.2},
                        (5, 10))


def test_unknown_variant():
    with pytest.raises(ValueError):
        hs.resolve_variants("TrieRec,nonsense")
    assert hs.resolve_variants("all") == list(hs.VARIANTS)


def test_table_formatting():
    summary = hs.summarize_rows([
        {"variant": "a", "recall@5": 0.1, "recall@10": 0.2, "ndcg@5": 0.05, "ndcg@10": 0.07},
        {"variant": "a", "recall@5": 0.3, "recall@10": 0.4, "ndcg@5": 0.15, "ndcg@10": 0.17}])
    assert summary["a"]["recall@10"] == pytest.approx(0.3)
    assert summary["a"]["recall@10_std"] == pytest.approx(0.1)
    text = hs.format_table(summary)
    assert text.splitlines()[0].startswith("variant")
    assert "0.3000±0.1000" in text


def test_bench_self_comparison_within_noise():
    rep = hs.bench_overhead(d=16, T=10, L=4, layers=2, heads=4, steps=40, warmup=5,
                            batch_size=16, n_items=300, decode_users=8,
                            variants=(("a", "off", "off", True), ("b", "off", "off", True)))
    assert abs(rep["variants"]["b"]["train_overhead"]) <= 0.05
    json.dumps(rep)
