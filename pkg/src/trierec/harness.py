"""Pipeline glue: dataset preparation, checkpointed training, evaluation,
ablation tables and the overhead benchmark."""

import contextlib
import hashlib
import json
import logging
import os
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import numerics as nx
from .data import SyntheticConfig, generate_synthetic, leave_one_out_split, load_interactions
from .decoding import constrained_beam_search
from .encodings import EncodingConfig
from .metrics import evaluate_examples
from .model import ModelConfig, TrieRecModel, make_batch
from .tokenizer import SemanticIds, append_collision_tokens, read_semantic_ids, tokenize
from .train import TrainConfig, index_examples, train
from .trie import Trie, build_trie

log = logging.getLogger(__name__)

VARIANTS = {
    "TrieRec": ("full", "full"),
    "w/o TAE": ("off", "full"),
    "w/o TRE": ("full", "off"),
    "TAE-Blocked": ("blocked", "full"),
    "TAE-Prefix": ("prefix", "full"),
    "TRE-w/o LCA": ("full", "no_lca"),
    "TRE-w/o delta": ("full", "no_delta"),
    "baseline": ("off", "off"),
}


class FingerprintMismatch(RuntimeError):
    pass


def fingerprint(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class Dataset:
    sids: SemanticIds
    trie: Trie
    train: list
    val: list
    test: list
    users_val: list
    users_test: list


def prepare_dataset(sequences, sids, max_items=20):
    train_ex, val_ex, test_ex = leave_one_out_split(sequences, max_items)
    return Dataset(sids, build_trie(sids), index_examples(train_ex, sids),
                   index_examples(val_ex, sids), index_examples(test_ex, sids),
                   [e.user for e in val_ex], [e.user for e in test_ex])


def synthetic_dataset(syn_config=None, levels=3, K=32, seed=0):
    syn = generate_synthetic(syn_config or SyntheticConfig())
    sids, _ = tokenize(syn.item_ids, syn.embeddings, levels, K, seed)
    return prepare_dataset(syn.sequences, sids)


def interactions_path(data):
    return os.path.join(data, "interactions.csv") if os.path.isdir(data) else data


def load_dataset(data, ids_path, k_core=5):
    sids = read_semantic_ids(ids_path)
    sequences = [s for s in load_interactions(interactions_path(data), k_core)]
    return prepare_dataset(sequences, sids)


def model_config_from(cfg, sids):
    """ModelConfig from a JSON record (``model`` and ``encoding`` sections)."""
    record = dict(cfg.get("model", {}))
    if "encoding" in cfg:
        record["encoding"] = cfg["encoding"]
    return ModelConfig(sids.vocab_sizes(), **record)


def train_config_from(cfg, **overrides):
    record = dict(cfg.get("train", {}))
    record.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**record)


# --------------------------------------------------------------------------
# train / evaluate
# --------------------------------------------------------------------------

def fit(ds, model_cfg, train_cfg, trace_file=None):
    model = TrieRecModel(model_cfg, ds.trie, seed=train_cfg.seed)
    result = train(model, ds.train, ds.val, train_cfg, trace_file)
    return model, result


def save_model(path, model, train_cfg, ds, extra=None):
    record = {"model": model.config.to_dict(), "train": train_cfg.to_dict(),
              "ids_fingerprint": ds.sids.fingerprint(), "seed": model.seed}
    record.update(extra or {})
    nx.save_checkpoint(path, record, model.state_dict())


def load_model(path, sids):
    record, tensors = nx.load_checkpoint(path)
    if record["ids_fingerprint"] != sids.fingerprint():
        raise FingerprintMismatch(
            f"checkpoint was trained on semantic ids {record['ids_fingerprint']}, "
            f"got {sids.fingerprint()}")
    cfg = ModelConfig.from_dict(record["model"])
    model = TrieRecModel(cfg, build_trie(sids), seed=record.get("seed", 0))
    model.load_state_dict(tensors)
    return model, record


def evaluate(model, ds, split="test", ks=(5, 10), beam_width=10):
    """MetricsReport dict plus per-user top lists (item ids, scores)."""
    examples = ds.test if split == "test" else ds.val
    users = ds.users_test if split == "test" else ds.users_val
    t0 = time.perf_counter()
    report, lists = evaluate_examples(model, ds.trie, examples, ks, beam_width)
    report["seconds"] = round(time.perf_counter() - t0, 3)
    report["split"] = split
    report["beam"] = beam_width
    report["config_fingerprint"] = fingerprint(model.config.to_dict())
    report["encoding"] = model.config.encoding.to_dict()
    check_report(report, ks)
    ids = ds.sids.item_ids
    tops = [{"user": u, "topk": [[ids[i], s] for i, s in top]} for u, top in zip(users, lists)]
    return report, tops


def check_report(report, ks):
    ks = sorted(ks)
    for k in ks:
        for m in ("recall", "ndcg"):
            v = report[f"{m}@{k}"]
            if not 0.0 <= v <= 1.0:
                raise AssertionError(f"{m}@{k}={v} outside [0, 1]")
    for a, b in zip(ks, ks[1:]):
        for m in ("recall", "ndcg"):
            if report[f"{m}@{a}"] > report[f"{m}@{b}"] + 1e-12:
                raise AssertionError(f"{m} is not monotone in K")


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------

def resolve_variants(spec):
    if spec in (None, "all"):
        return list(VARIANTS)
    names = [s.strip() for s in spec.split(",")] if isinstance(spec, str) else list(spec)
    for n in names:
        if n not in VARIANTS:
            raise ValueError(f"unknown variant {n!r}; choose from {list(VARIANTS)}")
    return names


def run_ablation(ds, base_model, base_train, variants, seeds, ks=(5, 10), beam_width=10,
                 on_row=None):
    """One row per (variant, seed) on a fixed tokenizer/trie, plus per-variant means."""
    rows = []
    for name in variants:
        tae, tre = VARIANTS[name]
        for seed in seeds:
            enc = EncodingConfig(tae, tre, base_model.encoding.keep_baseline_bias)
            mcfg = ModelConfig(**{**base_model.to_dict(), "encoding": enc})
            tcfg = TrainConfig(**{**base_train.to_dict(), "seed": seed})
            t0 = time.perf_counter()
            model, result = fit(ds, mcfg, tcfg)
            report, _ = evaluate(model, ds, "test", ks, beam_width)
            row = {"variant": name, "seed": seed, **report,
                   "best_epoch": result.best_epoch, "val_recall@10": result.best_val_recall,
                   "train_seconds": round(time.perf_counter() - t0, 1),
                   "model": mcfg.to_dict(), "train": tcfg.to_dict()}
            rows.append(row)
            log.info("%s seed %d: R@10 %.4f N@10 %.4f", name, seed, row["recall@10"],
                     row["ndcg@10"])
            if on_row is not None:
                on_row(row)
    return {"rows": rows, "summary": summarize_rows(rows, ks)}


def summarize_rows(rows, ks=(5, 10)):
    out = {}
    metrics = [f"{m}@{k}" for k in ks for m in ("ndcg", "recall")]
    for name in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == name]
        out[name] = {"seeds": len(sel)}
        for m in metrics:
            vals = [r[m] for r in sel]
            out[name][m] = statistics.fmean(vals)
            out[name][m + "_std"] = statistics.pstdev(vals) if len(vals) > 1 else 0.0
    return out


def format_table(summary, ks=(5, 10)):
    cols = [f"ndcg@{k}" for k in ks] + [f"recall@{k}" for k in ks]
    width = max(len(n) for n in summary) + 2
    lines = ["variant".ljust(width) + "".join(c.rjust(18) for c in cols)]
    for name, s in summary.items():
        cells = "".join(f"{s[c]:.4f}±{s[c + '_std']:.4f}".rjust(18) for c in cols)
        lines.append(name.ljust(width) + cells)
    return "\n".join(lines)


# --------------------------------------------------------------------------
# overhead benchmark
# --------------------------------------------------------------------------

def _bench_data(n_items, L, K, T, batch_size, seed):
    rng = np.random.default_rng(seed)
    prefix = rng.integers(0, K, (n_items, L - 1))
    ids = [str(i) for i in range(n_items)]
    sids = append_collision_tokens(ids, prefix)
    trie = build_trie(sids)
    hist = [list(rng.integers(0, n_items, T)) for _ in range(batch_size)]
    target = list(rng.integers(0, n_items, batch_size))
    return sids, trie, hist, target


def _single_threaded():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(1)


def bench_overhead(d=64, T=20, L=4, layers=4, heads=4, steps=200, warmup=10,
                   batch_size=32, n_items=2000, K=32, decode_users=32, decode_reps=3, seed=0,
                   variants=(("baseline", "off", "off", True), ("TrieRec", "full", "full", True),
                             ("TrieRec-nocache", "full", "full", False))):
    """Median per-step training and per-batch decode wall-clock per variant,
    with overhead relative to the first (baseline) variant.

    Steps are interleaved round-robin across variants so slow drifts in machine
    load hit every variant alike.
    """
    sids, trie, hist, target = _bench_data(n_items, L, K, T, batch_size, seed)
    out = {"config": {"d": d, "T": T, "L": L, "layers": layers, "heads": heads,
                      "steps": steps, "warmup": warmup, "batch_size": batch_size,
                      "n_items": n_items, "backend": _kernels.BACKEND},
           "variants": {}}
    runs = []
    for name, tae, tre, cache in variants:
        cfg = ModelConfig(sids.vocab_sizes(), d=d, heads=heads, layers=layers,
                          mlp_width=4 * d, dropout=0.1, max_items=T,
                          encoding=EncodingConfig(tae, tre))
        model = TrieRecModel(cfg, trie, seed=seed)
        model.cache_bias = cache
        runs.append((name, model, model.trainable(), nx.AdamW(), [], []))

    def train_step(model, params, opt):
        t0 = time.perf_counter()
        # cached: features built once per batch; uncached: rebuilt in every layer
        batch = make_batch(hist, target, trie, model.config)
        model.training = True
        loss = model.loss(batch)
        model.training = False
        opt.step(params, nx.backward(loss, params))
        return time.perf_counter() - t0

    with _single_threaded():
        for i in range(warmup + steps):
            order = runs[i % len(runs):] + runs[:i % len(runs)]
            for name, model, params, opt, times, _ in order:
                dt = train_step(model, params, opt)
                if i >= warmup:
                    times.append(dt)
        for i in range(decode_reps + 1):
            for name, model, _, _, _, dec in runs:
                t0 = time.perf_counter()
                constrained_beam_search(model, hist[:decode_users], trie, 10, 10)
                if i:
                    dec.append(time.perf_counter() - t0)
    for (name, tae, tre, cache), (_, _, _, _, times, dec) in zip(variants, runs):
        out["variants"][name] = {"train_step_median_s": statistics.median(times),
                                 "decode_batch_median_s": statistics.median(dec),
                                 "tae_mode": tae, "tre_mode": tre, "cache": cache}
    base = out["variants"][variants[0][0]]
    for name, v in out["variants"].items():
        v["train_overhead"] = v["train_step_median_s"] / base["train_step_median_s"] - 1.0
        v["decode_overhead"] = v["decode_batch_median_s"] / base["decode_batch_median_s"] - 1.0
    out["reference_claim"] = "published full-scale figure: under 10% overhead"
    return out
