"""AdamW training loop with validation-Recall@10 checkpoint selection."""

import json
import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .metrics import evaluate_examples
from .model import make_batch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.1
    seed: int = 0
    beam: int = 10
    val_users: int = 0          # 0 = every validation user
    eval_every: int = 1

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_val_recall: float
    trace: list


def index_examples(examples, sids):
    """Map item ids to catalog indices: [(history indices, target index)]."""
    idx = sids.index_of
    try:
        return [([idx(i) for i in ex.history], idx(ex.target)) for ex in examples]
    except KeyError as e:
        raise ValueError(f"item {e.args[0]!r} has no semantic id") from None


def batch_order(lengths, batch_size, rng, pool=64):
    """Shuffled batches of similar history length (less padding)."""
    lengths = np.asarray(lengths)
    perm = rng.permutation(len(lengths))
    batches = []
    span = batch_size * pool
    for s in range(0, len(perm), span):
        chunk = perm[s:s + span]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches += [chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def train_step(model, batch, opt, params):
    model.training = True
    try:
        loss = model.loss(batch)
    finally:
        model.training = False
    grads = nx.backward(loss, params)
    opt.step(params, grads)
    return loss.item()


def validation_recall(model, val, cfg, rng):
    if not val:
        return 0.0
    if cfg.val_users and len(val) > cfg.val_users:
        pick = np.sort(rng.choice(len(val), cfg.val_users, replace=False))
        val = [val[i] for i in pick]
    report, _ = evaluate_examples(model, model.trie, val, ks=(10,), beam_width=cfg.beam)
    return report["recall@10"]


def train(model, train_ex, val_ex, cfg, trace_file=None):
    """Train ``model`` in place on indexed examples; returns the best state by
    validation Recall@10 (the model is left holding that state)."""
    params = model.trainable()
    opt = nx.AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 7])
    val_rng = np.random.default_rng([cfg.seed, 11])
    model.dropout_rng = np.random.default_rng([cfg.seed, 13])
    lengths = [min(len(h), model.config.max_items) for h, _ in train_ex]
    best = TrainResult(model.state_dict(), 0, -1.0, [])
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for idx in batch_order(lengths, cfg.batch_size, rng):
            chunk = [train_ex[i] for i in idx]
            batch = make_batch([h for h, _ in chunk], [t for _, t in chunk],
                               model.trie, model.config)
            try:
                losses.append(train_step(model, batch, opt, params))
            except nx.NonFiniteError as e:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {e}") from e
            step += 1
        rec = {"epoch": epoch, "step": step,
               "loss": float(np.mean(losses)) if losses else float("nan")}
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            rec["val_recall@10"] = validation_recall(model, val_ex, cfg, val_rng)
            if rec["val_recall@10"] > best.best_val_recall:
                best.best_state = model.state_dict()
                best.best_epoch = epoch
                best.best_val_recall = rec["val_recall@10"]
        rec["seconds"] = round(time.perf_counter() - t0, 3)
        best.trace.append(rec)
        log.info("epoch %d loss %.4f val_recall@10 %s (%.1fs)", epoch, rec["loss"],
                 rec.get("val_recall@10"), rec["seconds"])
        if trace_file is not None:
            trace_file.write(json.dumps(rec) + "\n")
            trace_file.flush()
    model.load_state_dict(best.best_state)
    return best
