"""``trierec`` command line.

Exit codes: 0 success, 1 bad input, 2 invariant violation (non-finite values,
invalid decodes, fingerprint mismatch, broken trie or tokenizer guarantees).
"""

import argparse
import json
import logging
import os
import sys

from . import _kernels
from . import numerics as nx
from .data import SyntheticConfig, generate_synthetic, write_synthetic
from .decoding import DecodeError
from .tokenizer import quantization_report, read_embeddings, read_semantic_ids, tokenize, \
    write_semantic_ids
from .train import TrainingDiverged
from .trie import DuplicateSemanticId, build_trie

log = logging.getLogger("trierec")

EXIT_INPUT = 1
EXIT_INVARIANT = 2


class InvariantViolation(RuntimeError):
    pass


def _read_json(path):
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


def _write_json(path, obj):
    if path in (None, "-"):
        json.dump(obj, sys.stdout, indent=2)
        sys.stdout.write("\n")
    else:
        with open(path, "w") as f:
            json.dump(obj, f, indent=2)


def _ks(text):
    ks = sorted({int(k) for k in text.split(",") if k.strip()})
    if not ks or ks[0] <= 0:
        raise argparse.ArgumentTypeError("cutoffs must be positive integers")
    return tuple(ks)


def apply_thread_env():
    n = os.environ.get("TRIEREC_NUM_THREADS")
    if n and _kernels.HAVE_NUMBA:
        _kernels.numba.set_num_threads(max(1, min(int(n), _kernels.numba.config.NUMBA_NUM_THREADS)))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args):
    cfg = SyntheticConfig(**_read_json(args.config))
    data = generate_synthetic(cfg)
    write_synthetic(data, args.out)
    log.info("wrote %d items, %d users to %s", len(data.item_ids), len(data.sequences), args.out)


def cmd_tokenize(args):
    ids, x = read_embeddings(args.embeddings)
    sids, books = tokenize(ids, x, args.levels, args.codebook_size, args.seed)
    if len(set(map(tuple, sids.codes))) != len(sids):
        raise InvariantViolation("semantic ids are not unique")
    write_semantic_ids(args.out, sids)
    rep = quantization_report(x, books)
    energies = [rep["input_energy"], *rep["residual_energy"]]
    if any(b > a * (1 + 1e-9) + 1e-12 for a, b in zip(energies, energies[1:])):
        raise InvariantViolation(f"residual energy increased across levels: {energies}")
    log.info("collision rate %.3f, max collisions %d", rep["collision_rate"], rep["max_collisions"])
    if args.report:
        _write_json(args.report, rep)


def cmd_build_trie(args):
    sids = read_semantic_ids(args.ids)
    trie = build_trie(sids)
    with open(args.out, "w") as f:
        f.write(trie.to_json())
    log.info("trie with %d nodes over %d items", len(trie), trie.n_items)


def _dataset(data, ids):
    from .harness import load_dataset
    return load_dataset(data, ids)


def cmd_train(args):
    from .harness import fit, model_config_from, save_model, train_config_from
    cfg = _read_json(args.config)
    ds = _dataset(args.data, args.ids)
    mcfg = model_config_from(cfg, ds.sids)
    tcfg = train_config_from(cfg, seed=args.seed, epochs=args.epochs,
                             batch_size=args.batch_size, lr=args.lr,
                             weight_decay=args.weight_decay)
    trace_path = args.trace or args.out + ".trace.jsonl"
    with open(trace_path, "w") as trace:
        model, result = fit(ds, mcfg, tcfg, trace)
    save_model(args.out, model, tcfg, ds,
               {"data_path": os.path.abspath(args.data), "ids_path": os.path.abspath(args.ids),
                "best_epoch": result.best_epoch, "best_val_recall@10": result.best_val_recall})
    log.info("best epoch %d, val Recall@10 %.4f -> %s", result.best_epoch,
             result.best_val_recall, args.out)


def cmd_eval(args):
    from .harness import evaluate, load_dataset, load_model
    record, _ = nx.load_checkpoint(args.ckpt)
    data = args.data or record.get("data_path")
    ids = args.ids or record.get("ids_path")
    if not data or not ids:
        raise ValueError("checkpoint carries no data/ids paths; pass --data and --ids")
    ds = load_dataset(data, ids)
    model, record = load_model(args.ckpt, ds.sids)
    report, tops = evaluate(model, ds, args.split, args.k, args.beam)
    report["checkpoint"] = os.path.abspath(args.ckpt)
    report["checkpoint_config"] = record
    out = sys.stdout if args.out in (None, "-") else open(args.out, "w")
    try:
        for row in tops:
            out.write(json.dumps(row) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    if args.report:
        _write_json(args.report, report)
    summary = " ".join(f"{m}={report[m]:.4f}" for m in report if "@" in m)
    log.info("%s users=%d %s", args.split, report["users"], summary)


def cmd_ablate(args):
    from .harness import (format_table, load_dataset, model_config_from, resolve_variants,
                          run_ablation, synthetic_dataset, train_config_from)
    cfg = _read_json(args.config)
    if args.data:
        if not args.ids:
            raise ValueError("--data requires --ids")
        ds = load_dataset(args.data, args.ids)
    else:
        ds = synthetic_dataset(SyntheticConfig(**cfg.get("synthetic", {})),
                               levels=cfg.get("levels", 3), K=cfg.get("codebook_size", 32))
    mcfg = model_config_from(cfg, ds.sids)
    tcfg = train_config_from(cfg, epochs=args.epochs, batch_size=args.batch_size)
    variants = resolve_variants(args.variants)
    rows_file = open(args.out + ".rows.jsonl", "w") if args.out not in (None, "-") else None

    def on_row(row):
        if rows_file:
            rows_file.write(json.dumps(row) + "\n")
            rows_file.flush()

    try:
        report = run_ablation(ds, mcfg, tcfg, variants, range(args.seeds), args.k, args.beam,
                              on_row)
    finally:
        if rows_file:
            rows_file.close()
    report["ids_fingerprint"] = ds.sids.fingerprint()
    _write_json(args.out, report)
    print(format_table(report["summary"], args.k), file=sys.stderr)


def cmd_bench(args):
    from .harness import bench_overhead
    cfg = _read_json(args.config)
    cfg["steps"] = args.steps
    report = bench_overhead(**cfg)
    _write_json(args.out, report)
    for name, v in report["variants"].items():
        print(f"{name:18s} train {v['train_step_median_s'] * 1e3:8.2f} ms "
              f"({v['train_overhead']:+.1%})  decode {v['decode_batch_median_s'] * 1e3:8.2f} ms "
              f"({v['decode_overhead']:+.1%})", file=sys.stderr)


# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="trierec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a planted hierarchical dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("tokenize", help="residual k-means semantic ids")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--levels", type=int, default=3)
    s.add_argument("--codebook-size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--report", help="write the quantization report as JSON")
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("build-trie", help="prefix trie over semantic ids")
    s.add_argument("--ids", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_trie)

    s = sub.add_parser("train")
    s.add_argument("--data", required=True, help="interactions CSV or a directory holding one")
    s.add_argument("--ids", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--trace", help="JSON-lines trace path (default CKPT.trace.jsonl)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", choices=("test", "val"), default="test")
    s.add_argument("--k", type=_ks, default=(5, 10))
    s.add_argument("--beam", type=int, default=10)
    s.add_argument("--data")
    s.add_argument("--ids")
    s.add_argument("--out", help="per-user top-K JSON lines (default stdout)")
    s.add_argument("--report", help="metrics report JSON path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate")
    s.add_argument("--variants", default="all")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--ids")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--k", type=_ks, default=(5, 10))
    s.add_argument("--beam", type=int, default=10)
    s.add_argument("--out", default="ablation.json")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("bench", help="training/decoding overhead, baseline vs TrieRec")
    s.add_argument("--config")
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    apply_thread_env()
    from .harness import FingerprintMismatch
    try:
        args.func(args)
    except (InvariantViolation, FingerprintMismatch, DecodeError, TrainingDiverged,
            nx.NonFiniteError, nx.GraphError, DuplicateSemanticId, AssertionError) as e:
        log.error("invariant violation: %s", e)
        return EXIT_INVARIANT
    except (ValueError, KeyError, OSError, json.JSONDecodeError, TypeError) as e:
        log.error("%s", e)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
