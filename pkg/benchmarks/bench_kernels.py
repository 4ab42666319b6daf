"""Time each numba kernel against its numpy twin.

    python3 benchmarks/bench_kernels.py [--reps 20] [--json out.json]

Run with TRIEREC_DISABLE_NUMBA unset; the numba side is skipped otherwise.
"""

import argparse
import json
import statistics
import sys
import time

import numpy as np

from trierec import _kernels as K


def cases(rng):
    codes = rng.integers(0, 8, (64, 20, 4))
    lengths = rng.integers(1, 21, 64)
    x = rng.normal(size=(4000, 32))
    cent = rng.normal(size=(64, 32))
    idx = rng.integers(0, 5000, 40_000)
    src = rng.normal(size=(40_000, 32))
    grad = rng.normal(size=(32, 4, 80, 80))
    slots = rng.integers(0, K.num_slots(4), (32, 80, 80))
    act = rng.normal(size=(32, 80, 512))
    return {
        "tre_feature_index": ((codes, lengths), K.np_tre_feature_index, K.nb_tre_feature_index),
        "nearest_centroid": ((x, cent), K.np_nearest_centroid, K.nb_nearest_centroid),
        "scatter_add_rows": ((5000, idx, src), K.np_scatter_add_rows, K.nb_scatter_add_rows),
        "bias_table_grad": ((grad, slots, K.num_slots(4)), K.np_bias_table_grad,
                            K.nb_bias_table_grad),
        "gelu": ((act,), K.np_gelu, K.nb_gelu),
    }


def timed(fn, args, reps):
    fn(*args)                      # compile / warm caches
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn(*args)
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(x, y, rtol=1e-10, atol=1e-10) for x, y in zip(a, b))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--json")
    args = p.parse_args(argv)
    rng = np.random.default_rng(0)
    rows = {}
    print(f"{'kernel':20s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  active")
    for name, (a, np_fn, nb_fn) in cases(rng).items():
        t_np = timed(np_fn, a, args.reps)
        row = {"numpy_s": t_np, "active": K.BACKEND if getattr(K, name) is nb_fn else "numpy"}
        if K.HAVE_NUMBA:
            row["numba_s"] = timed(nb_fn, a, args.reps)
            row["agree"] = same(np_fn(*a), nb_fn(*a))
            print(f"{name:20s} {t_np * 1e3:10.2f} {row['numba_s'] * 1e3:10.2f} "
                  f"{t_np / row['numba_s']:7.1f}x  {row['active']}")
        else:
            print(f"{name:20s} {t_np * 1e3:10.2f} {'-':>10s} {'-':>8s}  numpy")
        rows[name] = row
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"backend": K.BACKEND, "kernels": rows}, f, indent=2)
    return 0 if all(r.get("agree", True) for r in rows.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
