"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel gets the same inputs on both backends; the table reports the best
of ``--repeat`` runs and the speedup of the compiled core.
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from riskhorizon import _kernels


def _ball(rng, n, d, c=1.0, rmax=0.9):
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * (rng.random(n) ** (1.0 / d) * rmax / np.sqrt(c))[:, None]


def workloads(seed: int = 0):
    """Shapes close to one training step at default settings (d=64, 50 negatives)."""
    rng = np.random.default_rng(seed)
    n, d, c = 700, 64, 1.0
    Z = _ball(rng, n, d, c)
    batch, n_neg = 64, 50
    edge = (Z, c, rng.normal(0, 0.1, 8), rng.integers(0, n, batch), rng.integers(0, n, batch),
            rng.integers(0, 8, batch), rng.integers(0, n, (batch, n_neg)))
    sizes = rng.integers(3, 12, 64)
    kept_ptr = np.concatenate([[0], np.cumsum(sizes)])
    n_mask = rng.integers(1, 4, 64)
    mask_ptr = np.concatenate([[0], np.cumsum(n_mask)])
    mask = (Z, c, 1.0, kept_ptr, rng.integers(0, n, kept_ptr[-1]), np.ones(kept_ptr[-1]),
            mask_ptr, rng.integers(0, n, mask_ptr[-1]), rng.integers(0, n, (mask_ptr[-1], n_neg)))
    pair = (_ball(rng, 5000, d, c), _ball(rng, 5000, d, c), c)
    # ~10k visits of ~12 codes over 2000 patients
    n_codes = 600
    vsizes = rng.integers(6, 18, 10_000)
    vptr = np.concatenate([[0], np.cumsum(vsizes)])
    pptr = np.concatenate([[0], np.arange(5, 10_000, 5), [10_000]])
    lagged = (rng.integers(0, n_codes, vptr[-1]), vptr, pptr, np.arange(n_codes) % 4, 2, n_codes)
    return {
        "pair_dist_grad": pair,
        "edge_loss_grad": edge,
        "mask_loss_grad": mask,
        "lagged_pair_keys": lagged,
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)

    backends = _kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; run `python setup.py build_ext --inplace`", file=sys.stderr)
    rows = []
    for name, inputs in workloads().items():
        row = {"kernel": name}
        for b in backends:
            fn = getattr(_kernels.load_backend(b), name)
            number = 3 if b == "python" and name == "lagged_pair_keys" else 10
            row[b] = min(timeit.repeat(lambda: fn(*inputs), number=number, repeat=args.repeat)) / number
        if "compiled" in row:
            row["speedup"] = row["python"] / row["compiled"]
        rows.append(row)

    print(f"{'kernel':<18} {'compiled ms':>12} {'python ms':>10} {'speedup':>8}")
    for r in rows:
        comp = f"{1e3 * r['compiled']:12.3f}" if "compiled" in r else f"{'-':>12}"
        sp = f"{r['speedup']:7.1f}x" if "speedup" in r else f"{'-':>8}"
        print(f"{r['kernel']:<18} {comp} {1e3 * r['python']:10.3f} {sp}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
