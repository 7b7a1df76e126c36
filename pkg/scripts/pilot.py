"""Pre-registered pilot that fixes the acceptance margins.

Trains every requested variant on seeds 100-104 (disjoint from the CI seeds
0-4), evaluates on the novel split and prints, for each variant, the mean and
stddev of its improvement over the class-agnostic head. The acceptance margin
for a metric is ``mean - 2 * std`` of that improvement.

    python scripts/pilot.py --rho 1.0 --iterations 1000 --out pilot.json
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from condhead.evaluation import evaluate
from condhead.heads import CondHeadConfig
from condhead.synthbench import BenchmarkSpec, gen_dataset
from condhead.train import TrainConfig, train


def run(seed: int, rho: float, variant: str, iterations: int, overrides: dict, train_overrides: dict) -> dict:
    ds = gen_dataset(BenchmarkSpec(seed=seed, rho=rho, **overrides))
    head = CondHeadConfig(anneal_iters=max(1, iterations // 4))
    cfg = TrainConfig(iterations=iterations, seed=seed, variant=variant, head=head, **train_overrides)
    model, report, _ = train(ds, cfg)
    ev = evaluate(model, ds)
    return {"seed": seed, "rho": rho, "variant": variant, "wall": report.wall_time,
            **{f"{s}.{m}": ev.splits[s][m] for s in ("base", "novel") for m in ("box_iou", "mask_iou")}}


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[100, 101, 102, 103, 104])
    ap.add_argument("--rho", type=float, default=1.0)
    ap.add_argument("--iterations", type=int, default=1000)
    ap.add_argument("--variants", nargs="+", default=["agnostic", "classwise", "condhead"])
    ap.add_argument("--bench", default="{}", help="JSON object of BenchmarkSpec overrides")
    ap.add_argument("--train", default="{}", help="JSON object of TrainConfig overrides")
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    overrides = json.loads(args.bench)
    train_overrides = json.loads(args.train)
    rows = []
    for seed in args.seeds:
        for v in args.variants:
            t0 = time.perf_counter()
            rows.append(run(seed, args.rho, v, args.iterations, overrides, train_overrides))
            print(json.dumps(rows[-1]), f"{time.perf_counter() - t0:.1f}s", flush=True)
    summary = {}
    for v in args.variants:
        if v == "agnostic":
            continue
        for key in ("novel.box_iou", "novel.mask_iou", "base.box_iou", "base.mask_iou"):
            cand = {r["seed"]: r[key] for r in rows if r["variant"] == v}
            base = {r["seed"]: r[key] for r in rows if r["variant"] == "agnostic"}
            d = np.array([cand[s] - base[s] for s in args.seeds])
            std = float(d.std(ddof=1)) if len(d) > 1 else 0.0
            summary[f"{v}-agnostic.{key}"] = {"mean": float(d.mean()), "std": std,
                                               "margin": float(d.mean() - 2 * std)}
    for k, s in summary.items():
        print(f"{k:40s} mean {s['mean']:+.4f} std {s['std']:.4f} margin {s['margin']:+.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"args": vars(args), "runs": rows, "summary": summary}, fh, indent=1)


if __name__ == "__main__":
    main()
