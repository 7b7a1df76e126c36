"""Command-line entry point: ``condhead {gen,train,eval,compare,gradcheck,weights}``.

Exit codes: 0 success, 1 I/O or unreadable input, 2 usage or validation
error, 3 numeric failure during training, 4 a ``--gate`` was not met.

Every command accepts ``--config run.json``, a "condhead-config-v1" document
with optional "bench", "train" and "head" sections. Flags override the file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import autodiff as ad
from .errors import CondHeadError, ParseError, TrainingError
from .evaluation import compare_reports, evaluate, evaluate_gate, format_comparison, format_report, parse_gate
from .evaluation import weight_report
from .heads import CondHeadConfig, canonical_variant
from .models import load_checkpoint, param_checksum, save_checkpoint
from .synthbench import BenchmarkSpec, gen_dataset, load_dataset, save_dataset
from .train import TrainConfig, train
from .verify import TOLERANCE, run_suite

CONFIG_FORMAT = "condhead-config-v1"
EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC, EXIT_GATE = 0, 1, 2, 3, 4

log = logging.getLogger("condhead")

# flag dest -> config key, one table per config section
_BENCH_FLAGS = {
    "n_base": "n_base", "n_novel": "n_novel", "rho": "rho", "samples_per_class": "samples_per_class",
    "eval_per_class": "eval_per_class", "feat_dim": "feat_dim", "embed_dim": "embed_dim",
    "mask_size": "mask_size",
}
_TRAIN_FLAGS = {
    "variant": "variant", "iterations": "iterations", "batch_size": "batch_size", "lr": "lr",
    "gate_lr_scale": "gate_lr_scale",
}
_HEAD_FLAGS = {
    "experts": "n_experts", "lam": "lam", "mu": "mu", "tau_start": "tau_start", "tau_end": "tau_end",
    "anneal_iters": "anneal_iters", "box_hidden": "box_hidden", "mask_hidden": "mask_hidden",
    "gen_hidden": "gen_hidden",
}


class UsageError(CondHeadError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
def load_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != CONFIG_FORMAT:
        raise UsageError(f"config {path} must be a JSON object with format {CONFIG_FORMAT!r}")
    unknown = set(doc) - {"format", "bench", "train", "head"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return doc


def effective_config(args) -> dict:
    """Merge config file and flags into validated bench/train/head sections."""
    doc = load_config(args.config) if getattr(args, "config", None) else {}
    bench = dict(doc.get("bench", {}))
    trn = dict(doc.get("train", {}))
    head = dict(doc.get("head", {}))
    for flags, section in ((_BENCH_FLAGS, bench), (_TRAIN_FLAGS, trn), (_HEAD_FLAGS, head)):
        for dest, key in flags.items():
            value = getattr(args, dest, None)
            if value is not None:
                section[key] = value
    if getattr(args, "seed", None) is not None:
        bench["seed"] = args.seed
        trn["seed"] = args.seed
    if "iterations" in trn and "anneal_iters" not in head:
        # anneal over the first quarter of training unless told otherwise
        head["anneal_iters"] = max(1, int(trn["iterations"]) // 4)
    spec = BenchmarkSpec.from_dict(bench)
    for key in ("feat_dim", "embed_dim", "mask_size", "mask_channels"):
        # head input dims always follow the benchmark
        head[key] = getattr(spec, key)
    head_cfg = CondHeadConfig.from_dict(head)
    train_cfg = TrainConfig.from_dict({**trn, "head": head_cfg})
    return {"format": CONFIG_FORMAT, "bench": spec.to_dict(), "train": train_cfg.to_dict()}


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def _file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def _load_data(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return load_dataset(path)


def _load_ckpt(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_gen(args) -> int:
    cfg = effective_config(args)
    spec = BenchmarkSpec.from_dict(cfg["bench"])
    ds = gen_dataset(spec)
    checksum = save_dataset(ds, args.out)
    print(f"wrote {args.out}: {len(ds.train)} train / {len(ds.eval)} eval records, "
          f"{spec.n_base} base / {spec.n_novel} novel classes, rho={spec.rho}")
    print(f"checksum {checksum}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = effective_config(args)
    tcfg = _train_config(cfg)
    ds = _load_data(args.data)
    model = state = None
    if args.resume:
        model, state = _load_ckpt(args.resume)
        if model.variant != tcfg.variant or model.seed != tcfg.seed:
            raise UsageError(f"--resume checkpoint is {model.variant} seed {model.seed}, "
                             f"run asks for {tcfg.variant} seed {tcfg.seed}")
        if state is None:
            raise UsageError(f"--resume checkpoint {args.resume} holds no optimizer state")
    model, report, state = train(ds, tcfg, model=model, state=state, stop_at=args.stop_at)
    provenance = {"config": cfg, "data_checksum": _file_sha(args.data)}
    save_checkpoint(args.out, model, train_state=state, provenance=provenance)
    if args.report:
        doc = report.to_dict()
        doc["provenance"] = provenance
        _write_json(args.report, doc)
    final = report.losses[-1] if report.losses else float("nan")
    print(f"trained {model.variant} for {state['iteration']} iterations, final loss {final:.6f}, "
          f"tau {report.final_tau:.3f}, checksum {report.checksum}")
    return EXIT_OK


def _eval_one(path, ds, variant=None):
    model, _ = _load_ckpt(path)
    report = evaluate(model, ds, variant=canonical_variant(variant) if variant else None)
    report.provenance = {"checkpoint": Path(path).name, "checkpoint_checksum": param_checksum(model)}
    return report


def cmd_eval(args) -> int:
    cfg = effective_config(args)
    ds = _load_data(args.data)
    report = _eval_one(args.ckpt, ds, args.variant)
    report.provenance.update(config=cfg, data_checksum=_file_sha(args.data))
    print(format_report(report))
    if args.out:
        report.save(args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = effective_config(args)
    gates = list(args.gate or [])
    for g in gates:
        parse_gate(g)
    ds = _load_data(args.data)
    reports = [_eval_one(p, ds) for p in args.ckpt]
    cmp = compare_reports(reports, baseline=canonical_variant(args.baseline))
    for split in ("novel", "base"):
        print(format_comparison(cmp, split))
        print()
    failed = 0
    gate_results = []
    for g in gates:
        ok, lhs, rhs = evaluate_gate(g, cmp)
        gate_results.append({"gate": g, "passed": ok, "lhs": lhs, "rhs": rhs})
        print(f"{'PASS' if ok else 'FAIL'} {g}  (lhs {lhs:.6f}, rhs {rhs:.6f})")
        failed += not ok
    if args.out:
        doc = cmp.to_dict()
        doc.update(gates=gate_results, provenance={"config": cfg, "data_checksum": _file_sha(args.data)})
        _write_json(args.out, doc)
    return EXIT_GATE if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = effective_config(args)
    flip = args.inject_sign_flip
    if flip:
        ad._SIGN_FLIPS.add(flip)
    try:
        results = run_suite(args.seed if args.seed is not None else 0)
    finally:
        ad._SIGN_FLIPS.discard(flip)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name.ljust(width)}  max rel err {r.error:.3e}  ({r.seconds:.2f}s)")
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} paths below {TOLERANCE:g}")
    if args.out:
        _write_json(args.out, {"format": "condhead-gradcheck-v1", "config": cfg, "tolerance": TOLERANCE,
                               "results": [{"name": r.name, "error": r.error, "passed": r.passed}
                                           for r in results]})
    return EXIT_NUMERIC if n_fail else EXIT_OK


def cmd_weights(args) -> int:
    cfg = effective_config(args)
    ds = _load_data(args.data)
    model, _ = _load_ckpt(args.ckpt)
    wr = weight_report(model, ds.embeddings)
    for cid, bw, mw in zip(wr.categories, wr.box, wr.mask):
        fam = ds.classes[cid].family
        print(f"{cid:3d} {fam:9s} box [{' '.join(f'{x:.3f}' for x in bw)}]  mask [{' '.join(f'{x:.3f}' for x in mw)}]")
    if args.out:
        doc = wr.to_dict()
        doc["families"] = [ds.classes[c].family for c in wr.categories]
        doc["provenance"] = {"config": cfg, "data_checksum": _file_sha(args.data)}
        _write_json(args.out, doc)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config (format condhead-config-v1)")
    p.add_argument("--seed", type=int, help="master seed for data and training")


def _bench_flags(p):
    p.add_argument("--n-base", type=int, dest="n_base")
    p.add_argument("--n-novel", type=int, dest="n_novel")
    p.add_argument("--rho", type=float, help="embedding alignment in [0, 1]")
    p.add_argument("--samples-per-class", type=int, dest="samples_per_class")
    p.add_argument("--eval-per-class", type=int, dest="eval_per_class")
    p.add_argument("--feat-dim", type=int, dest="feat_dim")
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--mask-size", type=int, dest="mask_size")


def _train_flags(p):
    p.add_argument("--variant", choices=["agnostic", "class_agnostic", "classwise", "condhead"])
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--gate-lr-scale", type=float, dest="gate_lr_scale")
    p.add_argument("--experts", type=int, help="number of expert heads H")
    p.add_argument("--lam", type=float, help="box blend weight")
    p.add_argument("--mu", type=float, help="mask blend weight")
    p.add_argument("--tau-start", type=float, dest="tau_start")
    p.add_argument("--tau-end", type=float, dest="tau_end")
    p.add_argument("--anneal-iters", type=int, dest="anneal_iters")
    p.add_argument("--box-hidden", type=int, dest="box_hidden")
    p.add_argument("--mask-hidden", type=int, dest="mask_hidden")
    p.add_argument("--gen-hidden", type=int, dest="gen_hidden")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condhead", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a benchmark dataset")
    _common(p)
    _bench_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one head variant")
    _common(p)
    _train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="training report path")
    p.add_argument("--resume", help="continue from a checkpoint that holds optimizer state")
    p.add_argument("--stop-at", type=int, dest="stop_at", help="stop after this many iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--variant", choices=["agnostic", "class_agnostic", "classwise", "condhead"],
                   help="fail unless the checkpoint holds this variant")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="compare checkpoints over seeds, optionally gated")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, nargs="+")
    p.add_argument("--baseline", default="agnostic")
    p.add_argument("--gate", action="append",
                   help='threshold such as "condhead.novel.box_iou - agnostic.novel.box_iou >= 0.02"')
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient path")
    _common(p)
    p.add_argument("--out")
    p.add_argument("--inject-sign-flip", dest="inject_sign_flip", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("weights", help="aggregation weights of a CondHead checkpoint")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_weights)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CondHeadError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
