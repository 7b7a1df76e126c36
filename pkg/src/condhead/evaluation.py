"""Evaluation metrics, multi-seed comparisons and aggregation-weight reports.

Desk-scale "AP@0.5" is a per-proposal hit rate: the fraction of samples whose
refined box (or thresholded mask) reaches IoU 0.5 with the ground truth. There
are no classification scores, so nothing is ranked.
"""

from __future__ import annotations

import ast
import hashlib
import json
import math
import operator
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .geometry import decode_deltas_array, iou_array
from .heads import cosine_matrix, flop_count, generate_weights
from .synthbench import Dataset, SampleRecord, stack_records

EVAL_FORMAT = "condhead-eval-v1"
COMPARE_FORMAT = "condhead-compare-v1"
WEIGHTS_FORMAT = "condhead-weights-v1"
METRICS = ("box_iou", "box_ap50", "mask_iou", "mask_ap50")
SPLITS = ("base", "novel", "all")
_CHUNK = 256


# ---------------------------------------------------------------------------
# per-sample metrics
# ---------------------------------------------------------------------------
def _record_key(r: SampleRecord) -> tuple:
    return (r.c, tuple(r.p), tuple(r.b), r.f.tobytes(), r.v.tobytes(), r.m.tobytes())


def canonical_order(records: list[SampleRecord]) -> list[SampleRecord]:
    """Records sorted by content, so any permutation of the input maps to one order."""
    return sorted(records, key=_record_key)


def eval_fingerprint(records: list[SampleRecord]) -> str:
    """Order-independent sha256 of an eval set's content."""
    h = hashlib.sha256()
    for r in canonical_order(records):
        for part in _record_key(r):
            h.update(repr(part).encode() if not isinstance(part, bytes) else part)
    return h.hexdigest()


def _tau(model) -> float:
    cfg = getattr(model, "cfg", None)
    return cfg.tau_end if cfg is not None else 1.0


def check_compatible(model, dataset: Dataset) -> None:
    """Raise ConfigurationError if the model's dimensions do not fit the benchmark."""
    cfg = getattr(model, "cfg", None)
    if cfg is None:
        return
    spec = dataset.spec
    pairs = [("feat_dim", cfg.feat_dim, spec.feat_dim), ("embed_dim", cfg.embed_dim, spec.embed_dim),
             ("mask_channels", cfg.mask_channels, spec.mask_channels),
             ("mask_size", cfg.mask_size, spec.mask_size)]
    bad = [f"{name}: model {a}, data {b}" for name, a, b in pairs if a != b]
    if bad:
        raise ConfigurationError("model does not match dataset (" + "; ".join(bad) + ")")


def predict(model, records: list[SampleRecord], embeddings: np.ndarray):
    """Box deltas (N,4) and mask logits (N,S,S) at the final temperature, in input order."""
    tau = _tau(model)
    deltas, logits = [], []
    for lo in range(0, len(records), _CHUNK):
        batch = stack_records(records[lo:lo + _CHUNK])
        d, m = model.forward(batch.cats, batch.f, batch.v, embeddings, tau)
        deltas.append(np.array(d.data))
        logits.append(np.array(m.data))
    return np.concatenate(deltas), np.concatenate(logits)


def sample_metrics(model, records: list[SampleRecord], embeddings: np.ndarray) -> dict[str, np.ndarray]:
    """Box IoU and mask IoU of every record (in input order).

    Predictions are computed in canonical order so each sample's result does
    not depend on which other samples share its batch position.
    """
    order = sorted(range(len(records)), key=lambda i: _record_key(records[i]))
    ordered = [records[i] for i in order]
    deltas, logits = predict(model, ordered, embeddings)
    batch = stack_records(ordered)
    boxes = decode_deltas_array(batch.p, deltas)
    box_iou = iou_array(boxes, batch.b)
    pred = logits > 0.0
    target = batch.m > 0.5
    inter = np.count_nonzero(pred & target, axis=(1, 2))
    union = np.count_nonzero(pred | target, axis=(1, 2))
    mask_iou = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    inv = np.empty(len(order), dtype=np.intp)
    inv[order] = np.arange(len(order))
    return {"box_iou": box_iou[inv], "mask_iou": mask_iou[inv]}


def _summary(box_iou: np.ndarray, mask_iou: np.ndarray) -> dict:
    n = len(box_iou)
    if n == 0:
        return {"n": 0, **{k: float("nan") for k in METRICS}}
    # fsum is exact up to the final rounding, hence independent of order.
    return {
        "n": n,
        "box_iou": math.fsum(box_iou.tolist()) / n,
        "box_ap50": int(np.count_nonzero(box_iou >= 0.5)) / n,
        "mask_iou": math.fsum(mask_iou.tolist()) / n,
        "mask_ap50": int(np.count_nonzero(mask_iou >= 0.5)) / n,
    }


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------
@dataclass
class EvalReport:
    variant: str
    seed: int | None
    splits: dict
    per_category: list
    flops: dict | None
    fingerprint: str
    provenance: dict = field(default_factory=dict)

    def metric(self, split: str, name: str) -> float:
        return self.splits[split][name]

    def to_dict(self) -> dict:
        return {"format": EVAL_FORMAT, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = {k: v for k, v in d.items() if k != "format"}
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def evaluate(model, dataset: Dataset, records: list[SampleRecord] | None = None,
             variant: str | None = None) -> EvalReport:
    """Per-split and per-category box/mask quality of ``model`` on the eval set.

    ``variant``, if given, is the variant the caller expects; a model of any
    other variant is rejected.
    """
    records = dataset.eval if records is None else records
    if not records:
        raise ContractViolation("evaluate needs a non-empty eval set")
    model_variant = getattr(model, "variant", "custom")
    if variant is not None and variant != model_variant:
        raise ConfigurationError(f"expected a {variant} model, checkpoint holds {model_variant}")
    check_compatible(model, dataset)
    per = sample_metrics(model, records, dataset.embeddings)
    cats = np.array([r.c for r in records])
    split_of = np.array([dataset.classes[c].split for c in cats.tolist()])
    splits = {}
    for split in SPLITS:
        sel = np.ones(len(records), bool) if split == "all" else split_of == split
        splits[split] = _summary(per["box_iou"][sel], per["mask_iou"][sel])
    per_category = []
    for cid in sorted(set(cats.tolist())):
        sel = cats == cid
        cls = dataset.classes[cid]
        per_category.append({"category": cid, "split": cls.split, "family": cls.family,
                             **_summary(per["box_iou"][sel], per["mask_iou"][sel])})
    cfg = getattr(model, "cfg", None)
    flops = None
    if cfg is not None:
        flops = flop_count(cfg, n_rois=len(records), n_categories=len(set(cats.tolist())))
    return EvalReport(variant=model_variant, seed=getattr(model, "seed", None), splits=splits,
                      per_category=per_category, flops=flops, fingerprint=eval_fingerprint(records))


def format_report(report: EvalReport) -> str:
    """Aligned plain-text table of the per-split metrics."""
    rows = [["split", "n", *METRICS]]
    for split in SPLITS:
        s = report.splits[split]
        rows.append([split, str(s["n"]), *(f"{s[m]:.4f}" for m in METRICS)])
    return f"variant: {report.variant}\n" + _table(rows)


def _table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------
def _mean_std(values: list[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    mean = math.fsum(a.tolist()) / len(a)
    std = float(np.std(a, ddof=1)) if len(a) > 1 else 0.0
    return mean, std


@dataclass
class Comparison:
    """Per-variant mean and stddev over seeds, plus deltas against a baseline.

    ``deltas[candidate][split][metric]`` holds ``mean`` (candidate mean minus
    baseline mean) and ``std`` (stddev of seed-paired differences, or None
    when the two variants were not run on the same seeds).
    """
    baseline: str
    seeds: dict
    metrics: dict
    deltas: dict
    fingerprint: str

    def to_dict(self) -> dict:
        return {"format": COMPARE_FORMAT, **asdict(self)}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    def value(self, variant: str, split: str, metric: str) -> float:
        try:
            return self.metrics[variant][split][metric]["mean"]
        except KeyError:
            raise ConfigurationError(f"no metric {variant}.{split}.{metric} in comparison") from None


def compare_reports(reports: list[EvalReport], baseline: str = "agnostic") -> Comparison:
    """Group reports by variant and summarise them; all must share one eval set."""
    if not reports:
        raise ContractViolation("compare needs at least one report")
    prints = {r.fingerprint for r in reports}
    if len(prints) != 1:
        raise ContractViolation("reports were computed on different eval sets")
    by_variant: dict[str, list[EvalReport]] = {}
    for r in reports:
        by_variant.setdefault(r.variant, []).append(r)
    if baseline not in by_variant:
        baseline = sorted(by_variant)[0]
    metrics = {}
    for v, rs in sorted(by_variant.items()):
        metrics[v] = {s: {m: dict(zip(("mean", "std"), _mean_std([r.metric(s, m) for r in rs])))
                          for m in METRICS} for s in SPLITS}
    base_rs = by_variant[baseline]
    base_seeds = [r.seed for r in base_rs]
    deltas = {}
    for v, rs in sorted(by_variant.items()):
        seeds = [r.seed for r in rs]
        paired = sorted(seeds) == sorted(base_seeds) and len(set(seeds)) == len(seeds)
        deltas[v] = {}
        for s in SPLITS:
            deltas[v][s] = {}
            for m in METRICS:
                mean = metrics[v][s][m]["mean"] - metrics[baseline][s][m]["mean"]
                std = None
                if paired:
                    base_by_seed = {r.seed: r.metric(s, m) for r in base_rs}
                    diffs = [r.metric(s, m) - base_by_seed[r.seed] for r in rs]
                    std = _mean_std(diffs)[1]
                deltas[v][s][m] = {"mean": mean, "std": std}
    return Comparison(baseline=baseline, seeds={v: [r.seed for r in rs] for v, rs in sorted(by_variant.items())},
                      metrics=metrics, deltas=deltas, fingerprint=prints.pop())


def compare(models: list, dataset: Dataset, baseline: str = "agnostic") -> Comparison:
    """Evaluate every model on the dataset's eval set and compare them."""
    return compare_reports([evaluate(m, dataset) for m in models], baseline=baseline)


def format_comparison(cmp: Comparison, split: str = "novel") -> str:
    rows = [["variant", "seeds", *METRICS, *(f"d_{m}" for m in METRICS)]]
    for v, per_split in cmp.metrics.items():
        s = per_split[split]
        d = cmp.deltas[v][split]
        rows.append([v, str(len(cmp.seeds[v])),
                     *(f"{s[m]['mean']:.4f}±{s[m]['std']:.4f}" for m in METRICS),
                     *(f"{d[m]['mean']:+.4f}" for m in METRICS)])
    return f"split: {split}  baseline: {cmp.baseline}\n" + _table(rows)


# ---------------------------------------------------------------------------
# gates
# ---------------------------------------------------------------------------
_CMP = {ast.GtE: operator.ge, ast.LtE: operator.le, ast.Gt: operator.gt, ast.Lt: operator.lt,
        ast.Eq: operator.eq}
_BIN = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul}


def _ref(node) -> str:
    parts = []
    while isinstance(node, ast.Attribute):
        parts.append(node.attr)
        node = node.value
    if not isinstance(node, ast.Name):
        raise ConfigurationError("gate references look like variant.split.metric")
    parts.append(node.id)
    return ".".join(reversed(parts))


def parse_gate(expr: str) -> ast.Compare:
    """Check a gate such as ``condhead.novel.box_iou - agnostic.novel.box_iou >= 0.02``."""
    try:
        tree = ast.parse(expr.strip(), mode="eval").body
    except SyntaxError as exc:
        raise ConfigurationError(f"cannot parse gate {expr!r}: {exc.msg}") from None
    if not (isinstance(tree, ast.Compare) and len(tree.ops) == 1 and type(tree.ops[0]) in _CMP):
        raise ConfigurationError(f"gate {expr!r} must be a single comparison")

    def check(node):
        if isinstance(node, ast.BinOp) and type(node.op) in _BIN:
            check(node.left)
            check(node.right)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            check(node.operand)
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            pass
        elif isinstance(node, ast.Attribute):
            if len(_ref(node).split(".")) != 3:
                raise ConfigurationError(f"gate reference {_ref(node)!r} must be variant.split.metric")
        else:
            raise ConfigurationError(f"unsupported element in gate {expr!r}")

    check(tree.left)
    check(tree.comparators[0])
    return tree


def evaluate_gate(expr: str, cmp: Comparison) -> tuple[bool, float, float]:
    """Returns ``(passed, lhs, rhs)`` with references resolved to seed means."""
    tree = parse_gate(expr)

    def value(node):
        if isinstance(node, ast.BinOp):
            return _BIN[type(node.op)](value(node.left), value(node.right))
        if isinstance(node, ast.UnaryOp):
            return -value(node.operand)
        if isinstance(node, ast.Constant):
            return float(node.value)
        variant, split, metric = _ref(node).split(".")
        return cmp.value(variant, split, metric)

    lhs, rhs = value(tree.left), value(tree.comparators[0])
    return bool(_CMP[type(tree.ops[0])](lhs, rhs)), lhs, rhs


# ---------------------------------------------------------------------------
# aggregation weights
# ---------------------------------------------------------------------------
@dataclass
class WeightReport:
    categories: list[int]
    tau: float
    box: np.ndarray
    mask: np.ndarray
    box_cosine: np.ndarray
    mask_cosine: np.ndarray

    def to_dict(self) -> dict:
        return {"format": WEIGHTS_FORMAT, "categories": self.categories, "tau": self.tau,
                "box": self.box.tolist(), "mask": self.mask.tolist(),
                "box_cosine": self.box_cosine.tolist(), "mask_cosine": self.mask_cosine.tolist()}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def weight_report(model, embeddings: np.ndarray, categories=None) -> WeightReport:
    """Aggregation weights at ``tau_end`` for each category, and their cosines."""
    if getattr(model, "variant", None) != "condhead":
        raise ConfigurationError(
            f"weight_report needs a condhead model, got {getattr(model, 'variant', type(model).__name__)}")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    categories = list(range(len(embeddings))) if categories is None else [int(c) for c in categories]
    s = embeddings[categories]
    tau = model.cfg.tau_end
    box = np.array(generate_weights(model.box_bank, s, tau).data).reshape(len(categories), -1)
    mask = np.array(generate_weights(model.mask_bank, s, tau).data).reshape(len(categories), -1)
    return WeightReport(categories, tau, box, mask, cosine_matrix(box, box), cosine_matrix(mask, mask))


def weight_entropy(w: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each row of a weight matrix."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    safe = np.where(w > 0, w, 1.0)
    return -(w * np.log(safe)).sum(axis=1)


def family_cosines(cos: np.ndarray, families: list[str]) -> tuple[float, float]:
    """Mean off-diagonal cosine over same-family pairs and over cross-family pairs."""
    within, cross = [], []
    n = len(families)
    for i in range(n):
        for j in range(i + 1, n):
            (within if families[i] == families[j] else cross).append(float(cos[i, j]))
    mean = lambda xs: math.fsum(xs) / len(xs) if xs else float("nan")  # noqa: E731
    return mean(within), mean(cross)
