"""Optimization of the three head variants on base-category data."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractViolation, TrainingError
from .heads import CondHeadConfig, anneal_tau, canonical_variant
from .models import ClassWiseModel, build_model, param_checksum
from .synthbench import Batch, Dataset, stack_records

REPORT_FORMAT = "condhead-report-v1"


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    variant: str = "condhead"
    head: CondHeadConfig = field(default_factory=CondHeadConfig)
    box_weight: float = 1.0
    mask_weight: float = 1.0
    gate_lr_scale: float = 1.0

    def __post_init__(self):
        if isinstance(self.head, dict):
            self.head = CondHeadConfig.from_dict(self.head)
        self.validate()

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if not self.gate_lr_scale > 0:
            raise ConfigurationError(f"gate_lr_scale must be positive, got {self.gate_lr_scale}")
        self.variant = canonical_variant(self.variant)
        self.head.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head"] = self.head.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    losses: list[float]
    box_losses: list[float]
    mask_losses: list[float]
    final_tau: float
    wall_time: float
    checksum: str
    variant: str
    config: dict

    def to_dict(self) -> dict:
        return {"format": REPORT_FORMAT, **asdict(self)}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def head_config_for(dataset: Dataset, head: CondHeadConfig) -> CondHeadConfig:
    """Copy of ``head`` with data-dependent dimensions taken from the benchmark."""
    spec = dataset.spec
    d = head.to_dict()
    d.update(embed_dim=spec.embed_dim, feat_dim=spec.feat_dim,
             mask_channels=spec.mask_channels, mask_size=spec.mask_size)
    return CondHeadConfig.from_dict(d)


def compute_loss(model, batch: Batch, iteration: int, embeddings, base_ids,
                 box_weight: float = 1.0, mask_weight: float = 1.0):
    """Smooth-L1 box loss plus mask BCE, each averaged over the batch.

    Returns ``(loss, {"box": float, "mask": float, "tau": float})``.
    """
    if len(batch) == 0:
        raise ContractViolation("compute_loss needs a non-empty batch")
    allowed = set(int(i) for i in base_ids)
    bad = sorted(set(batch.cats.tolist()) - allowed)
    if bad:
        raise ContractViolation(f"training batch contains non-base categories {bad}")
    tau = anneal_tau(model.cfg, iteration)
    deltas, logits = model.forward(batch.cats, batch.f, batch.v, embeddings, tau)
    box = ad.smooth_l1(deltas, batch.deltas)
    mask = ad.bce_logits(logits, batch.m)
    loss = box_weight * box + mask_weight * mask
    return loss, {"box": box.item(), "mask": mask.item(), "tau": tau}


def batch_indices(cats: np.ndarray, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Training rows for one iteration, a pure function of (seed, iteration).

    Rows are grouped by category so conditioning runs once per category.
    """
    rng = np.random.default_rng([seed, 9001, iteration])
    idx = rng.choice(len(cats), size=min(batch_size, len(cats)), replace=False)
    return idx[np.lexsort((idx, cats[idx]))]


def classwise_batch_indices(rows_by_cat: list[np.ndarray], batch_size: int, seed: int,
                            iteration: int) -> np.ndarray:
    """``batch_size`` rows split as evenly as possible across base categories.

    The extra rows of an uneven split rotate across categories with the
    iteration so every head gets the same share over time.
    """
    rng = np.random.default_rng([seed, 9002, iteration])
    k = len(rows_by_cat)
    share, extra = divmod(batch_size, k)
    parts = []
    for j, rows in enumerate(rows_by_cat):
        n = share + (1 if (j - iteration) % k < extra else 0)
        n = max(n, 1)
        parts.append(np.sort(rng.choice(rows, size=n, replace=False)))
    return np.concatenate(parts)


def learning_rates(params: dict, cfg: TrainConfig) -> dict[str, float]:
    """Per-parameter Adam rates; aggregation-weight generators use ``lr * gate_lr_scale``.

    Experts only diverge once routing differs between categories, so a slow
    gate (scale well below 1) leaves the weights near uniform for the whole run.
    """
    return {k: cfg.lr * cfg.gate_lr_scale if ".gate." in k else cfg.lr for k in params}


def _run(model, data: Batch, dataset: Dataset, cfg: TrainConfig, index_fn, state, stop_at):
    params = model.params
    rates = learning_rates(params, cfg)
    if state is None:
        state = {"iteration": 0, "adam": ad.init_adam_state(params),
                 "losses": [], "box_losses": [], "mask_losses": []}
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    base_ids = dataset.base_ids
    start = time.perf_counter()
    for it in range(state["iteration"], end):
        batch = data.subset(index_fn(it))
        loss, parts = compute_loss(model, batch, it, dataset.embeddings, base_ids,
                                   cfg.box_weight, cfg.mask_weight)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError("non-finite loss", iteration=it)
        for p in params.values():
            p.zero_grad()
        loss.backward()
        try:
            ad.adam_step(params, {k: p.grad for k, p in params.items()}, state["adam"], lr=rates)
        except TrainingError as exc:
            raise TrainingError("non-finite gradient", iteration=it, param=exc.param) from None
        state["losses"].append(value)
        state["box_losses"].append(parts["box"])
        state["mask_losses"].append(parts["mask"])
        state["iteration"] = it + 1
    for p in params.values():
        p.zero_grad()
    wall = time.perf_counter() - start
    report = TrainReport(
        losses=list(state["losses"]), box_losses=list(state["box_losses"]),
        mask_losses=list(state["mask_losses"]),
        final_tau=anneal_tau(model.cfg, max(state["iteration"] - 1, 0)),
        wall_time=wall, checksum=param_checksum(model), variant=model.variant, config=cfg.to_dict(),
    )
    return model, report, state


def train(dataset: Dataset, cfg: TrainConfig, model=None, state=None, stop_at: int | None = None):
    """Adam on :func:`compute_loss` with the annealed temperature.

    ``model``/``state`` resume a previous run (as returned, or loaded from a
    checkpoint); ``stop_at`` ends early at that iteration so a run can be
    split. Returns ``(model, report, state)``; ``report.losses`` has one
    entry per completed iteration.
    """
    cfg.validate()
    if cfg.variant == "classwise":
        return train_classwise(dataset, cfg, model=model, state=state, stop_at=stop_at)
    if not dataset.train:
        raise ConfigurationError("dataset has no training samples")
    if model is None:
        model = build_model(cfg.variant, head_config_for(dataset, cfg.head), cfg.seed)
    data = stack_records(dataset.train)
    return _run(model, data, dataset, cfg,
                lambda it: batch_indices(data.cats, cfg.batch_size, cfg.seed, it), state, stop_at)


def train_classwise(dataset: Dataset, cfg: TrainConfig, model=None, state=None, stop_at=None):
    """One head pair per base category, each fed only its own category's samples.

    All heads advance together: every iteration draws ``batch_size`` samples
    split evenly over the base categories, so total compute matches the other
    variants. Heads are separate parameter rows and each row only receives
    gradient from regions routed to it.
    """
    data = stack_records(dataset.train)
    base_ids = dataset.base_ids
    rows_by_cat = [np.flatnonzero(data.cats == c) for c in base_ids]
    short = [c for c, rows in zip(base_ids, rows_by_cat) if len(rows) < cfg.batch_size]
    if short:
        raise ConfigurationError(
            f"categories {short} have fewer than batch_size={cfg.batch_size} training samples")
    if model is None:
        model = ClassWiseModel(head_config_for(dataset, cfg.head), base_ids,
                               dataset.embeddings[base_ids], cfg.seed)
    return _run(model, data, dataset, cfg,
                lambda it: classwise_batch_indices(rows_by_cat, cfg.batch_size, cfg.seed, it),
                state, stop_at)
