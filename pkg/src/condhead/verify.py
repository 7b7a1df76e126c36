"""Finite-difference verification of every differentiable path in the heads.

Each check builds a small random instance, reduces the output to a scalar
through a fixed random projection (so gradients are O(1) and sign errors
cannot hide under the relative-error floor) and compares reverse-mode
gradients with central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .heads import (
    CondHeadConfig,
    ExpertBank,
    GeneratedHead,
    aggregate_parameters,
    apply_box_expert,
    apply_mask_expert,
    box_expert_layout,
    forward_box,
    forward_mask,
    generate_parameters,
    generate_weights,
    light_box_layout,
    light_mask_layout,
    mask_expert_layout,
)
from .models import ClassAgnosticModel, ClassWiseModel, CondHeadModel
from .synthbench import Batch
from .geometry import encode_deltas_array

TOLERANCE = 1e-4
MAX_COORDS = 24


def tiny_config(**overrides) -> CondHeadConfig:
    base = dict(n_experts=3, embed_dim=5, feat_dim=6, mask_channels=4, mask_size=5,
                box_hidden=7, mask_hidden=3, gen_hidden=6, lam=0.6, mu=0.6, anneal_iters=4)
    base.update(overrides)
    return CondHeadConfig(**base)


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _project(out: Tensor, rng: np.random.Generator) -> Tensor:
    return ad.tsum(out * Tensor(rng.normal(size=out.shape)))


def _unit_rows(rng, k, e):
    s = rng.normal(size=(k, e))
    return s / np.linalg.norm(s, axis=1, keepdims=True)


def _tiny_batch(rng, cfg: CondHeadConfig, cats) -> Batch:
    n = len(cats)
    p = np.tile([0.2, 0.2, 0.6, 0.7], (n, 1)) + rng.uniform(-0.05, 0.05, (n, 4))
    b = p + rng.uniform(-0.05, 0.05, (n, 4))
    return Batch(
        cats=np.asarray(cats, dtype=np.intp), p=p, b=b,
        f=rng.normal(size=(n, cfg.feat_dim)),
        v=rng.normal(size=(n, cfg.mask_channels, cfg.mask_size, cfg.mask_size)),
        m=(rng.random((n, cfg.mask_size, cfg.mask_size)) < 0.4).astype(np.float64),
    )


def _loss(model, batch: Batch, embeddings, tau):
    deltas, logits = model.forward(batch.cats, batch.f, batch.v, embeddings, tau)
    return ad.smooth_l1(deltas, encode_deltas_array(batch.p, batch.b)) + ad.bce_logits(logits, batch.m)


def _checks(seed: int) -> list[tuple[str, Callable[[np.random.Generator], float]]]:
    def gate(rng):
        cfg = tiny_config()
        bank = ExpertBank(box_expert_layout(cfg), cfg.n_experts, cfg.embed_dim, cfg.gen_hidden, rng, "box")
        s = Tensor(_unit_rows(rng, 2, cfg.embed_dim), requires_grad=True)
        proj = rng.normal(size=(2, cfg.n_experts))
        inputs = [s, *bank.gate.values()]
        return ad.gradcheck(lambda *a: ad.tsum(generate_weights(bank, s, 3.0) * Tensor(proj)), inputs,
                            max_coords=MAX_COORDS, rng=rng)

    def softmax(rng):
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        proj = rng.normal(size=(3, 5))
        return ad.gradcheck(lambda x: ad.tsum(ad.softmax_temp(x, 0.7) * Tensor(proj)), [x])

    def aggregate(rng):
        cfg = tiny_config()
        bank = ExpertBank(box_expert_layout(cfg), cfg.n_experts, cfg.embed_dim, cfg.gen_hidden, rng, "box")
        w = Tensor(rng.dirichlet(np.ones(cfg.n_experts), size=2), requires_grad=True)
        proj = rng.normal(size=(2, bank.layout.size))
        return ad.gradcheck(lambda w, e: ad.tsum(aggregate_parameters(bank, w) * Tensor(proj)),
                            [w, bank.experts], max_coords=MAX_COORDS, rng=rng)

    def generate(rng):
        cfg = tiny_config()
        gen = GeneratedHead(light_box_layout(cfg), cfg.embed_dim, cfg.gen_hidden, rng, "box")
        s = Tensor(_unit_rows(rng, 2, cfg.embed_dim), requires_grad=True)
        proj = rng.normal(size=(2, gen.layout.size))
        return ad.gradcheck(lambda *a: ad.tsum(generate_parameters(gen, s) * Tensor(proj)),
                            [s, *gen.net.values()], max_coords=MAX_COORDS, rng=rng)

    def box_expert(rng):
        cfg = tiny_config()
        layout = box_expert_layout(cfg)
        theta = Tensor(layout.init(rng) + 0.1 * rng.normal(size=layout.size), requires_grad=True)
        f = Tensor(rng.normal(size=(4, cfg.feat_dim)), requires_grad=True)
        proj = rng.normal(size=(4, 4))
        return ad.gradcheck(lambda t, f: ad.tsum(apply_box_expert(layout, t, f) * Tensor(proj)), [theta, f])

    def mask_expert(rng):
        cfg = tiny_config()
        layout = mask_expert_layout(cfg)
        theta = Tensor(np.stack([layout.init(rng) for _ in range(2)]), requires_grad=True)
        v = Tensor(rng.normal(size=(2, cfg.mask_channels, cfg.mask_size, cfg.mask_size)), requires_grad=True)
        proj = rng.normal(size=(2, cfg.mask_size, cfg.mask_size))
        return ad.gradcheck(lambda t, v: ad.tsum(apply_mask_expert(layout, t, v) * Tensor(proj)), [theta, v],
                            max_coords=MAX_COORDS * 2, rng=rng)

    def blended_box(rng):
        cfg = tiny_config()
        bank = ExpertBank(box_expert_layout(cfg), cfg.n_experts, cfg.embed_dim, cfg.gen_hidden, rng, "box")
        gen = GeneratedHead(light_box_layout(cfg), cfg.embed_dim, cfg.gen_hidden, rng, "box")
        s = Tensor(_unit_rows(rng, 2, cfg.embed_dim), requires_grad=True)
        f = Tensor(rng.normal(size=(3, cfg.feat_dim)))
        index = np.array([0, 1, 1])
        proj = rng.normal(size=(3, 4))
        inputs = [s, *bank.parameters().values(), *gen.parameters().values()]
        return ad.gradcheck(
            lambda *a: ad.tsum(forward_box(bank, gen, cfg, s, f, tau=2.5, index=index) * Tensor(proj)),
            inputs, max_coords=MAX_COORDS, rng=rng)

    def blended_mask(rng):
        cfg = tiny_config()
        bank = ExpertBank(mask_expert_layout(cfg), cfg.n_experts, cfg.embed_dim, cfg.gen_hidden, rng, "mask")
        gen = GeneratedHead(light_mask_layout(cfg), cfg.embed_dim, cfg.gen_hidden, rng, "mask")
        s = Tensor(_unit_rows(rng, 2, cfg.embed_dim), requires_grad=True)
        v = Tensor(rng.normal(size=(3, cfg.mask_channels, cfg.mask_size, cfg.mask_size)))
        index = np.array([1, 0, 1])
        proj = rng.normal(size=(3, cfg.mask_size, cfg.mask_size))
        inputs = [s, *bank.parameters().values(), *gen.parameters().values()]
        return ad.gradcheck(
            lambda *a: ad.tsum(forward_mask(bank, gen, cfg, s, v, tau=2.5, index=index) * Tensor(proj)),
            inputs, max_coords=MAX_COORDS, rng=rng)

    def box_loss(rng):
        pred = Tensor(rng.normal(scale=1.5, size=(5, 4)), requires_grad=True)
        target = rng.normal(size=(5, 4))
        return ad.gradcheck(lambda p: 20.0 * ad.smooth_l1(p, target), [pred])

    def mask_loss(rng):
        logits = Tensor(rng.normal(scale=2.0, size=(2, 4, 4)), requires_grad=True)
        target = (rng.random((2, 4, 4)) < 0.5).astype(np.float64)
        return ad.gradcheck(lambda x: 30.0 * ad.bce_logits(x, target), [logits])

    def condhead_objective(rng):
        cfg = tiny_config()
        model = CondHeadModel(cfg, seed=int(rng.integers(1 << 31)))
        emb = _unit_rows(rng, 3, cfg.embed_dim)
        batch = _tiny_batch(rng, cfg, [0, 0, 2, 1])
        return ad.gradcheck(lambda *a: 50.0 * _loss(model, batch, emb, 4.0), list(model.params.values()),
                            max_coords=MAX_COORDS, rng=rng)

    def agnostic_objective(rng):
        cfg = tiny_config()
        model = ClassAgnosticModel(cfg, seed=int(rng.integers(1 << 31)))
        batch = _tiny_batch(rng, cfg, [0, 1, 1])
        return ad.gradcheck(lambda *a: 50.0 * _loss(model, batch, None, 1.0), list(model.params.values()),
                            max_coords=MAX_COORDS * 2, rng=rng)

    def classwise_objective(rng):
        cfg = tiny_config()
        emb = _unit_rows(rng, 3, cfg.embed_dim)
        model = ClassWiseModel(cfg, [0, 1], emb[:2], seed=int(rng.integers(1 << 31)))
        batch = _tiny_batch(rng, cfg, [0, 1, 1])
        return ad.gradcheck(lambda *a: 50.0 * _loss(model, batch, emb, 1.0), list(model.params.values()),
                            max_coords=MAX_COORDS * 2, rng=rng)

    return [
        ("weight generation + temperature softmax", gate),
        ("temperature softmax", softmax),
        ("parameter aggregation", aggregate),
        ("parameter generation", generate),
        ("box expert (2fc)", box_expert),
        ("mask expert (3conv)", mask_expert),
        ("blended box prediction", blended_box),
        ("blended mask prediction", blended_mask),
        ("smooth-L1 box loss", box_loss),
        ("BCE mask loss", mask_loss),
        ("full CondHead objective", condhead_objective),
        ("class-agnostic objective", agnostic_objective),
        ("class-wise objective", classwise_objective),
    ]


def run_suite(seed: int = 0) -> list[CheckResult]:
    """Run every gradient check on instances drawn from ``seed``."""
    results = []
    for i, (name, check) in enumerate(_checks(seed)):
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        err = check(rng)
        results.append(CheckResult(name, float(err), time.perf_counter() - t0))
    return results
