"""Trainable box+mask models for the three compared variants, and checkpoints.

All models share one call signature::

    deltas, logits = model.forward(categories, f, v, embeddings, tau)

where ``categories`` holds one category id per region and ``embeddings`` is
the (n_classes, E) table of semantic embeddings indexed by category id.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ParseError
from .heads import (
    CondHeadConfig,
    ExpertBank,
    GeneratedHead,
    StaticHead,
    apply_box_expert,
    apply_mask_expert,
    box_expert_layout,
    canonical_variant,
    cosine_matrix,
    forward_box,
    forward_mask,
    light_box_layout,
    light_mask_layout,
    mask_expert_layout,
)

CKPT_FORMAT = "condhead-ckpt-v1"


class CondHeadModel:
    variant = "condhead"

    def __init__(self, cfg: CondHeadConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.box_bank = ExpertBank(box_expert_layout(cfg), cfg.n_experts, cfg.embed_dim,
                                   cfg.gen_hidden, rng, "box")
        self.mask_bank = ExpertBank(mask_expert_layout(cfg), cfg.n_experts, cfg.embed_dim,
                                    cfg.gen_hidden, rng, "mask")
        self.box_gen = GeneratedHead(light_box_layout(cfg), cfg.embed_dim, cfg.gen_hidden, rng, "box")
        self.mask_gen = GeneratedHead(light_mask_layout(cfg), cfg.embed_dim, cfg.gen_hidden, rng, "mask")

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.box_bank.parameters(), **self.box_gen.parameters(),
                **self.mask_bank.parameters(), **self.mask_gen.parameters()}

    def forward(self, categories, f, v, embeddings, tau):
        uniq, index = np.unique(np.asarray(categories), return_inverse=True)
        s = Tensor(np.asarray(embeddings)[uniq])
        deltas = forward_box(self.box_bank, self.box_gen, self.cfg, s, f, tau=tau, index=index)
        logits = forward_mask(self.mask_bank, self.mask_gen, self.cfg, s, v, tau=tau, index=index)
        return deltas, logits

    def extra_state(self) -> dict:
        return {}


class ClassAgnosticModel:
    variant = "agnostic"

    def __init__(self, cfg: CondHeadConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.box = StaticHead("box", box_expert_layout(cfg),
                              Tensor(box_expert_layout(cfg).init(rng), requires_grad=True))
        self.mask = StaticHead("mask", mask_expert_layout(cfg),
                               Tensor(mask_expert_layout(cfg).init(rng), requires_grad=True))

    @property
    def params(self) -> dict[str, Tensor]:
        return {"box.head": self.box.theta, "mask.head": self.mask.theta}

    def forward(self, categories, f, v, embeddings, tau):
        return (apply_box_expert(self.box.layout, self.box.theta, f),
                apply_mask_expert(self.mask.layout, self.mask.theta, v))

    def extra_state(self) -> dict:
        return {}


class ClassWiseModel:
    """One independent box/mask head pair per base category.

    Regions of a base category use that category's own heads. Any other
    category is routed to the base category with the most cosine-similar
    embedding (lowest id on ties).
    """

    variant = "classwise"

    def __init__(self, cfg: CondHeadConfig, base_ids, base_embeddings, seed: int = 0):
        base_ids = [int(i) for i in base_ids]
        if not base_ids:
            raise ConfigurationError("class-wise model needs at least one base category")
        if sorted(base_ids) != base_ids or len(set(base_ids)) != len(base_ids):
            raise ConfigurationError("base category ids must be unique and ascending")
        self.cfg = cfg
        self.seed = seed
        self.base_ids = base_ids
        self.base_embeddings = np.asarray(base_embeddings, dtype=np.float64)
        rng = np.random.default_rng(seed)
        bl, ml = box_expert_layout(cfg), mask_expert_layout(cfg)
        box_rows, mask_rows = [], []
        for _ in base_ids:
            box_rows.append(bl.init(rng))
            mask_rows.append(ml.init(rng))
        self.box_layout, self.mask_layout = bl, ml
        self.box_heads = Tensor(np.stack(box_rows), requires_grad=True, name="box.heads")
        self.mask_heads = Tensor(np.stack(mask_rows), requires_grad=True, name="mask.heads")

    @property
    def params(self) -> dict[str, Tensor]:
        return {"box.heads": self.box_heads, "mask.heads": self.mask_heads}

    def route(self, categories, embeddings) -> np.ndarray:
        """Head position used for each region."""
        pos = {c: i for i, c in enumerate(self.base_ids)}
        categories = np.asarray(categories)
        out = np.empty(len(categories), dtype=np.intp)
        cache: dict[int, int] = {}
        for i, c in enumerate(categories.tolist()):
            if c in pos:
                out[i] = pos[c]
                continue
            if c not in cache:
                sims = cosine_matrix(np.asarray(embeddings)[c], self.base_embeddings)[0]
                cache[c] = int(np.argmax(sims))
            out[i] = cache[c]
        return out

    def heads(self) -> list[tuple[StaticHead, StaticHead]]:
        return [(StaticHead("box", self.box_layout, Tensor(self.box_heads.data[i])),
                 StaticHead("mask", self.mask_layout, Tensor(self.mask_heads.data[i])))
                for i in range(len(self.base_ids))]

    def forward(self, categories, f, v, embeddings, tau):
        idx = self.route(categories, embeddings)
        return (apply_box_expert(self.box_layout, ad.take(self.box_heads, idx), f),
                apply_mask_expert(self.mask_layout, ad.take(self.mask_heads, idx), v))

    def extra_state(self) -> dict:
        return {"base_ids": self.base_ids,
                "base_embeddings": {"shape": list(self.base_embeddings.shape),
                                    "data": self.base_embeddings.reshape(-1).tolist()}}


def build_model(variant: str, cfg: CondHeadConfig, seed: int = 0, base_ids=None, base_embeddings=None):
    variant = canonical_variant(variant)
    if variant == "condhead":
        return CondHeadModel(cfg, seed)
    if variant == "agnostic":
        return ClassAgnosticModel(cfg, seed)
    if base_ids is None or base_embeddings is None:
        raise ConfigurationError("class-wise model needs base_ids and base_embeddings")
    return ClassWiseModel(cfg, base_ids, base_embeddings, seed)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
def _pack(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def _unpack(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def param_checksum(model) -> str:
    h = hashlib.sha256()
    for name, p in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def model_to_dict(model, train_state: dict | None = None, provenance: dict | None = None) -> dict:
    doc = {
        "format": CKPT_FORMAT,
        "variant": model.variant,
        "seed": model.seed,
        "config": model.cfg.to_dict(),
        "extra": model.extra_state(),
        "params": {name: _pack(p.data) for name, p in model.params.items()},
        "checksum": param_checksum(model),
    }
    if train_state is not None:
        doc["train_state"] = {
            "iteration": train_state["iteration"],
            "adam": {
                "step": train_state["adam"]["step"],
                "m": {k: _pack(v) for k, v in train_state["adam"]["m"].items()},
                "v": {k: _pack(v) for k, v in train_state["adam"]["v"].items()},
            },
            "losses": list(train_state.get("losses", [])),
            "box_losses": list(train_state.get("box_losses", [])),
            "mask_losses": list(train_state.get("mask_losses", [])),
        }
    if provenance is not None:
        doc["provenance"] = provenance
    return doc


def model_from_dict(doc: dict):
    """Rebuild a model (and its optimizer state, if saved) from a checkpoint dict.

    Returns ``(model, train_state_or_None)``.
    """
    if doc.get("format") != CKPT_FORMAT:
        raise ParseError(f"not a {CKPT_FORMAT} checkpoint (format={doc.get('format')!r})")
    cfg = CondHeadConfig.from_dict(doc["config"])
    variant = canonical_variant(doc["variant"])
    extra = doc.get("extra", {})
    if variant == "classwise":
        model = ClassWiseModel(cfg, extra["base_ids"], _unpack(extra["base_embeddings"]), doc.get("seed", 0))
    else:
        model = build_model(variant, cfg, doc.get("seed", 0))
    params = model.params
    if set(params) != set(doc["params"]):
        raise ConfigurationError(
            f"checkpoint parameters {sorted(doc['params'])} do not match {variant} model {sorted(params)}")
    for name, p in params.items():
        arr = _unpack(doc["params"][name])
        if arr.shape != p.shape:
            raise ConfigurationError(f"parameter {name}: checkpoint shape {arr.shape}, model expects {p.shape}")
        p.data = arr
    state = None
    if "train_state" in doc:
        ts = doc["train_state"]
        state = {
            "iteration": ts["iteration"],
            "adam": {"step": ts["adam"]["step"],
                     "m": {k: _unpack(v) for k, v in ts["adam"]["m"].items()},
                     "v": {k: _unpack(v) for k, v in ts["adam"]["v"].items()}},
            "losses": list(ts.get("losses", [])),
            "box_losses": list(ts.get("box_losses", [])),
            "mask_losses": list(ts.get("mask_losses", [])),
        }
    return model, state


def save_checkpoint(path, model, train_state=None, provenance=None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, train_state, provenance)))


def load_checkpoint(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint {path} is not valid JSON: {exc}") from None
    return model_from_dict(doc)
