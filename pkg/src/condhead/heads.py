"""Semantic-embedding conditioned box and mask heads, plus the two baselines.

The conditioned model has two branches per task:

* an *aggregated* head whose parameters are a convex combination of H expert
  heads, mixed by softmax weights computed from the category embedding;
* a *generated* light head whose whole parameter vector is emitted by a
  small network from the same embedding.

Their outputs are blended with ``lam`` (boxes) and ``mu`` (masks).

Parameters of every head are kept as one flat vector described by a
:class:`HeadLayout`, so expert banks are ``(H, P)`` matrices and per-category
aggregated heads are ``(K, P)`` rows that can be gathered per region.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, DomainError

VARIANTS = ("agnostic", "classwise", "condhead")
_VARIANT_ALIASES = {"class_agnostic": "agnostic", "class-agnostic": "agnostic"}


def canonical_variant(name: str) -> str:
    name = _VARIANT_ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ConfigurationError(f"unknown model variant {name!r}; expected one of {VARIANTS}")
    return name


@dataclass
class CondHeadConfig:
    n_experts: int = 8
    lam: float = 0.6
    mu: float = 0.6
    tau_start: float = 20.0
    tau_end: float = 1.0
    anneal_iters: int = 500
    embed_dim: int = 64
    feat_dim: int = 32
    mask_channels: int = 4
    mask_size: int = 14
    box_hidden: int = 256
    mask_hidden: int = 8
    gen_hidden: int = 256

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_experts < 1:
            raise ConfigurationError("n_experts must be >= 1")
        for name in ("lam", "mu"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
        if not (self.tau_start >= self.tau_end > 0):
            raise ConfigurationError(
                f"need tau_start >= tau_end > 0, got {self.tau_start}, {self.tau_end}")
        if self.anneal_iters < 1:
            raise ConfigurationError("anneal_iters must be >= 1")
        for name in ("embed_dim", "feat_dim", "mask_channels", "mask_size",
                     "box_hidden", "mask_hidden", "gen_hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CondHeadConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown CondHeadConfig keys: {sorted(unknown)}")
        return cls(**d)


def paper_default_config() -> CondHeadConfig:
    """Head dimensions at detector scale, used for overhead accounting only.

    40 experts, 512-d text embeddings, 256-wide hidden layers, 1024-d region
    features and 256x14x14 mask features.
    """
    return CondHeadConfig(n_experts=40, embed_dim=512, feat_dim=1024, mask_channels=256,
                          mask_size=14, box_hidden=256, mask_hidden=256, gen_hidden=256,
                          anneal_iters=5000)


# ---------------------------------------------------------------------------
# flat parameter layouts
# ---------------------------------------------------------------------------
class HeadLayout:
    """Named, shaped slices of a flat parameter vector."""

    def __init__(self, entries, fan_in):
        self.entries = [(name, tuple(shape)) for name, shape in entries]
        self.fan_in = dict(fan_in)
        self.offsets = {}
        pos = 0
        for name, shape in self.entries:
            n = math.prod(shape)
            self.offsets[name] = (pos, pos + n)
            pos += n
        self.size = pos

    def unpack(self, theta: Tensor) -> dict[str, Tensor]:
        """Split ``theta`` of shape (P,) or (N, P) into named tensors.

        Per-row parameters keep the leading N axis on every piece.
        """
        if theta.shape[-1] != self.size:
            raise DimensionError(f"parameter vector of length {theta.shape[-1]}, layout needs {self.size}")
        out = {}
        for name, shape in self.entries:
            lo, hi = self.offsets[name]
            if theta.ndim == 1:
                out[name] = theta[lo:hi].reshape(shape)
            else:
                out[name] = theta[:, lo:hi].reshape((theta.shape[0],) + shape)
        return out

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Fan-in scaled uniform weights, zero biases."""
        flat = np.zeros(self.size)
        for name, shape in self.entries:
            if name.endswith("bias"):
                continue
            lo, hi = self.offsets[name]
            bound = math.sqrt(1.0 / self.fan_in[name])
            flat[lo:hi] = rng.uniform(-bound, bound, hi - lo)
        return flat


def box_expert_layout(cfg: CondHeadConfig) -> HeadLayout:
    F, Hd = cfg.feat_dim, cfg.box_hidden
    return HeadLayout(
        [("fc1.weight", (F, Hd)), ("fc1.bias", (Hd,)), ("fc2.weight", (Hd, 4)), ("fc2.bias", (4,))],
        {"fc1.weight": F, "fc2.weight": Hd},
    )


def mask_expert_layout(cfg: CondHeadConfig) -> HeadLayout:
    C, Hm = cfg.mask_channels, cfg.mask_hidden
    return HeadLayout(
        [("conv1.weight", (Hm, C, 3, 3)), ("conv1.bias", (Hm,)),
         ("conv2.weight", (Hm, Hm, 3, 3)), ("conv2.bias", (Hm,)),
         ("conv3.weight", (1, Hm, 3, 3)), ("conv3.bias", (1,))],
        {"conv1.weight": C * 9, "conv2.weight": Hm * 9, "conv3.weight": Hm * 9},
    )


def light_box_layout(cfg: CondHeadConfig) -> HeadLayout:
    return HeadLayout([("fc.weight", (cfg.feat_dim, 4)), ("fc.bias", (4,))],
                      {"fc.weight": cfg.feat_dim})


def light_mask_layout(cfg: CondHeadConfig) -> HeadLayout:
    return HeadLayout([("conv.weight", (cfg.mask_channels,)), ("conv.bias", (1,))],
                      {"conv.weight": cfg.mask_channels})


# ---------------------------------------------------------------------------
# head application; parameters are shared (P,) or per region (N, P)
# ---------------------------------------------------------------------------
def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if w.ndim == 2:
        return x @ w + b
    n, d_in = x.shape
    y = ad.matmul(x.reshape(n, 1, d_in), w)
    return y.reshape(n, w.shape[-1]) + b


def _check_rows(theta: Tensor, n: int) -> None:
    if theta.ndim == 2 and theta.shape[0] != n:
        raise DimensionError(f"{theta.shape[0]} parameter rows for {n} regions")


def apply_box_expert(layout: HeadLayout, theta: Tensor, f) -> Tensor:
    f = ad._as_tensor(f)
    if f.ndim != 2 or f.shape[1] != layout.entries[0][1][0]:
        raise DimensionError(f"box head expects (N, {layout.entries[0][1][0]}) features, got {f.shape}")
    _check_rows(theta, f.shape[0])
    p = layout.unpack(theta)
    h = ad.relu(_linear(f, p["fc1.weight"], p["fc1.bias"]))
    return _linear(h, p["fc2.weight"], p["fc2.bias"])


def apply_light_box(layout: HeadLayout, theta: Tensor, f) -> Tensor:
    f = ad._as_tensor(f)
    if f.ndim != 2 or f.shape[1] != layout.entries[0][1][0]:
        raise DimensionError(f"light box head expects (N, {layout.entries[0][1][0]}) features, got {f.shape}")
    _check_rows(theta, f.shape[0])
    p = layout.unpack(theta)
    return _linear(f, p["fc.weight"], p["fc.bias"])


def apply_mask_expert(layout: HeadLayout, theta: Tensor, v) -> Tensor:
    v = ad._as_tensor(v)
    c = layout.entries[0][1][1]
    if v.ndim != 4 or v.shape[1] != c:
        raise DimensionError(f"mask head expects (N, {c}, S, S) features, got {v.shape}")
    n, _, s, _ = v.shape
    _check_rows(theta, n)
    p = layout.unpack(theta)
    x = ad.relu(ad.conv2d(v, p["conv1.weight"], p["conv1.bias"]))
    x = ad.relu(ad.conv2d(x, p["conv2.weight"], p["conv2.bias"]))
    x = ad.conv2d(x, p["conv3.weight"], p["conv3.bias"])
    return x.reshape(n, s, s)


def apply_light_mask(layout: HeadLayout, theta: Tensor, v) -> Tensor:
    v = ad._as_tensor(v)
    c = layout.entries[0][1][0]
    if v.ndim != 4 or v.shape[1] != c:
        raise DimensionError(f"light mask head expects (N, {c}, S, S) features, got {v.shape}")
    n, _, s, _ = v.shape
    _check_rows(theta, n)
    p = layout.unpack(theta)
    flat = v.reshape(n, c, s * s)
    if theta.ndim == 1:
        out = ad.matmul(p["conv.weight"].reshape(1, c), flat) + p["conv.bias"]
    else:
        out = ad.matmul(p["conv.weight"].reshape(n, 1, c), flat) + p["conv.bias"].reshape(n, 1, 1)
    return out.reshape(n, s, s)


# ---------------------------------------------------------------------------
# conditioning networks
# ---------------------------------------------------------------------------
def _uniform(rng, shape, fan_in):
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def _mlp_params(rng, prefix, d_in, hidden, d_out) -> dict[str, Tensor]:
    return {
        f"{prefix}.fc1.weight": Tensor(_uniform(rng, (d_in, hidden), d_in), requires_grad=True),
        f"{prefix}.fc1.bias": Tensor(np.zeros(hidden), requires_grad=True),
        f"{prefix}.fc2.weight": Tensor(_uniform(rng, (hidden, d_out), hidden), requires_grad=True),
        f"{prefix}.fc2.bias": Tensor(np.zeros(d_out), requires_grad=True),
    }


def _as_rows(s) -> tuple[Tensor, bool]:
    s = ad._as_tensor(s)
    if s.ndim == 1:
        return s.reshape(1, s.shape[0]), True
    return s, False


class ExpertBank:
    """H experts sharing one layout, plus the network producing their mixing weights."""

    def __init__(self, layout: HeadLayout, n_experts: int, embed_dim: int, hidden: int,
                 rng: np.random.Generator, prefix: str):
        self.layout = layout
        self.n_experts = n_experts
        self.embed_dim = embed_dim
        self.prefix = prefix
        self.experts = Tensor(np.stack([layout.init(rng) for _ in range(n_experts)]),
                              requires_grad=True, name=f"{prefix}.experts")
        self.gate = _mlp_params(rng, f"{prefix}.gate", embed_dim, hidden, n_experts)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.prefix}.experts": self.experts, **self.gate}


class GeneratedHead:
    """Hypernetwork emitting the flat parameter vector of a light head."""

    def __init__(self, layout: HeadLayout, embed_dim: int, hidden: int,
                 rng: np.random.Generator, prefix: str):
        self.layout = layout
        self.embed_dim = embed_dim
        self.prefix = prefix
        self.net = _mlp_params(rng, f"{prefix}.gen", embed_dim, hidden, layout.size)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.net)


def gate_logits(bank: ExpertBank, s) -> Tensor:
    rows, _ = _as_rows(s)
    if rows.shape[1] != bank.embed_dim:
        raise DimensionError(f"embedding dimension {rows.shape[1]}, bank expects {bank.embed_dim}")
    g = bank.gate
    p = bank.prefix + ".gate"
    h = ad.relu(rows @ g[f"{p}.fc1.weight"] + g[f"{p}.fc1.bias"])
    # Broadcast-and-reduce keeps each expert's logit independent of column
    # position, so permuting experts permutes logits bit for bit.
    k, hidden = h.shape
    prod = h.reshape(k, hidden, 1) * g[f"{p}.fc2.weight"]
    return ad.tsum(prod, axis=1) + g[f"{p}.fc2.bias"]


def generate_weights(bank: ExpertBank, s, tau: float) -> Tensor:
    """Softmax(gate(s) / tau); shape (H,) for one embedding, (K, H) for K."""
    _, single = _as_rows(s)
    w = softmax_sorted(gate_logits(bank, s), tau)
    return w.reshape(bank.n_experts) if single else w


def softmax_sorted(logits: Tensor, tau: float) -> Tensor:
    """Temperature softmax whose normaliser is summed in sorted order.

    Same values as :func:`autodiff.softmax_temp` up to rounding, but the
    result does not depend on the order of the entries.
    """
    if not tau > 0:
        raise DomainError(f"softmax temperature must be positive, got {tau}")
    x = logits
    e = np.exp((x.data - x.data.max(axis=-1, keepdims=True)) / tau)
    y = e / np.sort(e, axis=-1).sum(axis=-1, keepdims=True)

    def backward(g):
        ad._accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)) / tau)

    return ad._make(y, (x,), backward, "softmax_temp")


def _ordered_mix(w: np.ndarray, experts: np.ndarray) -> np.ndarray:
    # Accumulate experts in ascending (weight, parameter-sum) order so the
    # result is independent of how experts are indexed.
    k, h = w.shape
    key = experts.sum(axis=1)
    order = np.stack([np.lexsort((key, row)) for row in w])
    rows = np.arange(k)
    acc = np.zeros((k, experts.shape[1]))
    for j in range(h):
        idx = order[:, j]
        acc = acc + w[rows, idx][:, None] * experts[idx]
    return acc


def aggregate_parameters(bank: ExpertBank, w) -> Tensor:
    """Convex combination of expert parameter vectors: (H,) -> (P,), (K,H) -> (K,P)."""
    w = ad._as_tensor(w)
    single = w.ndim == 1
    if single:
        w = w.reshape(1, w.shape[0])
    if w.shape[1] != bank.n_experts:
        raise DimensionError(f"{w.shape[1]} aggregation weights for {bank.n_experts} experts")
    experts = bank.experts
    data = _ordered_mix(w.data, experts.data)

    def backward(g):
        if w.requires_grad:
            ad._accumulate(w, g @ experts.data.T)
        if experts.requires_grad:
            ad._accumulate(experts, w.data.T @ g)

    out = ad._make(data, (w, experts), backward, "aggregate")
    return out.reshape(bank.layout.size) if single else out


def generate_parameters(gen: GeneratedHead, s) -> Tensor:
    rows, single = _as_rows(s)
    if rows.shape[1] != gen.embed_dim:
        raise DimensionError(f"embedding dimension {rows.shape[1]}, generator expects {gen.embed_dim}")
    p = gen.prefix + ".gen"
    n = gen.net
    h = ad.relu(rows @ n[f"{p}.fc1.weight"] + n[f"{p}.fc1.bias"])
    theta = h @ n[f"{p}.fc2.weight"] + n[f"{p}.fc2.bias"]
    return theta.reshape(gen.layout.size) if single else theta


def _blend(weight: float, a: Tensor, b: Tensor) -> Tensor:
    # Exact endpoints: a pure branch is returned untouched.
    if weight == 1.0:
        return a
    if weight == 0.0:
        return b
    return weight * a + (1.0 - weight) * b


def _conditioned(bank, gen, s, tau, index, n):
    """Aggregated and generated parameters, one row per region."""
    rows, single = _as_rows(s)
    w = softmax_sorted(gate_logits(bank, rows), tau)
    theta_agg = aggregate_parameters(bank, w)
    theta_gen = generate_parameters(gen, rows)
    if index is None:
        if not single and rows.shape[0] != n:
            raise DimensionError(f"{rows.shape[0]} embeddings for {n} regions and no index")
        index = np.zeros(n, dtype=np.intp) if single else np.arange(n)
    return ad.take(theta_agg, index), ad.take(theta_gen, index)


def forward_box(bank: ExpertBank, gen: GeneratedHead, cfg: CondHeadConfig, s, f,
                tau: float | None = None, index=None) -> Tensor:
    """Blended box deltas, ``lam * aggregated + (1 - lam) * generated``.

    ``s`` is one embedding (E,) or K embeddings (K, E); with K embeddings,
    ``index[i]`` names the embedding row of region ``i``. Conditioning is
    evaluated once per embedding row and gathered per region. A single
    region feature (F,) yields a (4,) output.
    """
    tau = cfg.tau_end if tau is None else tau
    f = ad._as_tensor(f)
    single_roi = f.ndim == 1
    if single_roi:
        f = f.reshape(1, f.shape[0])
    theta_agg, theta_gen = _conditioned(bank, gen, s, tau, index, f.shape[0])
    out = _blend(cfg.lam, apply_box_expert(bank.layout, theta_agg, f),
                 apply_light_box(gen.layout, theta_gen, f))
    return out.reshape(4) if single_roi else out


def forward_mask(bank: ExpertBank, gen: GeneratedHead, cfg: CondHeadConfig, s, v,
                 tau: float | None = None, index=None) -> Tensor:
    """Blended mask logits with weight ``mu``; (C,S,S) -> (S,S), (N,C,S,S) -> (N,S,S)."""
    tau = cfg.tau_end if tau is None else tau
    v = ad._as_tensor(v)
    single_roi = v.ndim == 3
    if single_roi:
        v = v.reshape((1,) + v.shape)
    theta_agg, theta_gen = _conditioned(bank, gen, s, tau, index, v.shape[0])
    out = _blend(cfg.mu, apply_mask_expert(bank.layout, theta_agg, v),
                 apply_light_mask(gen.layout, theta_gen, v))
    return out.reshape(v.shape[2], v.shape[3]) if single_roi else out


@dataclass
class StaticHead:
    """A single unconditioned head: ``kind`` is "box" or "mask"."""
    kind: str
    layout: HeadLayout
    theta: Tensor


def forward_class_agnostic(head: StaticHead, x) -> Tensor:
    x = ad._as_tensor(x)
    if head.kind == "box":
        single = x.ndim == 1
        out = apply_box_expert(head.layout, head.theta, x.reshape(1, -1) if single else x)
        return out.reshape(4) if single else out
    single = x.ndim == 3
    out = apply_mask_expert(head.layout, head.theta, x.reshape((1,) + x.shape) if single else x)
    return out.reshape(x.shape[1], x.shape[2]) if single else out


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    return (a / na) @ (b / nb).T


def select_base(base_embeddings: np.ndarray, s_target: np.ndarray) -> int:
    """Position of the most cosine-similar base embedding; first wins ties."""
    base_embeddings = np.asarray(base_embeddings, dtype=np.float64)
    if base_embeddings.ndim != 2 or base_embeddings.shape[0] == 0:
        raise ConfigurationError("class-wise transfer needs at least one base category")
    return int(np.argmax(cosine_matrix(np.asarray(s_target, dtype=np.float64), base_embeddings)[0]))


def classwise_transfer(heads: list[StaticHead], base_embeddings, s_target, f) -> Tensor:
    """Run the box head of the base category closest to ``s_target``.

    ``heads`` and ``base_embeddings`` are ordered by ascending category id.
    """
    if not heads:
        raise ConfigurationError("class-wise transfer needs at least one base head")
    if len(heads) != len(base_embeddings):
        raise ConfigurationError(f"{len(heads)} heads for {len(base_embeddings)} base embeddings")
    return forward_class_agnostic(heads[select_base(base_embeddings, s_target)], f)


def anneal_tau(cfg: CondHeadConfig, iteration: int) -> float:
    """Linear decay from tau_start to tau_end over anneal_iters, then flat."""
    if iteration < 0:
        raise DomainError(f"iteration must be non-negative, got {iteration}")
    frac = min(iteration, cfg.anneal_iters) / cfg.anneal_iters
    return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac


# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------
def linear_flops(d_in: int, d_out: int) -> int:
    return 2 * d_in * d_out


def conv3x3_flops(c_in: int, c_out: int, size: int) -> int:
    return 2 * c_in * 9 * size * size * c_out


def flop_count(cfg: CondHeadConfig, n_rois: int, n_categories: int) -> dict:
    """Multiply-add FLOPs of the heads, split into conditioning and per-region cost.

    Convention: 2*in*out per linear layer, 2*C_in*9*S^2 per conv output
    channel, 2*H*P to mix H expert vectors of length P, 2*C*S^2 for the 1x1
    light mask conv. Biases, activations and the softmax are not counted.
    Conditioning is evaluated once per category and shared by its regions.
    """
    if n_rois < 1 or n_categories < 1:
        raise ConfigurationError("n_rois and n_categories must be positive")
    E, G, H = cfg.embed_dim, cfg.gen_hidden, cfg.n_experts
    S, C, Hm, F, Hb = cfg.mask_size, cfg.mask_channels, cfg.mask_hidden, cfg.feat_dim, cfg.box_hidden
    box_p = box_expert_layout(cfg).size
    mask_p = mask_expert_layout(cfg).size

    cond = {
        "box_gate": linear_flops(E, G) + linear_flops(G, H),
        "mask_gate": linear_flops(E, G) + linear_flops(G, H),
        "box_aggregate": 2 * H * box_p,
        "mask_aggregate": 2 * H * mask_p,
        "box_generator": linear_flops(E, G) + linear_flops(G, light_box_layout(cfg).size),
        "mask_generator": linear_flops(E, G) + linear_flops(G, light_mask_layout(cfg).size),
    }
    box_expert = linear_flops(F, Hb) + linear_flops(Hb, 4)
    mask_expert = conv3x3_flops(C, Hm, S) + conv3x3_flops(Hm, Hm, S) + conv3x3_flops(Hm, 1, S)
    per_roi = {
        "box_aggregated": box_expert,
        "box_generated": linear_flops(F, 4),
        "mask_aggregated": mask_expert,
        "mask_generated": 2 * C * S * S,
    }
    cond_per_category = sum(cond.values())
    head_per_roi = sum(per_roi.values())
    agnostic_per_roi = box_expert + mask_expert
    conditioning = cond_per_category * n_categories
    condhead_total = conditioning + head_per_roi * n_rois
    agnostic_total = agnostic_per_roi * n_rois
    return {
        "n_rois": n_rois,
        "n_categories": n_categories,
        "conditioning_per_category": cond,
        "conditioning_per_category_total": cond_per_category,
        "conditioning_total": conditioning,
        "head_per_roi": per_roi,
        "condhead_head_per_roi": head_per_roi,
        "agnostic_head_per_roi": agnostic_per_roi,
        "added_head_per_roi": head_per_roi - agnostic_per_roi,
        "added_head_per_roi_ratio": (head_per_roi - agnostic_per_roi) / agnostic_per_roi,
        "condhead_total": condhead_total,
        "agnostic_total": agnostic_total,
        "total_overhead_ratio": (condhead_total - agnostic_total) / agnostic_total,
    }
