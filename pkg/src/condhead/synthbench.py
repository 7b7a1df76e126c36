"""Procedural open-vocabulary benchmark with controllable semantic alignment.

Each category is a parametric shape (family, aspect ratio, scale, thickness)
with a random appearance vector. Its semantic embedding mixes a fixed linear
image of those attributes with class-specific noise; ``rho`` sets the mix, so
``rho=1`` embeddings are a deterministic function of what the category looks
like and ``rho=0`` embeddings carry no visual information at all.

Per sample, a ground-truth box is drawn inside the unit image, a proposal is
obtained by jittering it, and two features are synthesized in the proposal's
frame:

* ``f`` - a linear projection of [silhouette-based box cues, noisy appearance,
  nuisance noise]. The size cues are log-ratios of the silhouette's second
  moments to the proposal size; they equal the true log-size deltas plus a
  category-dependent offset (a ring is wider than its spread suggests, a
  cross narrower), so a head that knows the category can correct them.
* ``v`` - an SxS stack: a blurred silhouette plus appearance-tinted copies.

All randomness is derived from ``(seed, split, category, index)`` so any
subset of samples can be regenerated independently and in any order.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, DomainError, GenerationError, ParseError
from .geometry import Box, encode_deltas, encode_deltas_array, iou

FAMILIES = ("ellipse", "rectangle", "bar", "cross", "ring")
APPEARANCE_DIM = 8
DATASET_FORMAT = "condhead-bench-v1"

# Descriptor weights: family identity dominates cosine similarity, thickness
# (which drives the box-cue offset) is next. Aspect and scale do not change
# the shape in the proposal frame and appearance is a weak tint.
_FAMILY_WEIGHT = 3.0
_THICKNESS_WEIGHT = 4.0
_EXTENT_WEIGHT = 0.2
_APPEARANCE_WEIGHT = 0.35
# Stroke thickness of a class; kept narrow so a family stays one recognizable shape.
_THICKNESS_RANGE = (0.25, 0.4)
# Deltas are O(0.1); the gain lifts the geometric cues to the scale of the
# appearance and nuisance blocks before projection.
_CUE_GAIN = 4.0
_SUPERSAMPLE = 4
_MOMENT_GRID = 128


@dataclass
class BenchmarkSpec:
    n_base: int = 8
    n_novel: int = 4
    rho: float = 1.0
    feat_dim: int = 32
    mask_size: int = 14
    mask_channels: int = 4
    embed_dim: int = 64
    samples_per_class: int = 200
    eval_per_class: int = 50
    seed: int = 0
    center_jitter: float = 0.2
    size_jitter: float = 0.25
    iou_floor: float = 0.3
    cue_noise: float = 0.05
    appearance_noise: float = 0.5
    nuisance_dim: int = 1
    silhouette_blur: float = 1.5
    appearance_spread: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (isinstance(self.rho, (int, float)) and 0.0 <= self.rho <= 1.0):
            raise DomainError(f"alignment rho must lie in [0, 1], got {self.rho}")
        if self.n_base < 2:
            raise ConfigurationError(f"need n_base >= 2, got {self.n_base}")
        if self.n_novel < 1:
            raise ConfigurationError(f"need n_novel >= 1, got {self.n_novel}")
        if self.samples_per_class < 1 or self.eval_per_class < 1:
            raise ConfigurationError("samples_per_class and eval_per_class must be >= 1")
        if self.mask_channels != 4:
            raise ConfigurationError("mask feature stack has exactly 4 channels")
        base_dims = 4 + APPEARANCE_DIM + self.nuisance_dim
        if self.feat_dim < base_dims:
            raise ConfigurationError(f"feat_dim must be >= {base_dims} to keep the feature map injective")
        if min(self.center_jitter, self.size_jitter, self.cue_noise, self.appearance_noise,
               self.appearance_spread) < 0:
            raise ConfigurationError("noise and jitter magnitudes must be non-negative")
        if not 0.0 <= self.iou_floor < 1.0:
            raise ConfigurationError("iou_floor must lie in [0, 1)")
        if self.mask_size < 2 or self.embed_dim < 1 or self.silhouette_blur < 0:
            raise ConfigurationError("invalid mask_size, embed_dim or silhouette_blur")

    @property
    def n_classes(self) -> int:
        return self.n_base + self.n_novel

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown BenchmarkSpec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ShapeClass:
    cid: int
    family: str
    aspect_range: tuple[float, float]
    scale_range: tuple[float, float]
    thickness: float
    appearance: np.ndarray
    split: str = "base"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown shape family {self.family!r}")
        if not (0 < self.aspect_range[0] <= self.aspect_range[1]):
            raise ConfigurationError("aspect ratio range must be positive")
        if not (0 < self.scale_range[0] <= self.scale_range[1] < 1):
            raise ConfigurationError("scale range must lie within the unit image")
        self.appearance = np.asarray(self.appearance, dtype=np.float64)
        if not np.all(np.isfinite(self.appearance)):
            raise ConfigurationError("appearance vector must be finite")

    @property
    def aspect(self) -> float:
        return math.sqrt(self.aspect_range[0] * self.aspect_range[1])

    @property
    def scale(self) -> float:
        return 0.5 * (self.scale_range[0] + self.scale_range[1])

    def to_dict(self) -> dict:
        return {"cid": self.cid, "family": self.family, "aspect_range": list(self.aspect_range),
                "scale_range": list(self.scale_range), "thickness": self.thickness,
                "appearance": self.appearance.tolist(), "split": self.split}

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeClass":
        return cls(d["cid"], d["family"], tuple(d["aspect_range"]), tuple(d["scale_range"]),
                   d["thickness"], np.asarray(d["appearance"]), d["split"])


@dataclass
class SampleRecord:
    p: Box
    f: np.ndarray
    v: np.ndarray
    b: Box
    m: np.ndarray
    c: int

    @property
    def deltas(self) -> np.ndarray:
        return np.asarray(encode_deltas(self.p, self.b))


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------
def shape_indicator(family: str, thickness: float, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Occupancy of a family shape in box-normalised coordinates (u, v in [0, 1])."""
    x = 2.0 * u - 1.0
    y = 2.0 * v - 1.0
    inside = (np.abs(x) <= 1.0) & (np.abs(y) <= 1.0)
    t = thickness
    if family == "ellipse":
        occ = x * x + y * y <= 1.0
    elif family == "ring":
        r2 = x * x + y * y
        occ = (r2 <= 1.0) & (r2 >= (1.0 - t) ** 2)
    elif family == "rectangle":
        qx = np.maximum(np.abs(x) - (1.0 - t), 0.0)
        qy = np.maximum(np.abs(y) - (1.0 - t), 0.0)
        occ = qx * qx + qy * qy <= t * t
    elif family == "cross":
        occ = (np.abs(x) <= t) | (np.abs(y) <= t)
    elif family == "bar":
        occ = np.abs(x - y) <= t
    else:
        raise ConfigurationError(f"unknown shape family {family!r}")
    return occ & inside


@functools.lru_cache(maxsize=4096)
def _size_cue_offset(family: str, thickness: float) -> tuple[float, float]:
    t = (np.arange(_MOMENT_GRID) + 0.5) / _MOMENT_GRID
    u, v = np.meshgrid(t, t)
    occ = shape_indicator(family, thickness, u, v)
    us, vs = u[occ], v[occ]
    # A filled box has spread 1/sqrt(12) of its side; log-ratio to that.
    return (math.log(math.sqrt(12.0) * us.std()), math.log(math.sqrt(12.0) * vs.std()))


def size_cue_offset(cls: ShapeClass) -> tuple[float, float]:
    """Category-dependent offset between silhouette size cues and true log-size deltas."""
    return _size_cue_offset(cls.family, float(cls.thickness))


# ---------------------------------------------------------------------------
# categories and embeddings
# ---------------------------------------------------------------------------
def gen_classes(spec: BenchmarkSpec) -> list[ShapeClass]:
    """Base classes get ids 0..n_base-1, novel classes follow."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 7001])
    base_fams = list(rng.permutation(len(FAMILIES)))
    while len(base_fams) < spec.n_base:
        base_fams.append(int(rng.integers(len(FAMILIES))))
    base_fams = base_fams[:spec.n_base]
    if spec.n_base < len(FAMILIES):
        base_fams = list(rng.permutation(base_fams))
    novel_fams = [int(rng.integers(len(FAMILIES))) for _ in range(spec.n_novel)]
    # Classes of one family look alike: appearance scatters around a family prototype.
    prototypes = np.random.default_rng([spec.seed, 7005]).normal(size=(len(FAMILIES), APPEARANCE_DIM))

    classes = []
    for cid, fam in enumerate(base_fams + novel_fams):
        aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
        scale = rng.uniform(0.25, 0.4)
        thickness = rng.uniform(*_THICKNESS_RANGE)
        appearance = prototypes[int(fam)] + spec.appearance_spread * rng.normal(size=APPEARANCE_DIM)
        classes.append(ShapeClass(
            cid=cid, family=FAMILIES[int(fam)],
            aspect_range=(aspect / 1.1, aspect * 1.1),
            scale_range=(scale - 0.05, scale + 0.05),
            thickness=float(thickness), appearance=appearance,
            split="base" if cid < spec.n_base else "novel",
        ))
    return classes


def describe(cls: ShapeClass) -> np.ndarray:
    onehot = np.zeros(len(FAMILIES))
    onehot[FAMILIES.index(cls.family)] = 1.0
    return np.concatenate([
        _FAMILY_WEIGHT * onehot,
        [_EXTENT_WEIGHT * math.log(cls.aspect), _EXTENT_WEIGHT * math.log(cls.scale / 0.325),
         _THICKNESS_WEIGHT * (cls.thickness - sum(_THICKNESS_RANGE) / 2)],
        _APPEARANCE_WEIGHT * cls.appearance,
    ])


DESCRIPTOR_DIM = len(FAMILIES) + 3 + APPEARANCE_DIM


@functools.lru_cache(maxsize=64)
def _embedding_map(map_seed: int, embed_dim: int) -> np.ndarray:
    rng = np.random.default_rng([map_seed, 7002])
    return rng.normal(size=(embed_dim, DESCRIPTOR_DIM)) / math.sqrt(DESCRIPTOR_DIM)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x)


def visual_direction(cls: ShapeClass, embed_dim: int = 64, map_seed: int = 0) -> np.ndarray:
    """Unit vector the embedding would have under perfect alignment."""
    return _unit(_embedding_map(map_seed, embed_dim) @ describe(cls))


def embed_class(cls: ShapeClass, rho: float, seed, embed_dim: int = 64, map_seed: int = 0) -> np.ndarray:
    """normalize(rho * visual_direction + (1 - rho) * noise_direction)."""
    if not 0.0 <= rho <= 1.0:
        raise DomainError(f"alignment rho must lie in [0, 1], got {rho}")
    noise = _unit(np.random.default_rng(seed).normal(size=embed_dim))
    return _unit(rho * visual_direction(cls, embed_dim, map_seed) + (1.0 - rho) * noise)


def class_embeddings(spec: BenchmarkSpec, classes: list[ShapeClass]) -> np.ndarray:
    return np.stack([
        embed_class(c, spec.rho, [spec.seed, 7003, c.cid], spec.embed_dim, spec.seed) for c in classes
    ])


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------
@functools.lru_cache(maxsize=64)
def _feature_maps(seed: int, feat_dim: int, nuisance_dim: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 7004])
    z_dim = 4 + APPEARANCE_DIM + nuisance_dim
    proj = rng.normal(size=(feat_dim, z_dim)) / math.sqrt(z_dim)
    tint = rng.normal(size=(3, APPEARANCE_DIM)) / math.sqrt(APPEARANCE_DIM)
    return proj, tint


def feature_projection(spec: BenchmarkSpec) -> np.ndarray:
    """The fixed (F, 16) map from latent cues to region features."""
    return _feature_maps(spec.seed, spec.feat_dim, spec.nuisance_dim)[0]


def sample_seed(spec: BenchmarkSpec, split: str, cid: int, index: int) -> list[int]:
    return [spec.seed, 0 if split == "train" else 1, cid, index]


def _sample_gt_box(cls: ShapeClass, rng: np.random.Generator) -> Box:
    lo, hi = cls.aspect_range
    aspect = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    scale = rng.uniform(*cls.scale_range)
    w = scale * math.sqrt(aspect)
    h = scale / math.sqrt(aspect)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return Box(x1, y1, x1 + w, y1 + h)


def _jitter_proposal(b: Box, spec: BenchmarkSpec, rng: np.random.Generator) -> Box:
    if spec.center_jitter == 0 and spec.size_jitter == 0:
        return b
    cx, cy = b.center
    for _ in range(100):
        sx, sy = rng.uniform(-spec.center_jitter, spec.center_jitter, 2)
        lw, lh = rng.uniform(-spec.size_jitter, spec.size_jitter, 2)
        w = b.width * math.exp(lw)
        h = b.height * math.exp(lh)
        px = cx + sx * b.width
        py = cy + sy * b.height
        p = Box(px - 0.5 * w, py - 0.5 * h, px + 0.5 * w, py + 0.5 * h)
        if iou(p, b) >= spec.iou_floor:
            return p
    raise GenerationError(
        f"no proposal with IoU >= {spec.iou_floor} in 100 tries; jitter settings are inconsistent")


def _box_frame_coords(p: Box, b: Box, xs: np.ndarray, ys: np.ndarray):
    """Map image coordinates to b-normalised (u, v) on a grid (rows follow y)."""
    u = (xs - b.x1) / b.width
    v = (ys - b.y1) / b.height
    return np.meshgrid(u, v)


def render_target(cls: ShapeClass, p: Box, b: Box, size: int) -> np.ndarray:
    """Binary silhouette on the SxS grid laid over the proposal."""
    t = (np.arange(size) + 0.5) / size
    u, v = _box_frame_coords(p, b, p.x1 + t * p.width, p.y1 + t * p.height)
    return shape_indicator(cls.family, cls.thickness, u, v)


def render_coverage(cls: ShapeClass, p: Box, b: Box, size: int) -> np.ndarray:
    """Fractional silhouette coverage per cell (supersampled)."""
    n = size * _SUPERSAMPLE
    t = (np.arange(n) + 0.5) / n
    u, v = _box_frame_coords(p, b, p.x1 + t * p.width, p.y1 + t * p.height)
    occ = shape_indicator(cls.family, cls.thickness, u, v).astype(np.float64)
    return occ.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))


def render_sample(cls: ShapeClass, spec: BenchmarkSpec, seed) -> SampleRecord:
    rng = np.random.default_rng(seed)
    b = _sample_gt_box(cls, rng)
    p = _jitter_proposal(b, spec, rng)
    S = spec.mask_size

    dx, dy, dw, dh = encode_deltas(p, b)
    off_w, off_h = size_cue_offset(cls)
    cue = np.array([dx, dy, dw + off_w, dh + off_h]) + spec.cue_noise * rng.normal(size=4)
    appearance = cls.appearance + (1.0 - spec.rho) * spec.appearance_noise * rng.normal(size=APPEARANCE_DIM)
    nuisance = rng.normal(size=spec.nuisance_dim)
    proj, tint = _feature_maps(spec.seed, spec.feat_dim, spec.nuisance_dim)
    f = proj @ np.concatenate([_CUE_GAIN * cue, appearance, nuisance])

    sil = render_coverage(cls, p, b, S)
    if spec.silhouette_blur > 0:
        sil = gaussian_filter(sil, spec.silhouette_blur, mode="constant")
    colors = tint @ appearance
    v = np.concatenate([sil[None], colors[:, None, None] * sil[None]], axis=0)
    v = v + spec.cue_noise * rng.normal(size=v.shape)

    m = render_target(cls, p, b, S)
    return SampleRecord(p=p, f=f, v=v, b=b, m=m, c=cls.cid)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------
@dataclass
class Dataset:
    spec: BenchmarkSpec
    classes: list[ShapeClass]
    embeddings: np.ndarray
    train: list[SampleRecord] = field(default_factory=list)
    eval: list[SampleRecord] = field(default_factory=list)

    @property
    def base_ids(self) -> list[int]:
        return [c.cid for c in self.classes if c.split == "base"]

    @property
    def novel_ids(self) -> list[int]:
        return [c.cid for c in self.classes if c.split == "novel"]

    def split_of(self, cid: int) -> str:
        return self.classes[cid].split

    def eval_split(self, split: str) -> list[SampleRecord]:
        if split == "all":
            return list(self.eval)
        return [r for r in self.eval if self.classes[r.c].split == split]


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CONDHEAD_THREADS", "1")))
    except ValueError:
        return 1


def gen_dataset(spec: BenchmarkSpec, workers: int | None = None) -> Dataset:
    """Train split holds base categories only; the eval split covers every category."""
    spec.validate()
    classes = gen_classes(spec)
    embeddings = class_embeddings(spec, classes)
    jobs = []
    for cls in classes:
        if cls.split == "base":
            jobs += [("train", cls, i) for i in range(spec.samples_per_class)]
    for cls in classes:
        jobs += [("eval", cls, i) for i in range(spec.eval_per_class)]

    def run(job):
        split, cls, i = job
        return render_sample(cls, spec, sample_seed(spec, split, cls.cid, i))

    workers = _worker_count() if workers is None else workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run, jobs))
    else:
        records = [run(j) for j in jobs]
    n_train = sum(1 for j in jobs if j[0] == "train")
    return Dataset(spec, classes, embeddings, records[:n_train], records[n_train:])


# ---------------------------------------------------------------------------
# serialization (JSON Lines, 17 significant digits)
# ---------------------------------------------------------------------------
def _reals(a) -> str:
    return "[" + ",".join(format(float(x), ".17g") for x in np.asarray(a).reshape(-1)) + "]"


def _record_line(split: str, r: SampleRecord) -> str:
    return (
        f'{{"split":"{split}","c":{r.c},"p":{_reals(tuple(r.p))},"b":{_reals(tuple(r.b))},'
        f'"f":{_reals(r.f)},"v":{_reals(r.v)},'
        f'"m":[{",".join("1" if x else "0" for x in r.m.reshape(-1))}]}}'
    )


def dataset_lines(ds: Dataset) -> tuple[dict, list[str]]:
    lines = [_record_line("train", r) for r in ds.train] + [_record_line("eval", r) for r in ds.eval]
    digest = hashlib.sha256("\n".join(lines).encode()).hexdigest()
    header = {
        "format": DATASET_FORMAT,
        "spec": ds.spec.to_dict(),
        "n_records": len(lines),
        "n_train": len(ds.train),
        "checksum": digest,
        "classes": [c.to_dict() for c in ds.classes],
        "embeddings": [[format(x, ".17g") for x in row] for row in ds.embeddings.tolist()],
    }
    return header, lines


def save_dataset(ds: Dataset, path) -> str:
    """Write the dataset and return its checksum."""
    header, lines = dataset_lines(ds)
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for line in lines:
            fh.write(line + "\n")
    return header["checksum"]


def _parse_record(obj: dict, spec: BenchmarkSpec, lineno: int) -> tuple[str, SampleRecord]:
    S, C = spec.mask_size, spec.mask_channels
    try:
        f = np.asarray(obj["f"], dtype=np.float64)
        v = np.asarray(obj["v"], dtype=np.float64)
        m = np.asarray(obj["m"])
        if f.shape != (spec.feat_dim,) or v.size != C * S * S or m.size != S * S:
            raise ParseError("array sizes do not match the header spec", lineno)
        if not np.all((m == 0) | (m == 1)):
            raise ParseError("mask must be binary", lineno)
        rec = SampleRecord(p=Box(*obj["p"]), f=f, v=v.reshape(C, S, S), b=Box(*obj["b"]),
                           m=m.reshape(S, S).astype(bool), c=int(obj["c"]))
        return obj["split"], rec
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed record: {exc}", lineno) from None


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        raw = fh.read().split("\n")
    if raw and raw[-1] == "":
        raw.pop()
    if not raw:
        raise ParseError("empty dataset file", 1)
    try:
        header = json.loads(raw[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header: {exc}", 1) from None
    if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
        raise ParseError(f"not a {DATASET_FORMAT} file", 1)
    try:
        spec = BenchmarkSpec.from_dict(header["spec"])
        classes = [ShapeClass.from_dict(c) for c in header["classes"]]
        embeddings = np.asarray([[float(x) for x in row] for row in header["embeddings"]])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad header: {exc}", 1) from None
    lines = raw[1:]
    if len(lines) != header.get("n_records"):
        raise ParseError(f"expected {header.get('n_records')} records, found {len(lines)}", len(raw))
    digest = hashlib.sha256("\n".join(lines).encode()).hexdigest()
    train, evals = [], []
    for i, line in enumerate(lines, start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}", i) from None
        split, rec = _parse_record(obj, spec, i)
        (train if split == "train" else evals).append(rec)
    if digest != header.get("checksum"):
        raise ParseError("checksum mismatch", 1)
    return Dataset(spec, classes, embeddings, train, evals)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------
@dataclass
class Batch:
    cats: np.ndarray
    p: np.ndarray
    b: np.ndarray
    f: np.ndarray
    v: np.ndarray
    m: np.ndarray

    def __len__(self) -> int:
        return len(self.cats)

    @property
    def deltas(self) -> np.ndarray:
        return encode_deltas_array(self.p, self.b)

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.intp)
        return Batch(self.cats[idx], self.p[idx], self.b[idx], self.f[idx], self.v[idx], self.m[idx])


def stack_records(records: list[SampleRecord]) -> Batch:
    return Batch(
        cats=np.array([r.c for r in records], dtype=np.intp),
        p=np.array([tuple(r.p) for r in records], dtype=np.float64).reshape(-1, 4),
        b=np.array([tuple(r.b) for r in records], dtype=np.float64).reshape(-1, 4),
        f=np.stack([r.f for r in records]) if records else np.zeros((0, 0)),
        v=np.stack([r.v for r in records]) if records else np.zeros((0, 0, 0, 0)),
        m=np.stack([r.m for r in records]).astype(np.float64) if records else np.zeros((0, 0, 0)),
    )
