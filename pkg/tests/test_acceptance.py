"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL line.

The learning-based criteria train on CI seeds 0-4 with the CI schedule
(1000 iterations, temperature annealed over the first quarter). Margins were
fixed beforehand by ``scripts/pilot.py`` on the disjoint seeds 100-104; the
pilot output is kept in ``scripts/pilot_rho1.json``.
"""

import functools
import json
import time

import numpy as np
import pytest
from scipy import stats

import test_heads as th
from condhead.cli import main as cli_main
from condhead.evaluation import evaluate, family_cosines, weight_entropy, weight_report
from condhead.heads import CondHeadConfig, flop_count, generate_weights, paper_default_config
from condhead.models import CondHeadModel, load_checkpoint, param_checksum
from condhead.synthbench import BenchmarkSpec, gen_dataset, stack_records
from condhead.train import TrainConfig, batch_indices, compute_loss, head_config_for, train
from condhead.verify import TOLERANCE, run_suite

CI_SEEDS = (0, 1, 2, 3, 4)
SWEEP_SEEDS = CI_SEEDS
ITERATIONS = 1000
VARIANTS = ("agnostic", "classwise", "condhead")

# Frozen from the pilot (mean - 2 * std of the condhead-minus-agnostic novel gain).
# Both came out negative, so the criterion cannot pass as registered.
DELTA_BOX = -0.0104
DELTA_MASK = -0.0155


def _line(capsys, criterion, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} {criterion}: {detail}")


@functools.lru_cache(maxsize=None)
def _dataset(seed, rho):
    return gen_dataset(BenchmarkSpec(seed=seed, rho=rho))


def _train_eval(seed, rho, variant):
    ds = _dataset(seed, rho)
    cfg = TrainConfig(iterations=ITERATIONS, seed=seed, variant=variant,
                      head=CondHeadConfig(anneal_iters=ITERATIONS // 4))
    model, report, _ = train(ds, cfg)
    return ds, model, report, evaluate(model, ds)


@pytest.fixture(scope="session")
def rho1():
    """Every variant on every CI seed at full alignment."""
    runs = {}
    for seed in CI_SEEDS:
        for v in VARIANTS:
            runs[seed, v] = _train_eval(seed, 1.0, v)
    return runs


@pytest.fixture(scope="session")
def sweep(rho1):
    """Novel box-IoU gain of condhead over agnostic per (rho, seed)."""
    gains = {}
    for seed in SWEEP_SEEDS:
        r = {v: rho1[seed, v][3] for v in ("agnostic", "condhead")}
        gains[1.0, seed] = r["condhead"].metric("novel", "box_iou") - r["agnostic"].metric("novel", "box_iou")
        for rho in (0.0, 0.5):
            ev = {v: _train_eval(seed, rho, v)[3] for v in ("agnostic", "condhead")}
            gains[rho, seed] = ev["condhead"].metric("novel", "box_iou") - ev["agnostic"].metric("novel", "box_iou")
    return gains


def _mean(rho1, variant, metric, split="novel"):
    return float(np.mean([rho1[s, variant][3].metric(split, metric) for s in CI_SEEDS]))


# ---------------------------------------------------------------------------
def test_c1_gradcheck(capsys):
    t0 = time.perf_counter()
    results = run_suite(0)
    seconds = time.perf_counter() - t0
    worst = max(r.error for r in results)
    ok = len(results) >= 8 and all(r.error < TOLERANCE for r in results) and seconds < 60
    _line(capsys, "C1 gradcheck", ok, f"{len(results)} paths, worst rel err {worst:.2e}, {seconds:.1f}s")
    assert ok


def _draws(rng):
    seed = lambda: int(rng.integers(2**32))  # noqa: E731
    tau = lambda: float(np.exp(rng.uniform(np.log(0.05), np.log(50.0))))  # noqa: E731
    return {
        "simplex": (th.test_property_softmax_simplex,
                    lambda: (seed(), int(rng.integers(1, 7)), tau(), int(rng.integers(1, 5)))),
        "convex hull": (th.test_property_convex_hull,
                        lambda: (seed(), int(rng.integers(1, 7)), int(rng.integers(1, 4)),
                                 str(rng.choice(["dirichlet", "softmax", "vertex"])))),
        "permutation": (th.test_property_expert_permutation_equivariance,
                        lambda: (seed(), int(rng.integers(2, 7)), tau(), int(rng.integers(1, 4)))),
        "blend endpoints": (th.test_property_blend_endpoints_exact,
                            lambda: (seed(), int(rng.integers(1, 7)), tau(), float(rng.choice([0.0, 1.0])),
                                     float(rng.choice([0.0, 1.0])))),
        "high-tau uniform": (th.test_property_high_temperature_is_uniform,
                             lambda: (seed(), int(rng.integers(1, 7)))),
    }


def test_c2_mechanism_invariants(capsys):
    rng = np.random.default_rng(20)
    t0 = time.perf_counter()
    counts = {}
    for name, (prop, draw) in _draws(rng).items():
        for _ in range(1000):
            prop.hypothesis.inner_test(*draw())
        counts[name] = 1000
    seconds = time.perf_counter() - t0
    ok = seconds < 120
    _line(capsys, "C2 invariants", ok, f"{len(counts)} invariants x 1000 cases, {seconds:.1f}s")
    assert ok


@pytest.mark.slow
def test_c3_novel_gain_over_agnostic(rho1, capsys):
    box = _mean(rho1, "condhead", "box_iou") - _mean(rho1, "agnostic", "box_iou")
    mask = _mean(rho1, "condhead", "mask_iou") - _mean(rho1, "agnostic", "mask_iou")
    ok = DELTA_BOX > 0 and DELTA_MASK > 0 and box > DELTA_BOX and mask > DELTA_MASK
    _line(capsys, "C3 novel gain", ok,
          f"box {box:+.4f} (delta {DELTA_BOX:+.4f}), mask {mask:+.4f} (delta {DELTA_MASK:+.4f}); "
          f"a non-positive delta fails")
    assert ok


@pytest.mark.slow
def test_c4_variant_ordering(rho1, capsys):
    agn, cw, ch = (_mean(rho1, v, "box_iou") for v in VARIANTS)
    ok = agn <= cw <= ch
    _line(capsys, "C4 ordering", ok, f"novel box IoU agnostic {agn:.4f}, classwise {cw:.4f}, condhead {ch:.4f}")
    assert ok


@pytest.mark.slow
def test_c5_gain_monotone_in_alignment(sweep, capsys):
    g = {rho: float(np.mean([sweep[rho, s] for s in SWEEP_SEEDS])) for rho in (0.0, 0.5, 1.0)}
    at_zero = [sweep[0.0, s] for s in SWEEP_SEEDS]
    p = float(stats.ttest_1samp(at_zero, 0.0).pvalue)
    ok = g[0.0] <= g[0.5] <= g[1.0] and p > 0.05
    _line(capsys, "C5 alignment", ok,
          f"gain rho=0 {g[0.0]:+.4f} (t-test p={p:.2f}), rho=0.5 {g[0.5]:+.4f}, rho=1 {g[1.0]:+.4f}")
    assert ok


def _expert_grad_norms(ds, seed):
    cfg = TrainConfig(iterations=ITERATIONS, seed=seed, head=CondHeadConfig(anneal_iters=ITERATIONS // 4))
    model = CondHeadModel(head_config_for(ds, cfg.head), seed=seed)
    data = stack_records(ds.train)
    batch = data.subset(batch_indices(data.cats, cfg.batch_size, seed, 0))
    loss, parts = compute_loss(model, batch, 0, ds.embeddings, ds.base_ids)
    loss.backward()
    norms = {k: np.linalg.norm(model.params[f"{k}.experts"].grad, axis=1) for k in ("box", "mask")}
    return model, parts["tau"], norms


def _mean_entropy(model, embeddings, tau):
    return float(np.mean([weight_entropy(generate_weights(b, embeddings, tau).data).mean()
                          for b in (model.box_bank, model.mask_bank)]))


@pytest.mark.slow
def test_c6_expert_balance_and_specialisation(rho1, capsys):
    ratios, drops = [], []
    for seed in CI_SEEDS:
        ds, trained = rho1[seed, "condhead"][:2]
        init, tau, norms = _expert_grad_norms(ds, seed)
        assert tau == 20.0
        ratios.append(max(float(n.max() / n.min()) for n in norms.values()))
        before = _mean_entropy(init, ds.embeddings, init.cfg.tau_start)
        after = _mean_entropy(trained, ds.embeddings, trained.cfg.tau_end)
        drops.append(before - after)
    ok = max(ratios) < 1.5 and min(drops) > 0
    _line(capsys, "C6 balance", ok,
          f"worst iteration-0 grad-norm ratio {max(ratios):.3f}, entropy drop min {min(drops):.3f} nats")
    assert ok


def test_c7_flops(capsys):
    cfg = paper_default_config()
    reports = [flop_count(cfg, n, 80) for n in (1, 100, 1000)]
    cond = {r["conditioning_total"] for r in reports}
    added = reports[0]["added_head_per_roi"]
    ratio = reports[0]["added_head_per_roi_ratio"]
    ok = len(cond) == 1 and all(r["added_head_per_roi"] == added for r in reports)
    _line(capsys, "C7 flops", ok,
          f"conditioning {cond.pop():,} FLOPs for 80 categories at any ROI count, "
          f"added per-ROI head cost {added:,} FLOPs ({100 * ratio:.2f}%)")
    assert ok


@pytest.mark.slow
def test_c8_family_structure(rho1, capsys):
    gaps = []
    for seed in CI_SEEDS:
        ds, model = rho1[seed, "condhead"][:2]
        wr = weight_report(model, ds.embeddings)
        fams = [c.family for c in ds.classes]
        gaps.append([np.subtract(*family_cosines(cos, fams)) for cos in (wr.box_cosine, wr.mask_cosine)])
    gaps = np.array(gaps)
    ok = bool(np.all(gaps.mean(axis=0) > 0))
    _line(capsys, "C8 families", ok,
          f"within-minus-cross cosine box {gaps[:, 0].mean():+.4f}, mask {gaps[:, 1].mean():+.4f} "
          f"(seeds positive: {int((gaps > 0).all(axis=1).sum())}/{len(CI_SEEDS)})")
    assert ok


def _pipeline(root, config):
    root.mkdir()
    assert cli_main(["gen", "--config", config, "--out", str(root / "d.jsonl")]) == 0
    for v in VARIANTS:
        assert cli_main(["train", "--config", config, "--data", str(root / "d.jsonl"), "--variant", v,
                         "--out", str(root / f"{v}.ckpt"), "--report", str(root / f"{v}.train")]) == 0
        assert cli_main(["eval", "--config", config, "--data", str(root / "d.jsonl"),
                         "--ckpt", str(root / f"{v}.ckpt"), "--out", str(root / f"{v}.eval")]) == 0


def test_c9_reproducibility(tmp_path, capsys):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({
        "format": "condhead-config-v1",
        "bench": {"n_base": 4, "n_novel": 2, "samples_per_class": 16, "eval_per_class": 6, "mask_size": 8,
                  "feat_dim": 20, "embed_dim": 12, "seed": 9},
        "train": {"iterations": 40, "batch_size": 16, "seed": 9},
        "head": {"n_experts": 3, "box_hidden": 12, "mask_hidden": 4, "gen_hidden": 12},
    }))
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline(a, str(config))
    _pipeline(b, str(config))
    capsys.readouterr()
    identical = []
    for f in sorted(a.iterdir()):
        x, y = f.read_bytes(), (b / f.name).read_bytes()
        if f.suffix == ".train":
            x, y = (json.loads(z) for z in (x, y))
            x.pop("wall_time"), y.pop("wall_time")
        identical.append(x == y)
    resumed = []
    for v in VARIANTS:
        part, done = tmp_path / f"{v}.part", tmp_path / f"{v}.resumed"
        assert cli_main(["train", "--config", str(config), "--data", str(a / "d.jsonl"), "--variant", v,
                         "--stop-at", "17", "--out", str(part)]) == 0
        assert cli_main(["train", "--config", str(config), "--data", str(a / "d.jsonl"), "--variant", v,
                         "--resume", str(part), "--out", str(done)]) == 0
        full, st_full = load_checkpoint(a / f"{v}.ckpt")
        back, st_back = load_checkpoint(done)
        same_state = all(np.array_equal(st_full["adam"][k][n], st_back["adam"][k][n])
                         for k in ("m", "v") for n in st_full["adam"][k])
        resumed.append(param_checksum(full) == param_checksum(back) and same_state)
    capsys.readouterr()
    ok = all(identical) and all(resumed)
    _line(capsys, "C9 reproducibility", ok,
          f"{sum(identical)}/{len(identical)} artifacts bit-identical, "
          f"{sum(resumed)}/{len(resumed)} variants resume to the uninterrupted result")
    assert ok
