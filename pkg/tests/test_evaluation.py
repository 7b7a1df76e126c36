import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condhead.autodiff import Tensor
from condhead.errors import ConfigurationError, ContractViolation
from condhead.evaluation import (
    EvalReport,
    compare,
    compare_reports,
    evaluate,
    evaluate_gate,
    eval_fingerprint,
    family_cosines,
    format_comparison,
    format_report,
    parse_gate,
    sample_metrics,
    weight_entropy,
    weight_report,
)
from condhead.geometry import Box, encode_deltas
from condhead.heads import CondHeadConfig
from condhead.models import build_model
from condhead.synthbench import BenchmarkSpec, SampleRecord, gen_dataset
from condhead.train import head_config_for

HEAD = CondHeadConfig(n_experts=3, box_hidden=8, mask_hidden=2, gen_hidden=8)


@pytest.fixture(scope="module")
def ds():
    return gen_dataset(BenchmarkSpec(n_base=3, n_novel=2, samples_per_class=4, eval_per_class=5,
                                     mask_size=6, feat_dim=20, embed_dim=8, seed=6))


class Oracle:
    """Looks up the true targets of each region by its feature vector."""
    variant = "oracle"

    def __init__(self, records):
        self.table = {r.f.tobytes(): r for r in records}

    def forward(self, categories, f, v, embeddings, tau):
        rows = [self.table[x.tobytes()] for x in np.asarray(f)]
        deltas = np.array([list(encode_deltas(r.p, r.b)) for r in rows])
        logits = np.stack([np.where(r.m, 40.0, -40.0) for r in rows])
        return Tensor(deltas), Tensor(logits)


class Zero:
    variant = "zero"

    def forward(self, categories, f, v, embeddings, tau):
        n, s = len(f), np.asarray(v).shape[-1]
        return Tensor(np.zeros((n, 4))), Tensor(np.zeros((n, s, s)))


def test_oracle_scores_one(ds):
    report = evaluate(Oracle(ds.eval), ds)
    for split in ("base", "novel", "all"):
        for m in ("box_iou", "box_ap50", "mask_iou", "mask_ap50"):
            assert report.metric(split, m) == pytest.approx(1.0, abs=1e-12)
    assert report.flops is None and report.variant == "oracle"


def test_zero_model_on_zero_jitter_data():
    data = gen_dataset(BenchmarkSpec(n_base=2, n_novel=1, samples_per_class=1, eval_per_class=4, mask_size=6,
                                     feat_dim=20, embed_dim=8, center_jitter=0.0, size_jitter=0.0))
    r = evaluate(Zero(), data)
    assert r.metric("all", "box_iou") == pytest.approx(1.0, abs=1e-12) and r.metric("all", "box_ap50") == 1.0
    assert r.metric("all", "mask_iou") == 0.0 and r.metric("all", "mask_ap50") == 0.0


def _known_iou_set():
    b = Box(0.0, 0.0, 1.0, 1.0)
    recs = []
    for i, w in enumerate((0.4, 0.6, 0.9)):
        m = np.zeros((4, 4), bool)
        m[:, : i + 1] = True
        recs.append(SampleRecord(p=Box(0.0, 0.0, w, 1.0), f=np.full(20, float(i)), v=np.zeros((4, 4, 4)),
                                 b=b, m=m, c=0))
    return recs


def test_hand_built_ap_counting(ds):
    recs = _known_iou_set()
    per = sample_metrics(Zero(), recs, ds.embeddings)
    np.testing.assert_allclose(per["box_iou"], [0.4, 0.6, 0.9], rtol=1e-12)
    r = evaluate(Zero(), ds, records=recs)
    assert r.metric("all", "box_ap50") == pytest.approx(2 / 3)
    assert r.metric("all", "box_iou") == pytest.approx(19 / 30)


def test_all_split_is_weighted_mean(ds):
    model = build_model("condhead", head_config_for(ds, HEAD), seed=1)
    r = evaluate(model, ds)
    nb, nn = r.splits["base"]["n"], r.splits["novel"]["n"]
    for m in ("box_iou", "box_ap50", "mask_iou", "mask_ap50"):
        combined = (nb * r.metric("base", m) + nn * r.metric("novel", m)) / (nb + nn)
        assert abs(r.metric("all", m) - combined) < 1e-12
        assert 0.0 <= r.metric("all", m) <= 1.0
    assert [c["category"] for c in r.per_category] == list(range(5))
    assert r.flops["n_rois"] == len(ds.eval)


@settings(max_examples=15, deadline=None)
@given(st.randoms(use_true_random=False))
def test_evaluation_order_independent(ds, random):
    model = build_model("condhead", head_config_for(ds, HEAD), seed=2)
    base = evaluate(model, ds)
    shuffled = list(ds.eval)
    random.shuffle(shuffled)
    r = evaluate(model, ds, records=shuffled)
    assert r.splits == base.splits and r.per_category == base.per_category
    assert r.fingerprint == base.fingerprint == eval_fingerprint(shuffled)


def test_evaluate_errors(ds):
    model = build_model("agnostic", head_config_for(ds, HEAD))
    with pytest.raises(ContractViolation):
        evaluate(model, ds, records=[])
    with pytest.raises(ConfigurationError):
        evaluate(model, ds, variant="condhead")
    wrong = build_model("agnostic", CondHeadConfig(feat_dim=7, box_hidden=4, mask_hidden=2))
    with pytest.raises(ConfigurationError):
        evaluate(wrong, ds)


def test_report_round_trip_and_table(ds, tmp_path):
    r = evaluate(build_model("agnostic", head_config_for(ds, HEAD)), ds)
    r.save(tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["format"] == "condhead-eval-v1"
    assert EvalReport.from_dict(doc) == r
    text = format_report(r)
    assert "novel" in text and "box_ap50" in text


def test_compare_self_has_zero_deltas(ds):
    model = build_model("condhead", head_config_for(ds, HEAD), seed=1)
    cmp = compare([model], ds, baseline="condhead")
    for split in cmp.deltas["condhead"].values():
        for d in split.values():
            assert d["mean"] == 0.0 and d["std"] == 0.0


def test_compare_oracle_vs_zero(ds):
    oracle, zero = evaluate(Oracle(ds.eval), ds), evaluate(Zero(), ds)
    cmp = compare_reports([oracle, zero], baseline="zero")
    for m in ("box_iou", "mask_iou", "box_ap50"):
        assert cmp.deltas["oracle"]["novel"][m]["mean"] == oracle.metric("novel", m) - zero.metric("novel", m)
    assert cmp.deltas["zero"]["novel"]["box_iou"]["mean"] == 0.0
    assert "oracle" in format_comparison(cmp)


def _report(variant, seed, value, fingerprint="x"):
    splits = {s: {"n": 1, "box_iou": value, "box_ap50": value, "mask_iou": value, "mask_ap50": value}
              for s in ("base", "novel", "all")}
    return EvalReport(variant, seed, splits, [], None, fingerprint)


def test_compare_statistics_over_seeds():
    base = [0.50, 0.52, 0.49, 0.55, 0.51]
    cand = [0.56, 0.57, 0.50, 0.61, 0.58]
    reports = [_report("agnostic", s, v) for s, v in enumerate(base)]
    reports += [_report("condhead", s, v) for s, v in enumerate(cand)]
    cmp = compare_reports(reports)
    m = cmp.metrics["condhead"]["novel"]["box_iou"]
    assert m["mean"] == pytest.approx(sum(cand) / 5, abs=1e-15)
    mean = sum(cand) / 5
    assert m["std"] == pytest.approx((sum((x - mean) ** 2 for x in cand) / 4) ** 0.5, rel=1e-12)
    diffs = [c - b for c, b in zip(cand, base)]
    dm = sum(diffs) / 5
    d = cmp.deltas["condhead"]["novel"]["box_iou"]
    assert d["mean"] == pytest.approx(dm, abs=1e-12)
    assert d["std"] == pytest.approx((sum((x - dm) ** 2 for x in diffs) / 4) ** 0.5, rel=1e-12)
    unpaired = compare_reports(reports[:5] + [_report("condhead", 9, 0.6)])
    assert unpaired.deltas["condhead"]["novel"]["box_iou"]["std"] is None


def test_compare_rejects_mixed_eval_sets():
    with pytest.raises(ContractViolation):
        compare_reports([_report("a", 0, 0.5, "x"), _report("b", 0, 0.5, "y")])
    with pytest.raises(ContractViolation):
        compare_reports([])


def test_gates():
    cmp = compare_reports([_report("agnostic", 0, 0.50), _report("condhead", 0, 0.53)])
    ok, lhs, rhs = evaluate_gate("condhead.novel.box_iou - agnostic.novel.box_iou >= 0.02", cmp)
    assert ok and lhs == pytest.approx(0.03) and rhs == 0.02
    assert not evaluate_gate("condhead.novel.box_iou - agnostic.novel.box_iou >= 0.05", cmp)[0]
    assert evaluate_gate("-agnostic.base.mask_iou < 2 * condhead.all.mask_ap50", cmp)[0]
    for bad in ["condhead.novel.box_iou >=", "import os", "a.b >= 1", "1 < 2 < 3",
                "condhead.novel.box_iou / 2 > 0", "f(1) > 0", "'x' == 'x'"]:
        with pytest.raises(ConfigurationError):
            parse_gate(bad)
    with pytest.raises(ConfigurationError):
        evaluate_gate("classwise.novel.box_iou > 0", cmp)


# ---------------------------------------------------------------------------
# aggregation weights
# ---------------------------------------------------------------------------
def test_weight_report_structure(ds):
    model = build_model("condhead", head_config_for(ds, HEAD), seed=3)
    emb = np.vstack([ds.embeddings, ds.embeddings[:1]])
    r = weight_report(model, emb)
    assert r.box.shape == (len(emb), 3)
    np.testing.assert_allclose(r.box.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(r.box[0], r.box[-1])
    assert r.box_cosine[0, -1] == pytest.approx(1.0, abs=1e-12)
    for cos in (r.box_cosine, r.mask_cosine):
        assert np.max(np.abs(cos - cos.T)) <= 1e-12
        assert np.max(np.abs(np.diag(cos) - 1.0)) <= 1e-12
    assert json.loads(json.dumps(r.to_dict()))["format"] == "condhead-weights-v1"


def test_weight_report_single_expert_and_errors(ds):
    model = build_model("condhead", head_config_for(ds, CondHeadConfig(n_experts=1, box_hidden=4, mask_hidden=2,
                                                                        gen_hidden=4)))
    r = weight_report(model, ds.embeddings, categories=[0, 2])
    np.testing.assert_array_equal(r.box, np.ones((2, 1)))
    np.testing.assert_array_equal(r.mask_cosine, np.ones((2, 2)))
    with pytest.raises(ConfigurationError):
        weight_report(build_model("agnostic", head_config_for(ds, HEAD)), ds.embeddings)


def test_entropy_and_family_cosines():
    np.testing.assert_allclose(weight_entropy([[0.5, 0.5], [1.0, 0.0]]), [np.log(2), 0.0])
    cos = np.array([[1, 0.9, 0.1], [0.9, 1, 0.3], [0.1, 0.3, 1]])
    within, cross = family_cosines(cos, ["ring", "ring", "bar"])
    assert within == pytest.approx(0.9) and cross == pytest.approx(0.2)
