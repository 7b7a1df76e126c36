import time

import pytest

from condhead import autodiff as ad
from condhead.verify import TOLERANCE, run_suite, tiny_config


@pytest.fixture(scope="module")
def suite():
    t0 = time.perf_counter()
    results = run_suite(0)
    return results, time.perf_counter() - t0


def test_suite_covers_every_path_and_passes(suite):
    results, seconds = suite
    assert len(results) >= 8
    assert len({r.name for r in results}) == len(results)
    for r in results:
        assert r.passed and r.error < TOLERANCE, (r.name, r.error)
    assert seconds < 60.0


def test_suite_is_seed_robust():
    assert all(r.passed for r in run_suite(7))


@pytest.mark.parametrize("op, path", [
    ("softmax_temp", "temperature softmax"),
    ("smooth_l1", "smooth-L1 box loss"),
    ("bce_logits", "BCE mask loss"),
    ("unfold3x3", "mask expert (3conv)"),
    ("aggregate", "parameter aggregation"),
])
def test_injected_sign_flip_is_caught(op, path):
    with ad.sign_flip(op):
        results = {r.name: r for r in run_suite(0)}
    assert not results[path].passed
    assert not ad._SIGN_FLIPS


def test_tiny_config_overrides():
    cfg = tiny_config(n_experts=2)
    assert cfg.n_experts == 2 and cfg.embed_dim == tiny_config().embed_dim
