import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from latentcf.inversion import GradientMagnitudeDistance
from latentcf.metrics import (
    ID_THRESHOLD,
    QualityReport,
    attack_success_rate,
    esnle,
    id_retention,
    quality_report,
    total_variation,
)
from latentcf.models.toy import ToyEmbedder


def gradient_image(side=64):
    yy, xx = np.mgrid[0:side, 0:side] / (side - 1)
    return np.stack([0.2 + 0.6 * xx, 0.3 + 0.4 * yy, 0.5 + 0.2 * (xx + yy) / 2], axis=-1)


def test_tv_constant_image_is_zero():
    assert total_variation(np.full((16, 16, 3), 0.37)) == 0.0


def test_tv_hand_summed_edge():
    x = np.zeros((4, 4))
    x[:, 2:] = 1.0  # one unit vertical edge, crossed once per row
    # 4 rows x 1 jump each, no vertical differences, over 16 pixels
    assert total_variation(x, scale=1.0) == 4 / 16
    assert total_variation(x) == pytest.approx(1e4 * 4 / 16)


def test_tv_periodic_shift_invariance():
    # a pattern periodic in both axes with period dividing the size
    tile = np.array([[0.1, 0.7], [0.4, 0.9]])
    x = np.tile(tile, (8, 8))
    for s in [(2, 0), (0, 2), (4, 6)]:
        assert total_variation(np.roll(x, s, axis=(0, 1))) == pytest.approx(total_variation(x), rel=1e-12)


@given(hnp.arrays(np.float64, (6, 6, 3), elements=st.floats(0, 1)), st.floats(0, 1))
@settings(max_examples=60)
def test_tv_scales_linearly(x, alpha):
    assert total_variation(alpha * x) == pytest.approx(alpha * total_variation(x), rel=1e-9, abs=1e-9)


def test_tv_halves_with_amplitude():
    rng = np.random.default_rng(3)
    base = np.full((32, 32, 3), 0.5)
    noise = rng.uniform(-1, 1, base.shape)
    full = total_variation(base + 0.1 * noise)
    half = total_variation(base + 0.05 * noise)
    assert half / full == pytest.approx(0.5, rel=0.01)


def test_esnle_clean_gradient_image():
    assert esnle(gradient_image()) <= 0.005


def test_esnle_recovers_injected_sigma():
    clean = gradient_image()
    est = [esnle(clean + np.random.default_rng(s).normal(0, 0.05, clean.shape)) for s in range(20)]
    assert all(0.04 <= e <= 0.06 for e in est)


def test_esnle_shift_invariant(rng):
    x = gradient_image() + rng.normal(0, 0.03, (64, 64, 3))
    assert esnle(x + 0.25) == pytest.approx(esnle(x), rel=1e-6)


def test_esnle_non_negative_and_small_image_error(rng):
    assert esnle(rng.random((16, 16, 3))) >= 0.0
    with pytest.raises(ValueError):
        esnle(np.zeros((5, 5, 3)))


def _rec(verdict, status="success", target="real"):
    return {"verdicts": {"d": verdict}, "status": status, "target": target}


def test_asr_unanimity():
    assert attack_success_rate([_rec("real")] * 4, evaluator="d")["all"] == 1.0
    assert attack_success_rate([_rec("fake")] * 4, evaluator="d")["all"] == 0.0


def test_asr_reports_both_denominators():
    recs = [_rec("real"), _rec("real", "budget_exhausted"), _rec("fake", "budget_exhausted"), _rec("fake")]
    out = attack_success_rate(recs, evaluator="d")
    assert out["all"] == 0.5 and out["n_all"] == 4
    assert out["source_successful"] == 0.5 and out["n_source_successful"] == 2
    assert all(0 <= out[k] <= 1 for k in ("all", "source_successful"))


def test_asr_with_detector(detectors, world):
    items = world.sample(0, 5, seed=21)
    recs = [{"adversarial_image": it.image, "status": "success", "target": "real"} for it in items]
    assert attack_success_rate(recs, detectors[0])["all"] == 0.0
    with pytest.raises(ValueError):
        attack_success_rate([], detectors[0])


def test_id_retention_cases(rng):
    emb = ToyEmbedder(side=4, pool=1, projection=np.eye(48))
    xs = [rng.random((4, 4, 3)) for _ in range(5)]
    assert id_retention([(x, x) for x in xs], emb) == 1.0
    a = np.zeros((4, 4, 3))
    b = np.zeros((4, 4, 3))
    a[0, 0, 0] = 1.0
    b[3, 3, 1] = 1.0
    assert id_retention([(a, b)], emb) == 0.0
    with pytest.raises(ValueError):
        id_retention([], emb)


@given(st.floats(-1, 1))
def test_quality_report_threshold_invariant(sim):
    q = QualityReport(tv=1.0, esnle=0.0, perceptual=0.0, id_similarity=sim)
    assert q.id_retained == (sim >= ID_THRESHOLD)
    assert q.to_dict()["id_retained"] == q.id_retained


def test_quality_report_identity(world):
    x = world.sample(0, 1, seed=4)[0].image
    q = quality_report(x, x, world.embedder, GradientMagnitudeDistance())
    assert q.perceptual == 0.0 and q.id_similarity == pytest.approx(1.0) and q.id_retained
