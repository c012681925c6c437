import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from latentcf.core import ShapeError
from latentcf.harness import AttackSettings, run_attack_job
from latentcf.models import BackendError, NegatedDetector, gradcam_activations
from latentcf.models.toy import LogisticDetector
from latentcf.viz import (
    HeatMap,
    comparison_grid,
    gradcam_heat,
    gradcam_map,
    gradcam_raw,
    grid_shape,
    normalize,
    residual_map,
    residual_mass_in_box,
    save_grid,
    upsample_bilinear,
)

# 8-bit images and dyadic shifts keep the arithmetic exact
images6 = hnp.arrays(np.int64, (6, 6, 3), elements=st.integers(0, 200)).map(lambda a: a / 256.0)


def test_residual_identity_is_zero(rng):
    x = rng.random((8, 8, 3))
    assert np.all(residual_map(x, x).values == 0)


def test_residual_single_pixel(rng):
    x = rng.random((8, 8, 3)) * 0.5
    y = x.copy()
    y[2, 5, 1] += 0.3
    h = residual_map(x, y).values
    assert h[2, 5] == 1.0 and h.sum() == 1.0


def test_residual_shape_mismatch():
    with pytest.raises(ShapeError):
        residual_map(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))


@given(images6, images6, st.integers(-12, 12).map(lambda k: k / 64.0))
@settings(max_examples=60)
def test_residual_constant_shift_invariant(a, b, c):
    np.testing.assert_allclose(residual_map(a + c, b + c).values, residual_map(a, b).values, atol=0)


@given(hnp.arrays(np.float64, (5, 7), elements=st.floats(-5, 5)))
def test_normalize_range(v):
    n = normalize(v)
    if np.ptp(v) > 0:
        assert n.min() == 0.0 and n.max() == pytest.approx(1.0)
    else:
        assert np.all(n == 0)


def test_heatmap_save_records_colormap(tmp_path):
    HeatMap(np.linspace(0, 1, 16).reshape(4, 4)).save(tmp_path / "h.png")
    assert Image.open(tmp_path / "h.png").text["colormap"] == "viridis"


def test_gradcam_single_channel_definition(rng):
    acts = rng.normal(size=(1, 6, 6))
    grads = np.full((1, 6, 6), 0.7)
    got = normalize(upsample_bilinear(gradcam_raw(acts, grads), (6, 6)))
    np.testing.assert_allclose(got, normalize(np.maximum(acts[0], 0)), atol=1e-12)


def test_gradcam_rectified_and_normalized(detectors, world):
    x = world.sample(0, 1, seed=9)[0].image
    assert np.all(gradcam_heat(detectors[0], x) >= 0)
    m = gradcam_map(detectors[0], x)
    assert m.values.shape == (24, 24) and m.values.min() == 0.0 and m.values.max() == pytest.approx(1.0)
    with pytest.raises(BackendError):
        gradcam_map(LogisticDetector(), np.zeros((1, 1, 3)))


def test_gradcam_negated_detector_is_complementary(detectors, world):
    d = detectors[1]
    x = world.sample(0, 1, seed=9)[0].image
    layer = d.layers[-1]
    acts, grads = gradcam_activations(d, x, layer)
    n_acts, n_grads = gradcam_activations(NegatedDetector(d), x, layer)
    pos, neg = gradcam_raw(acts, grads), gradcam_raw(n_acts, n_grads)
    assert not np.any((pos > 0) & (neg > 0))
    signed = np.tensordot(grads.mean(axis=(1, 2)), acts, axes=1)
    np.testing.assert_allclose(pos - neg, signed, atol=1e-12)


def test_gradcam_peaks_in_artifact_and_drops_after_attack(pipeline, world):
    r0, r1, c0, c1 = world.artifact_box
    items = world.sample(0, 25, seed=55, prefix="cam-")
    peak_in, reduced, n, total = 0, 0, 0, 0
    heat_before, heat_after = [], []
    for name, d in pipeline.detectors.items():
        for it in items:
            before = gradcam_heat(d, it.image)
            r, c = np.unravel_index(np.argmax(before), before.shape)
            peak_in += r0 <= r < r1 and c0 <= c < c1
            total += 1
            rec, adv = run_attack_job(pipeline, it.image_id, it.image, name, "latent", AttackSettings())
            if rec.status == "success":
                n += 1
                after = gradcam_heat(d, adv)
                heat_before.append(before[r0:r1, c0:c1].sum())
                heat_after.append(after[r0:r1, c0:c1].sum())
                reduced += heat_after[-1] < heat_before[-1]
    assert peak_in / total >= 0.8
    assert n > 0 and reduced / n >= 0.8
    assert np.mean(heat_after) < np.mean(heat_before)


def test_residual_mass_in_box_on_attack(pipeline, world):
    it = world.sample(0, 1, seed=12, prefix="res-")[0]
    rec, adv = run_attack_job(pipeline, it.image_id, it.image, "det0", "latent", AttackSettings())
    assert rec.status == "success"
    share = residual_mass_in_box(residual_map(it.image, adv), world.artifact_box)
    assert 0.0 <= share <= 1.0
    assert residual_mass_in_box(HeatMap(np.zeros((4, 4))), (0, 2, 0, 2)) == 0.0


def test_grid_dimensions(rng):
    side, pad = 8, 10
    rows = [(rng.random((side, side, 3)), [rng.random((side, side, 3)) for _ in range(3)]) for _ in range(2)]
    g = comparison_grid(rows, ["a", "b", "c"], pad=pad)
    assert g.shape[:2] == grid_shape(2, 3, side, pad) == (2 * side + pad, 4 * side + pad)
    one = comparison_grid([(rows[0][0], [rows[0][1][0]])], ["a"], pad=0)
    assert one.shape[:2] == (side, 2 * side)
    np.testing.assert_array_equal(one[:, :side], rows[0][0])


def test_grid_errors(rng):
    with pytest.raises(ValueError):
        comparison_grid([])
    with pytest.raises(ShapeError):
        comparison_grid([(np.zeros((8, 8, 3)), [np.zeros((6, 6, 3))])])
    with pytest.raises(ShapeError):
        comparison_grid([(np.zeros((8, 8, 3)), [np.zeros((8, 8, 3))]), (np.zeros((8, 8, 3)), [])])


def test_grid_png_byte_identical(tmp_path, rng):
    rows = [(rng.random((16, 16, 3)), [rng.random((16, 16, 3)) for _ in range(2)])]
    for name in ("a.png", "b.png"):
        save_grid(tmp_path / name, comparison_grid(rows, ["fgsm", "latent"], pad=12), ["fgsm", "latent"])
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert Image.open(tmp_path / "a.png").text["columns"] == "original,fgsm,latent"
