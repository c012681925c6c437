import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from latentcf.core import (
    AttackConfig,
    AttackResult,
    Label,
    LatentCode,
    LevelMask,
    PartitionError,
    ShapeError,
    Status,
    check_image,
    derive_seed,
    image_to_uint8,
    label_to_scalar,
    level_slices,
    load_png,
    predefined_mask,
    save_png,
    scalar_to_label,
    sidecar_path,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
latent_arrays = st.integers(1, 6).flatmap(
    lambda k: st.integers(1, 5).flatmap(lambda d: hnp.arrays(np.float64, (k, d), elements=finite))
)


def test_predefined_mask_s_18_covers_first_six():
    m = predefined_mask("S", 18)
    assert m.flags == tuple([True] * 6 + [False] * 12)


def test_predefined_mask_full_18():
    assert predefined_mask("Full", 18).flags == (True,) * 18


def test_predefined_mask_m_6_is_positions_3_and_4():
    # 1-based positions 3-4 of six styles
    assert predefined_mask("M", 6).flags == (False, False, True, True, False, False)


def test_predefined_mask_rejects_non_multiple_of_three():
    with pytest.raises(PartitionError):
        predefined_mask("S", 10)
    with pytest.raises(ValueError):
        predefined_mask("X", 18)


@given(st.integers(1, 40).map(lambda t: 3 * t))
def test_levels_partition_full(k):
    masks = [predefined_mask(level, k).as_array() for level in "SMD"]
    total = sum(m.astype(int) for m in masks)
    assert np.all(total == 1)
    assert np.array_equal(total.astype(bool), predefined_mask("Full", k).as_array())


def test_level_slices_18():
    s = level_slices(18)
    assert (s["S"], s["M"], s["D"]) == (slice(0, 6), slice(6, 12), slice(12, 18))


def test_label_encoding():
    assert label_to_scalar(Label.REAL) == 0.0
    assert label_to_scalar("fake") == 1.0
    assert scalar_to_label(0.49) is Label.REAL
    assert scalar_to_label(0.5) is Label.REAL
    assert scalar_to_label(0.5000001) is Label.FAKE
    for lab in Label:
        assert scalar_to_label(label_to_scalar(lab)) is lab


@given(latent_arrays, st.floats(-10, 10))
def test_latent_arithmetic_value_semantics(arr, alpha):
    w = LatentCode(arr)
    before = w.codes.copy()
    for out in (w + w, w - w, w * alpha, alpha * w, -w, w.sign()):
        assert out.shape == w.shape
    assert np.array_equal(w.codes, before)
    with pytest.raises(ValueError):
        w.codes[0, 0] = 1.0


def test_latent_rejects_bad_input():
    with pytest.raises(ShapeError):
        LatentCode(np.zeros(3))
    with pytest.raises(ValueError):
        LatentCode([[np.nan]])
    with pytest.raises(ShapeError):
        LatentCode.zeros(2, 2) + LatentCode.zeros(2, 3)


@given(latent_arrays)
def test_bytes_round_trip_bit_identical(arr):
    w = LatentCode(arr).quantized()
    back = LatentCode.from_bytes(w.to_bytes(), w.num_styles, w.dim)
    assert back == w
    assert back.to_bytes() == w.to_bytes()


def test_save_load_with_sidecar(tmp_path):
    w = LatentCode(np.arange(12, dtype=float).reshape(3, 4) / 7).quantized()
    p = tmp_path / "w.f32"
    w.save(p)
    assert p.stat().st_size == 12 * 4
    meta = json.loads(sidecar_path(p).read_text())
    assert meta["num_styles"] == 3 and meta["dim"] == 4
    assert LatentCode.load(p) == w
    # little-endian float32 layout
    assert np.array_equal(np.frombuffer(p.read_bytes(), "<f4").reshape(3, 4), w.codes)


def test_from_bytes_size_mismatch():
    with pytest.raises(ShapeError):
        LatentCode.from_bytes(b"\x00" * 8, 3, 1)


def test_image_uint8_round_half_up():
    x = np.array([0.5 / 255, 1.5 / 255, 1.0, 1.2, -0.1]).reshape(1, 5, 1)
    assert image_to_uint8(x).ravel().tolist() == [1, 2, 255, 255, 0]


def test_png_round_trip(tmp_path, rng):
    x = rng.random((8, 8, 3))
    save_png(tmp_path / "x.png", x, {"k": "v"})
    y = load_png(tmp_path / "x.png")
    assert np.abs(x - y).max() <= 0.5 / 255 + 1e-12


def test_check_image_shape():
    with pytest.raises(ShapeError):
        check_image(np.zeros((4, 5, 3)))
    with pytest.raises(ShapeError):
        check_image(np.zeros((4, 4, 3)), side=5)


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(-0.1, 10)
    with pytest.raises(ValueError):
        AttackConfig(0.1, 0)
    assert AttackConfig(0.0, 1, target="fake").target is Label.FAKE


def test_mask_requires_one_flag():
    with pytest.raises(ValueError):
        LevelMask(())


def test_attack_result_summary():
    r = AttackResult(np.zeros((1, 1, 3)), 2, 0.3, Status.SUCCESS, [0.6, 0.3])
    s = r.summary()
    assert s["status"] == "success" and s["queries_used"] == 2 and r.success


def test_derive_seed_stable():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(2, "a")
    assert 0 <= derive_seed(0, "x") < 2**64


@settings(max_examples=50)
@given(st.floats(0, 1))
def test_scalar_threshold_is_half(s):
    assert (scalar_to_label(s) is Label.FAKE) == (s > 0.5)
    assert not math.isnan(s)
