import numpy as np
import pytest

from defectforge.errors import DimensionError, ParameterError
from defectforge.overlay import OverlayParams, ReferenceColor, apply_fracture_overlay, blend_reference_color


@pytest.fixture
def scene():
    rng = np.random.default_rng(7)
    img = rng.random((24, 24, 3))
    mask = np.zeros((24, 24), dtype=np.uint8)
    mask[6:18, 9:13] = 1
    mask[11, 2:20] = 1
    return img, mask


def test_empty_mask_is_identity(scene):
    img, _ = scene
    assert np.array_equal(apply_fracture_overlay(img, np.zeros((24, 24)), OverlayParams()), img)


def test_zero_alpha_is_identity(scene):
    img, mask = scene
    for mode in ("literal", "boundary_fade"):
        assert np.array_equal(apply_fracture_overlay(img, mask, OverlayParams(base_alpha=0.0, fade_mode=mode)), img)


def test_no_darken_no_shift_is_identity(scene):
    img, mask = scene
    params = OverlayParams(max_darken=1.0, max_color_shift=(0.0, 0.0, 0.0), base_alpha=0.7)
    assert np.allclose(apply_fracture_overlay(img, mask, params), img, atol=1e-15)


def test_outside_mask_bit_identical(scene):
    img, mask = scene
    out = apply_fracture_overlay(img, mask, OverlayParams(max_color_shift=(0.3, -0.2, 0.1)))
    assert np.array_equal(out[mask == 0], img[mask == 0])
    assert not np.array_equal(out[mask == 1], img[mask == 1])


def test_literal_formula_on_masked_pixels(scene):
    img, mask = scene
    p = OverlayParams(base_alpha=0.6, max_darken=0.3, max_color_shift=(0.05, 0.0, -0.02))
    out = apply_fracture_overlay(img, mask, p)
    # literal reading: strength is 1 on every masked pixel
    modified = img * 0.3 + np.array([0.05, 0.0, -0.02])
    expected = np.clip(0.4 * img + 0.6 * modified, 0, 1)
    m = mask == 1
    assert np.allclose(out[m], expected[m], atol=1e-15)


def test_boundary_fade_ramps_with_depth():
    img = np.full((21, 21, 3), 0.8)
    mask = np.zeros((21, 21), dtype=np.uint8)
    mask[3:18, 3:18] = 1
    out = apply_fracture_overlay(img, mask, OverlayParams(fade_mode="boundary_fade", edge_fade=5.0, max_color_shift=(0, 0, 0)))
    row = out[10, 3:11, 0]
    assert np.all(np.diff(row) <= 0)
    assert row[0] > row[-1]


def test_values_clipped_to_unit_range(scene):
    img, mask = scene
    out = apply_fracture_overlay(img, mask, OverlayParams(base_alpha=1.0, max_darken=1.0, max_color_shift=(5.0, -5.0, 0.0)))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_larger_max_darken_never_darkens(scene):
    img, mask = scene
    m = mask == 1
    prev = apply_fracture_overlay(img, mask, OverlayParams(max_darken=0.0, max_color_shift=(0, 0, 0)))
    for md in np.linspace(0.1, 1.0, 10):
        cur = apply_fracture_overlay(img, mask, OverlayParams(max_darken=md, max_color_shift=(0, 0, 0)))
        assert np.all(cur[m] >= prev[m])
        prev = cur


def test_parameter_errors(scene):
    img, mask = scene
    with pytest.raises(ParameterError):
        apply_fracture_overlay(img, mask, OverlayParams(edge_fade=0.0))
    with pytest.raises(ParameterError):
        OverlayParams(base_alpha=1.2)
    with pytest.raises(ParameterError):
        ReferenceColor(z=(0.2, 1.5, 0.0))
    with pytest.raises(DimensionError):
        apply_fracture_overlay(img, mask[:-1], OverlayParams())


def test_reference_blend_examples():
    img = np.full((4, 4, 3), 0.2)
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[1:3, 1:3] = 1
    z = (0.8, 0.8, 0.8)
    assert np.array_equal(blend_reference_color(img, mask, z, 0.0), img)
    full = blend_reference_color(img, mask, z, 1.0)
    assert np.array_equal(full[mask == 1], np.full((4, 3), 0.8))
    assert np.array_equal(full[mask == 0], img[mask == 0])
    half = blend_reference_color(img, mask, z, 0.5)
    assert np.allclose(half[mask == 1], 0.5, atol=1e-15)


def test_reference_roundtrip():
    ref = ReferenceColor(z=(0.1, 0.2, 0.3), strength=0.4)
    assert ReferenceColor.from_dict(ref.to_dict()) == ref
    p = OverlayParams(max_color_shift=(0.1, 0.0, 0.0))
    assert OverlayParams.from_dict(p.to_dict()) == p
