import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnrecon.phantom import (PhantomSpec, RandomizationLimits, SourceSpec, geometric_radius,
                             load_spec, preset_phantom, render_phantom, sample_random_phantom,
                             save_spec, source_profile)
from dnrecon.tomo import pixel_centers


def test_empty_phantom_is_uniform():
    img = render_phantom(PhantomSpec(n=16, background=1.0))
    np.testing.assert_array_equal(img, np.ones((16, 16)))


def test_boundary_value_is_half_amplitude():
    # pixel (4, 5) of an 8-grid is centered at (1.5, -0.5): exactly r = R = 1
    src = SourceSpec(amplitude=0.8, center=(0.5, -0.5), semi_axes=(1.0, 1.0), diffusion=0.1)
    img = render_phantom(PhantomSpec(n=8, background=0.3, sources=(src,)))
    assert img[4, 5] == 0.3 + 0.8 / 2


def test_center_of_sharp_circular_source():
    src = SourceSpec(amplitude=1.0, center=(0.5, -0.5), semi_axes=(8, 8), diffusion=0.05)
    img = render_phantom(PhantomSpec(n=32, sources=(src,)))
    # pixel (16, 16) has center (0.5, -0.5): r = 0, exponent -1/0.05 = -20
    assert img[16, 16] == pytest.approx(1 / (math.exp(-20) + 1), abs=1e-15)
    assert img[16, 16] == pytest.approx(1.0, abs=1e-8)


def test_geometric_radius_cases():
    circle = SourceSpec(1, (0, 0), (3.5, 3.5), phi=0.7)
    for theta in np.linspace(0, 2 * np.pi, 9):
        assert geometric_radius(circle, theta) == pytest.approx(3.5)
    ell = SourceSpec(1, (0, 0), (10, 5), phi=0.4)
    assert geometric_radius(ell, 0.4) == pytest.approx(5.0)
    hand = SourceSpec(1, (0, 0), (10, 5), phi=0.0)
    # 50 / sqrt(100/2 + 25/2)
    assert geometric_radius(hand, math.pi / 4) == pytest.approx(50 / math.sqrt(62.5), abs=1e-12)
    assert geometric_radius(hand, math.pi / 4) == pytest.approx(6.3246, abs=1e-3)


@pytest.mark.parametrize("kw", [{"semi_axes": (0, 2)}, {"semi_axes": (2, -1)},
                                {"diffusion": 0.0}, {"diffusion": -0.1}])
def test_rejects_bad_source(kw):
    base = dict(amplitude=1, center=(0, 0), semi_axes=(2, 2), diffusion=0.1)
    base.update(kw)
    with pytest.raises(ValueError):
        SourceSpec(**base)


def test_negative_sum_is_clamped():
    cold = SourceSpec(-1.0, (0, 0), (5, 5), diffusion=0.05)
    img = render_phantom(PhantomSpec(n=16, background=0.2, sources=(cold,)))
    assert img.min() == 0.0
    assert img[0, 0] > 0.19


def test_far_field_tail_bound():
    d = 0.05
    src = SourceSpec(1.0, (0, 0), (4, 6), phi=0.3, diffusion=d)
    n = 64
    x, y = pixel_centers(n)
    r, theta = np.hypot(x, y), np.arctan2(y, x)
    far = r >= geometric_radius(src, theta) * (1 + 10 * d)
    assert far.sum() > 1000
    assert source_profile(src, n)[far].max() < 5e-5


@settings(max_examples=25, deadline=None)
@given(phi=st.floats(0, math.pi), u=st.floats(1, 10), v=st.floats(1, 10),
       cx=st.floats(-5, 5), cy=st.floats(-5, 5))
def test_half_turn_rotation_is_identity(phi, u, v, cx, cy):
    a = SourceSpec(1.0, (cx, cy), (u, v), phi=phi, diffusion=0.07)
    b = SourceSpec(1.0, (cx, cy), (u, v), phi=phi + math.pi, diffusion=0.07)
    np.testing.assert_allclose(source_profile(a, 24), source_profile(b, 24), atol=1e-12)


def test_circular_roi_area():
    r = 10.0
    spec = PhantomSpec(n=64, sources=(SourceSpec(1, (0.3, 0.2), (r, r)),))
    area = next(iter(spec.roi_masks().values())).sum()
    assert abs(area - math.pi * r * r) <= 2 * math.pi * r


def test_roi_mask_matches_interior_definition():
    src = SourceSpec(1, (3, -2), (6, 9), phi=1.1, diffusion=0.1)
    spec = PhantomSpec(n=32, sources=(src,))
    x, y = pixel_centers(32)
    dx, dy = x - 3, y + 2
    expected = np.hypot(dx, dy) < geometric_radius(src, np.arctan2(dy, dx))
    np.testing.assert_array_equal(spec.roi_masks()["source0"], expected)


def test_background_mask_keeps_margin():
    spec = preset_phantom("A", 64)
    bg = spec.background_mask()
    for mask in spec.roi_masks().values():
        ys, xs = np.nonzero(mask)
        by, bx = np.nonzero(bg)
        dist = np.sqrt((ys[:, None] - by[None]) ** 2 + (xs[:, None] - bx[None]) ** 2)
        assert dist.min() > 2


def test_random_phantom_deterministic_and_in_fov():
    limits = RandomizationLimits()
    a, b = sample_random_phantom(limits, 5, 64), sample_random_phantom(limits, 5, 64)
    assert a == b
    for seed in range(50):
        spec = sample_random_phantom(limits, seed, 64)
        assert 1 <= len(spec.sources) <= 5
        for s in spec.sources:
            assert math.hypot(*s.center) + max(s.semi_axes) <= 32 + 1e-9
            assert -0.5 <= s.amplitude <= 1.0
            assert 0.02 <= s.diffusion <= 0.15
        assert render_phantom(spec).min() >= 0


def test_degenerate_limits_give_unique_spec():
    limits = RandomizationLimits(k_range=(2, 2), background_range=(0.1, 0.1),
                                 amplitude_range=(0.5, 0.5), center_range=(0.2, 0.2),
                                 axes_range=(0.1, 0.1), phi_range=(0.3, 0.3),
                                 diffusion_range=(0.05, 0.05))
    specs = [sample_random_phantom(limits, s, 32) for s in (0, 1, 99)]
    assert specs[0].sources == specs[1].sources == specs[2].sources
    assert specs[0].sources[0].center == (3.2, 3.2)


def test_impossible_fit_raises():
    limits = RandomizationLimits(center_range=(0.9, 0.9), axes_range=(0.3, 0.3))
    with pytest.raises(RuntimeError):
        sample_random_phantom(limits, 0, 32)


def test_invalid_limits():
    with pytest.raises(ValueError):
        RandomizationLimits(amplitude_range=(1.0, -1.0))


def test_source_count_histogram_is_uniform():
    limits = RandomizationLimits(k_range=(1, 5))
    counts = np.bincount([len(sample_random_phantom(limits, s, 32).sources)
                          for s in range(1000)], minlength=6)[1:]
    p = 0.2
    sigma = math.sqrt(1000 * p * (1 - p))
    assert np.all(np.abs(counts - 1000 * p) <= 3 * sigma)


def test_preset_a():
    spec = preset_phantom("A", 128)
    assert len(spec.sources) == 4
    assert sum(s.amplitude < 0 for s in spec.sources) == 1
    hot = [s for s in spec.sources if s.amplitude > 0]
    assert len({s.semi_axes for s in hot}) == 3
    assert len({s.amplitude for s in hot}) == 3


def test_preset_b():
    spec = preset_phantom("B", 128)
    assert len(spec.sources) == 2
    hot, cold = sorted(spec.sources, key=lambda s: -s.amplitude)
    assert hot.amplitude == -cold.amplitude > 0
    assert hot.semi_axes == cold.semi_axes
    masks = list(spec.roi_masks().values())
    assert masks[0].sum() == masks[1].sum()
    assert spec.background > preset_phantom("A", 128).background


def test_preset_shepp_logan():
    spec = preset_phantom("shepp_logan", 64)
    assert len(spec.sources) == 10
    img = render_phantom(spec)
    assert img.min() >= 0 and img.max() <= 1
    assert img.max() == 1.0
    # brain matter level of the modified table
    assert img[44, 32] == pytest.approx(0.2)
    assert spec.background_mask().sum() > 200


def test_unknown_preset():
    with pytest.raises(ValueError):
        preset_phantom("C", 64)


def test_spec_roundtrip(tmp_path):
    spec = sample_random_phantom(RandomizationLimits(), 3, 48)
    save_spec(spec, tmp_path / "spec.json")
    assert load_spec(tmp_path / "spec.json") == spec
