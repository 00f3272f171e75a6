from itertools import combinations

import numpy as np
import pytest
from scipy import ndimage, stats

from distort_ssl.core_types import BBox, DistortionType, ValidationError, make_rng, paste
from distort_ssl.dataset import load_sample, read_manifest
from distort_ssl.distortions import (
    DistortionConfig,
    OverlapPolicy,
    PlacementError,
    apply_distortion,
    distort_dataset,
    distort_sample,
    plan_and_distort,
    sample_plan,
)
from distort_ssl.metrics import psnr, ssim
from distort_ssl.phantom import PhantomParams, generate_phantom

DIMS = (320, 320)


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(4).image


def test_k_distribution_uniform():
    rng = make_rng(0, 1)
    cfg = DistortionConfig()
    ks = [len(sample_plan(rng, cfg, DIMS)) for _ in range(10_000)]
    counts = np.bincount(ks, minlength=8)[3:8]
    assert sum(counts) == 10_000
    assert stats.chisquare(counts).pvalue > 0.001


def test_plan_box_sides_and_disjointness():
    rng = make_rng(0, 2)
    cfg = DistortionConfig()
    for _ in range(300):
        plan = sample_plan(rng, cfg, DIMS)
        for it in plan.items:
            assert 50 <= it.box.width <= 80 and 50 <= it.box.height <= 80
            it.box.check_within(*DIMS)
        for a, b in combinations(plan.items, 2):
            assert not (a.box.x0 < b.box.x1 and b.box.x0 < a.box.x1 and a.box.y0 < b.box.y1 and b.box.y0 < a.box.y1)


def test_type_distribution_roughly_uniform():
    rng = make_rng(0, 3)
    types = [int(it.dtype) for _ in range(3000) for it in sample_plan(rng, DistortionConfig(), DIMS).items]
    counts = np.bincount(types, minlength=7)[1:]
    assert stats.chisquare(counts).pvalue > 0.001


def test_degenerate_single_full_box():
    cfg = DistortionConfig(count_range=(1, 1), size_range=(64, 64))
    plan = sample_plan(make_rng(1, 1), cfg, (64, 64))
    assert len(plan) == 1 and plan.items[0].box == BBox(0, 0, 64, 64)


def test_placement_impossible_names_dims():
    cfg = DistortionConfig(count_range=(5, 5), size_range=(80, 80))
    with pytest.raises(PlacementError, match="128x128"):
        sample_plan(make_rng(0, 0), cfg, (128, 128))


def test_allow_overlap_policy_places_when_reject_cannot():
    cfg = DistortionConfig(count_range=(5, 5), size_range=(80, 80), overlap_policy=OverlapPolicy.ALLOW)
    assert len(sample_plan(make_rng(0, 0), cfg, (128, 128))) == 5


def test_config_violations():
    v = DistortionConfig(count_range=(7, 3), size_range=(50, 400), blur_sigma=(0.0, 1.0)).violations(DIMS)
    joined = " ".join(v)
    assert "count_range" in joined and "size_range" in joined and "blur_sigma" in joined


# per-type behaviour

BOX = BBox(100, 120, 160, 180)


def _outside_untouched(a, b, box):
    m = box.mask(*a.shape)
    return np.array_equal(a[~m], b[~m])


def test_blank(phantom):
    out, _ = apply_distortion(phantom, BOX, DistortionType.BLANK, {}, make_rng(0, 0))
    assert np.all(out[BOX.slices] == 0)
    assert _outside_untouched(phantom, out, BOX)


def test_blur_matches_full_image_filter(phantom):
    out, _ = apply_distortion(phantom, BOX, DistortionType.BLURRED, {"blur_sigma": 2.0}, make_rng(0, 0))
    ref = ndimage.gaussian_filter(phantom, 2.0, mode="reflect", truncate=4.0)
    np.testing.assert_allclose(out[BOX.slices], ref[BOX.slices], atol=1e-12)
    assert _outside_untouched(phantom, out, BOX)


def test_mislocate_copies_other_region(phantom):
    out, used = apply_distortion(phantom, BOX, DistortionType.MISLOCATE, {}, make_rng(0, 5))
    sx, sy = int(used["src_x0"]), int(used["src_y0"])
    assert (sx, sy) != (BOX.x0, BOX.y0)
    np.testing.assert_array_equal(out[BOX.slices], phantom[sy : sy + BOX.height, sx : sx + BOX.width])


def test_mislocate_small_image_falls_back():
    img = np.arange(16, dtype=float).reshape(4, 4) / 16
    box = BBox(0, 0, 3, 3)
    out, used = apply_distortion(img, box, DistortionType.MISLOCATE, {}, make_rng(0, 0))
    assert (used["src_x0"], used["src_y0"]) != (0, 0)
    with pytest.raises(ValidationError, match="whole image"):
        apply_distortion(img, BBox(0, 0, 4, 4), DistortionType.MISLOCATE, {}, make_rng(0, 0))


def test_salt_pepper(phantom):
    out, _ = apply_distortion(phantom, BOX, DistortionType.SALT_PEPPER, {"sp_fraction": 1e-9}, make_rng(0, 0))
    assert np.array_equal(out, phantom)
    out, _ = apply_distortion(phantom, BOX, DistortionType.SALT_PEPPER, {"sp_fraction": 0.2}, make_rng(0, 0))
    changed = out[BOX.slices] != phantom[BOX.slices]
    assert set(np.unique(out[BOX.slices][changed])) <= {0.0, 1.0}
    assert changed.sum() <= round(0.2 * BOX.area)


def test_rotate_half_turn_is_involution(phantom):
    once, _ = apply_distortion(phantom, BOX, DistortionType.ROTATE, {"quarter_turns": 2}, make_rng(0, 0))
    twice, _ = apply_distortion(once, BOX, DistortionType.ROTATE, {"quarter_turns": 2}, make_rng(0, 0))
    assert np.array_equal(twice, phantom)
    np.testing.assert_array_equal(once[BOX.slices], np.rot90(phantom[BOX.slices], 2))


def test_odd_rotation_needs_square(phantom):
    with pytest.raises(ValidationError):
        apply_distortion(phantom, BBox(0, 0, 10, 20), DistortionType.ROTATE, {"quarter_turns": 1}, make_rng(0, 0))


def test_unknown_code(phantom):
    with pytest.raises(ValidationError, match="unknown"):
        apply_distortion(phantom, BOX, 9, {}, make_rng(0, 0))


def test_speckle_mean_preserved(phantom):
    sigma = 0.5
    for s in range(20):
        out, _ = apply_distortion(phantom, BOX, DistortionType.SPECKLE, {"speckle_sigma": sigma}, make_rng(s, 0))
        assert abs(out[BOX.slices].mean() - phantom[BOX.slices].mean()) <= 3 * sigma / np.sqrt(BOX.area)


def test_apply_does_not_mutate(phantom):
    before = phantom.copy()
    apply_distortion(phantom, BOX, DistortionType.BLANK, {}, make_rng(0, 0))
    assert np.array_equal(phantom, before)


# whole samples

@pytest.fixture(scope="module")
def samples():
    cfg = DistortionConfig()
    out = []
    for i in range(100):
        org = generate_phantom(1000 + i).image
        out.append((org, plan_and_distort(org, cfg, 5, i)))
    return out


def test_locality_and_recoverability(samples):
    for org, s in samples:
        assert 3 <= len(s.records) <= 7
        union = np.zeros(org.shape, bool)
        rebuilt = s.distorted
        for r in s.records:
            union |= r.region_mask
            assert np.array_equal(r.region_mask, r.box.mask(*org.shape))
            assert r.original_patch.shape == (r.box.height, r.box.width)
            rebuilt = paste(rebuilt, r.original_patch, r.box)
        assert np.array_equal(s.distorted[~union], org[~union])
        assert np.array_equal(rebuilt, org)


def test_blank_records_are_zero(samples):
    seen = 0
    for _, s in samples:
        for r in s.records:
            if r.dtype == DistortionType.BLANK:
                assert s.distorted[r.box.slices].mean() == 0.0
                seen += 1
    assert seen > 0


def test_ssim_drops(samples):
    for org, s in samples:
        assert ssim(org, s.distorted) < 1.0


def test_sample_determinism(phantom):
    plan = sample_plan(make_rng(3, 3), DistortionConfig(), DIMS, source_seed=99)
    a = distort_sample(phantom, plan)
    b = distort_sample(phantom, plan)
    assert np.array_equal(a.distorted, b.distorted) and a == b


def test_degradation_monotone():
    p3, p7 = [], []
    for i in range(100):
        org = generate_phantom(2000 + i, PhantomParams(image_size=160)).image
        c3 = DistortionConfig(count_range=(3, 3)).scaled(160)
        c7 = DistortionConfig(count_range=(7, 7)).scaled(160)
        p3.append(psnr(org, plan_and_distort(org, c3, 0, i).distorted))
        p7.append(psnr(org, plan_and_distort(org, c7, 0, i).distorted))
    assert np.mean(p7) <= np.mean(p3)


def test_distort_dataset(small_corpus, tmp_path):
    out = tmp_path / "d"
    m = distort_dataset(small_corpus, out, DistortionConfig().scaled(160), seed=1, preview=2)
    src = read_manifest(small_corpus)
    assert m["splits"] == src["splits"]
    assert len(list((out / "preview").glob("*.png"))) == 2
    sid = src["splits"]["train"][0]
    s = load_sample(out, sid)
    org = load_sample(small_corpus, sid).image
    rebuilt = s.distorted
    for r in s.records:
        rebuilt = paste(rebuilt, r.original_patch, r.box)
    assert np.array_equal(rebuilt, org)
    with pytest.raises(FileExistsError):
        distort_dataset(small_corpus, out, DistortionConfig().scaled(160), seed=1)
