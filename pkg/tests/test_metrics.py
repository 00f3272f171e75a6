import itertools

import numpy as np
import pytest

import oracles
from distort_ssl.core_types import BBox, Detection, ValidationError
from distort_ssl.metrics import (
    aggregate_seg,
    cosine_sim,
    delta,
    detection_prf,
    dice_from_counts,
    dice_pixel,
    eval_ssl,
    match_detections,
    mean_ssl_rows,
    pixel_counts,
    psnr,
    psnr_is_capped,
    ssim,
)


def test_ssim_examples(rng):
    img = rng.random((20, 20))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    c1 = 0.01**2
    assert ssim(np.zeros((16, 16)), np.ones((16, 16))) == pytest.approx(c1 / (1 + c1), rel=1e-9)
    with pytest.raises(ValidationError):
        ssim(np.zeros((10, 12)), np.zeros((10, 12)))


def test_similarity_oracles_50_pairs(rng):
    for _ in range(50):
        a = rng.random((16, 16))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.3), a.shape), 0, 1)
        assert abs(ssim(a, b) - oracles.ssim(a.tolist(), b.tolist())) < 1e-6
        assert abs(psnr(a, b) - oracles.psnr(a.tolist(), b.tolist())) < 1e-6
        assert abs(cosine_sim(a, b) - oracles.cosine(a.tolist(), b.tolist())) < 1e-6


def test_similarity_symmetric(rng):
    for _ in range(10):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)
        assert psnr(a, b) == psnr(b, a)
        assert cosine_sim(a, b) == pytest.approx(cosine_sim(b, a), abs=1e-14)


def test_psnr_examples(rng):
    img = rng.random((8, 8))
    assert psnr(img, img) == 100.0 and psnr_is_capped(img, img)
    b = np.full((4, 4), 0.5)
    assert psnr(b, b + 0.1) == pytest.approx(20.0)
    assert not psnr_is_capped(b, b + 0.1)


def test_psnr_monotone_in_noise(rng):
    img = rng.random((32, 32)) * 0.5 + 0.25
    noise = rng.normal(size=img.shape)
    vals = [psnr(img, img + s * noise) for s in (0.01, 0.02, 0.05, 0.1)]
    assert all(x >= y for x, y in zip(vals, vals[1:]))


def test_cosine_examples(rng):
    img = rng.random((6, 6)) * 0.4
    assert cosine_sim(img, img) == pytest.approx(1.0)
    assert cosine_sim(img, 2 * img) == pytest.approx(1.0)
    a = np.zeros((4, 4))
    b = np.zeros((4, 4))
    a[:2] = 0.7
    b[2:] = 0.3
    assert cosine_sim(a, b) == 0.0
    assert cosine_sim(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_delta_worked_example():
    assert delta(0.79, 0.84) == pytest.approx(0.05, abs=1e-12)


def test_eval_ssl_extremes(rng):
    org = rng.random((16, 16))
    dist = np.clip(org + rng.normal(0, 0.1, org.shape), 0, 1)
    perfect = eval_ssl(org, dist, org)
    assert perfect.ssim_ssl == pytest.approx(1.0) and perfect.psnr_ssl == 100.0 and perfect.cs_ssl == pytest.approx(1.0)
    assert perfect.psnr_ssl_exact
    noop = eval_ssl(org, dist, dist)
    assert noop.ssim_delta == 0 and noop.psnr_delta == 0 and noop.cs_delta == 0
    row = eval_ssl(org, dist, np.clip(org + rng.normal(0, 0.05, org.shape), 0, 1))
    assert row.psnr_delta == row.psnr_ssl - row.psnr_dist
    assert row.ssim_delta == row.ssim_ssl - row.ssim_dist
    m = mean_ssl_rows([perfect, noop])
    assert m["psnr_ssl"] == pytest.approx((100.0 + noop.psnr_ssl) / 2)


def _d(box, score, cls=1):
    return Detection(BBox(*box), cls, score)


def test_match_examples():
    gts = [(1, BBox(0, 0, 10, 10)), (1, BBox(20, 20, 30, 30))]
    assert match_detections([], gts)[:3] == (0, 0, 2)
    exact = [_d(b.as_list(), 0.9) for _, b in gts]
    assert match_detections(exact, gts)[:3] == (2, 0, 0)


def test_match_prefers_higher_iou():
    pred = BBox(0, 0, 20, 20)
    g_hi, g_lo = BBox(0, 0, 20, 12), BBox(0, 0, 11, 20)
    assert oracles.box_iou(pred.as_list(), g_hi.as_list()) == pytest.approx(0.6)
    assert oracles.box_iou(pred.as_list(), g_lo.as_list()) == pytest.approx(0.55)
    m = match_detections([Detection(pred, 1, 0.9)], [(1, g_lo), (1, g_hi)])
    assert m.pairs == [(0, 1)] and (m.tp, m.fp, m.fn) == (1, 0, 1)


def test_match_class_must_agree():
    m = match_detections([_d((0, 0, 10, 10), 0.9, cls=2)], [(1, BBox(0, 0, 10, 10))])
    assert (m.tp, m.fp, m.fn) == (0, 1, 1)


def test_match_equal_score_permutation_invariant(rng):
    gts = [(1, BBox(0, 0, 10, 10))]
    preds = [_d((0, 0, 10, 9), 0.5), _d((1, 0, 10, 10), 0.5), _d((0, 1, 10, 10), 0.5)]
    base = match_detections(preds, gts)
    for perm in itertools.permutations(range(3)):
        m = match_detections([preds[i] for i in perm], gts)
        assert (m.tp, m.fp, m.fn) == base[:3]
        assert preds[perm[m.pairs[0][0]]] == preds[base.pairs[0][0]]


def test_match_against_bruteforce_counts(rng):
    for _ in range(50):
        gts = [(1, BBox(*oracle_box(rng))) for _ in range(rng.integers(0, 4))]
        preds = [Detection(BBox(*oracle_box(rng)), 1, float(s)) for s in rng.random(rng.integers(0, 4))]
        m = match_detections(preds, gts)
        assert m.tp + m.fp == len(preds) and m.tp + m.fn == len(gts)
        for i, j in m.pairs:
            assert oracles.box_iou(preds[i].box.as_list(), gts[j][1].as_list()) >= 0.5


def oracle_box(rng):
    x0, y0 = rng.integers(0, 20, 2)
    return [int(x0), int(y0), int(x0 + rng.integers(3, 12)), int(y0 + rng.integers(3, 12))]


def test_prf_examples():
    p = detection_prf(2, 1, 1)
    assert p.precision == pytest.approx(2 / 3) and p.recall == pytest.approx(2 / 3)
    p = detection_prf(0, 0, 5)
    assert p.precision == 0 and p.precision_undefined and p.recall == 0 and not p.recall_undefined
    assert detection_prf(5, 0, 0)[:2] == (1.0, 1.0)
    with pytest.raises(ValidationError):
        detection_prf(-1, 0, 0)


def test_dice_examples(rng):
    m = rng.random((8, 8)) > 0.5
    assert dice_pixel(m, m) == 1.0
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a[0] = True
    b[3] = True
    assert dice_pixel(a, b) == 0.0
    assert dice_from_counts(50, 10, 10) == pytest.approx(100 / 120)
    with pytest.raises(ValidationError):
        dice_pixel(np.full((2, 2), 0.5), a[:2, :2])


def test_dice_matches_bruteforce(rng):
    for _ in range(50):
        p = rng.random((32, 32)) < rng.random()
        g = rng.random((32, 32)) < rng.random()
        assert pixel_counts(p, g) == oracles.pixel_counts(p.tolist(), g.tolist())
        assert dice_pixel(p, g) == oracles.dice(p.tolist(), g.tolist())


def test_aggregate_macro_and_micro():
    rows = [
        {"tp": 1, "fp": 0, "fn": 0, "dice": 1.0, "pixel_counts": [10, 0, 0]},
        {"tp": 0, "fp": 1, "fn": 1, "dice": 0.0, "pixel_counts": [0, 30, 30]},
        {"tp": 0, "fp": 0, "fn": 0, "dice": 0.0, "pixel_counts": [0, 0, 0]},
    ]
    agg = aggregate_seg(rows)
    assert agg.dice == pytest.approx(0.5)
    assert agg.dice_micro == pytest.approx(20 / 80)
    assert (agg.tp, agg.fp, agg.fn, agg.n_images) == (1, 1, 1, 3)
