"""Image similarity (SSIM, PSNR, cosine) and detection/segmentation scores."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core_types import BBox, Detection, ValidationError
from .model.boxes import iou

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DYNAMIC_RANGE = 1.0
PSNR_CAP = 100.0
PSNR_MSE_FLOOR = 1e-10
COS_EPS = 1e-8


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian taps; the 2-D window is its outer product."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(img, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def _pair(a: Any, b: Any) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all valid 11x11 Gaussian window positions (L = 1)."""
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < SSIM_WIN:
        raise ValidationError(f"ssim needs 2-D images of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape}")
    c1 = (SSIM_K1 * DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * DYNAMIC_RANGE) ** 2
    g = gaussian_window()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB with peak 1.0; exact matches return ``PSNR_CAP``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP
    return 10.0 * np.log10(DYNAMIC_RANGE**2 / mse)


def psnr_is_capped(a: np.ndarray, b: np.ndarray) -> bool:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2)) < PSNR_MSE_FLOOR


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _pair(a, b)
    fa, fb = a.ravel(), b.ravel()
    na, nb = float(np.linalg.norm(fa)), float(np.linalg.norm(fb))
    if na == 0.0 and nb == 0.0:
        return 1.0
    return float(fa @ fb) / (max(na, COS_EPS) * max(nb, COS_EPS))


@dataclass(frozen=True)
class SslEvalRow:
    ssim_dist: float
    ssim_ssl: float
    ssim_delta: float
    psnr_dist: float
    psnr_ssl: float
    psnr_delta: float
    cs_dist: float
    cs_ssl: float
    cs_delta: float
    psnr_ssl_exact: bool = False

    @classmethod
    def from_measures(cls, ssim_pair: tuple[float, float], psnr_pair: tuple[float, float], cs_pair: tuple[float, float], psnr_ssl_exact: bool = False) -> "SslEvalRow":
        return cls(
            ssim_pair[0], ssim_pair[1], delta(*ssim_pair),
            psnr_pair[0], psnr_pair[1], delta(*psnr_pair),
            cs_pair[0], cs_pair[1], delta(*cs_pair),
            psnr_ssl_exact,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def delta(dist_value: float, ssl_value: float) -> float:
    """Improvement of the recovered image over the distorted one."""
    return ssl_value - dist_value


def eval_ssl(original: np.ndarray, distorted: np.ndarray, recovered: np.ndarray) -> SslEvalRow:
    _pair(original, distorted)
    _pair(original, recovered)
    return SslEvalRow.from_measures(
        (ssim(original, distorted), ssim(original, recovered)),
        (psnr(original, distorted), psnr(original, recovered)),
        (cosine_sim(original, distorted), cosine_sim(original, recovered)),
        psnr_is_capped(original, recovered),
    )


SSL_FIELDS = ("ssim_dist", "ssim_ssl", "ssim_delta", "psnr_dist", "psnr_ssl", "psnr_delta", "cs_dist", "cs_ssl", "cs_delta")


def mean_ssl_rows(rows: Sequence[SslEvalRow]) -> dict[str, float]:
    if not rows:
        return {k: float("nan") for k in SSL_FIELDS}
    return {k: float(np.mean([getattr(r, k) for r in rows])) for k in SSL_FIELDS}


# Detection and segmentation.

class Match(NamedTuple):
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]]  # (prediction index, gt index)


def match_detections(
    preds: Sequence[Detection],
    gts: Sequence[tuple[int, BBox]],
    iou_thresh: float = 0.5,
) -> Match:
    """Greedy matching by descending score.

    Ties in score are ordered by box coordinates, then input position. Each
    prediction takes the unmatched same-class ground truth with the highest
    IoU, if that IoU reaches ``iou_thresh``.
    """
    scores = [float(p.score) for p in preds]
    if not all(np.isfinite(scores)):
        raise ValidationError("match_detections: non-finite scores")
    order = sorted(range(len(preds)), key=lambda i: (-scores[i], preds[i].box.as_list(), i))
    taken = [False] * len(gts)
    pairs = []
    for i in order:
        best, best_iou = -1, iou_thresh
        for j, (cls, box) in enumerate(gts):
            if taken[j] or cls != preds[i].class_id:
                continue
            v = iou(preds[i].box, box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
            pairs.append((i, best))
    tp = len(pairs)
    return Match(tp, len(preds) - tp, len(gts) - tp, pairs)


class PRF(NamedTuple):
    precision: float
    recall: float
    precision_undefined: bool
    recall_undefined: bool


def detection_prf(tp: int, fp: int, fn: int) -> PRF:
    if min(tp, fp, fn) < 0:
        raise ValidationError(f"counts must be non-negative, got tp={tp} fp={fp} fn={fn}")
    p_undef = tp + fp == 0
    r_undef = tp + fn == 0
    precision = 0.0 if p_undef else tp / (tp + fp)
    recall = 0.0 if r_undef else tp / (tp + fn)
    return PRF(precision, recall, p_undef, r_undef)


def _binary(mask: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValidationError(f"{name}: mask must be binary")
        m = m.astype(bool)
    return m


def pixel_counts(pred_mask: np.ndarray, gt_mask: np.ndarray) -> tuple[int, int, int]:
    p = _binary(pred_mask, "pred_mask")
    g = _binary(gt_mask, "gt_mask")
    if p.shape != g.shape:
        raise ValidationError(f"mask shape mismatch {p.shape} vs {g.shape}")
    return int(np.sum(p & g)), int(np.sum(p & ~g)), int(np.sum(~p & g))


def dice_from_counts(tp: int, fp: int, fn: int) -> float:
    """``2TP / (2TP + FP + FN)``; 0/0 (both masks empty) is reported as 0."""
    den = 2 * tp + fp + fn
    return 0.0 if den == 0 else 2 * tp / den


def dice_pixel(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    return dice_from_counts(*pixel_counts(pred_mask, gt_mask))


@dataclass
class SegEvalRow:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    precision: float = 0.0
    recall: float = 0.0
    dice: float = 0.0
    dice_micro: float = 0.0
    precision_undefined: bool = False
    recall_undefined: bool = False
    n_images: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def aggregate_seg(per_image: Sequence[dict[str, Any]]) -> SegEvalRow:
    """Combine per-image entries holding ``tp``, ``fp``, ``fn``, ``dice`` and pixel counts.

    ``dice`` is the macro mean of per-image scores over images where either
    mask is nonempty; ``dice_micro`` pools pixel counts over all images first.
    """
    tp = sum(r["tp"] for r in per_image)
    fp = sum(r["fp"] for r in per_image)
    fn = sum(r["fn"] for r in per_image)
    prf = detection_prf(tp, fp, fn)
    px = [sum(r["pixel_counts"][k] for r in per_image) for k in range(3)]
    defined = [r["dice"] for r in per_image if sum(r["pixel_counts"]) > 0]
    return SegEvalRow(
        tp=tp, fp=fp, fn=fn,
        precision=prf.precision, recall=prf.recall,
        dice=float(np.mean(defined)) if defined else 0.0,
        dice_micro=dice_from_counts(*px) if per_image else 0.0,
        precision_undefined=prf.precision_undefined,
        recall_undefined=prf.recall_undefined,
        n_images=len(per_image),
    )
