"""Box geometry: IoU, greedy NMS and the R-CNN delta parameterisation.

Scalar functions take :class:`BBox`; the ``*_matrix``/array variants work on
``(N, 4)`` float arrays ``[x0, y0, x1, y1]`` with the same half-open convention,
so width is ``x1 - x0``.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..core_types import BBox, Detection, ValidationError


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def nms_order(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float, max_keep: int | None = None) -> list[int]:
    """Indices kept by greedy NMS.

    Ties in score are broken by ``x0``, then ``y0``, then input position, so
    the result does not depend on how equal-score boxes were ordered.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(scores)):
        raise ValidationError("nms: non-finite scores")
    n = len(scores)
    if n == 0:
        return []
    order = np.lexsort((np.arange(n), boxes[:, 1], boxes[:, 0], -scores))
    suppressed = np.zeros(n, dtype=bool)
    keep: list[int] = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        if max_keep is not None and len(keep) >= max_keep:
            break
        suppressed |= iou_matrix(boxes[i], boxes)[0] > iou_threshold
    return keep


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    if not detections:
        return []
    boxes = np.array([d.box.as_list() for d in detections], dtype=np.float64)
    scores = np.array([d.score for d in detections], dtype=np.float64)
    return [detections[i] for i in nms_order(boxes, scores, iou_threshold)]


def _geom(b: Sequence[float]) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = (float(v) for v in b)
    return (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0


def encode_box(anchor: BBox | Sequence[float], gt: BBox | Sequence[float]) -> tuple[float, float, float, float]:
    """Deltas ``(tx, ty, tw, th)`` taking ``anchor`` onto ``gt``."""
    ax, ay, aw, ah = _geom(anchor.as_list() if isinstance(anchor, BBox) else anchor)
    gx, gy, gw, gh = _geom(gt.as_list() if isinstance(gt, BBox) else gt)
    if aw <= 0 or ah <= 0:
        raise ValidationError(f"anchor must have positive size, got {aw}x{ah}")
    if gw <= 0 or gh <= 0:
        raise ValidationError(f"target box must have positive size, got {gw}x{gh}")
    return (gx - ax) / aw, (gy - ay) / ah, math.log(gw / aw), math.log(gh / ah)


def decode_box_float(anchor: BBox | Sequence[float], deltas: Sequence[float]) -> tuple[float, float, float, float]:
    ax, ay, aw, ah = _geom(anchor.as_list() if isinstance(anchor, BBox) else anchor)
    if aw <= 0 or ah <= 0:
        raise ValidationError(f"anchor must have positive size, got {aw}x{ah}")
    tx, ty, tw, th = (float(v) for v in deltas)
    cx, cy = ax + tx * aw, ay + ty * ah
    w, h = aw * math.exp(tw), ah * math.exp(th)
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def to_pixel_box(coords: Sequence[float], height: int, width: int) -> BBox | None:
    """Round real coordinates to an integer box clipped to the image; ``None`` if degenerate."""
    x0, y0, x1, y1 = (float(v) for v in coords)
    x0 = int(np.clip(round(x0), 0, width))
    y0 = int(np.clip(round(y0), 0, height))
    x1 = int(np.clip(round(x1), 0, width))
    y1 = int(np.clip(round(y1), 0, height))
    if x1 <= x0 or y1 <= y0:
        return None
    return BBox(x0, y0, x1, y1)


def decode_box(anchor: BBox | Sequence[float], deltas: Sequence[float], height: int, width: int) -> BBox | None:
    return to_pixel_box(decode_box_float(anchor, deltas), height, width)


BBOX_CLIP = math.log(1000.0 / 16)


def encode_array(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    gx = gts[:, 0] + gw / 2
    gy = gts[:, 1] + gh / 2
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_array(anchors: np.ndarray, deltas: np.ndarray, height: int | None = None, width: int | None = None) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    tw = np.minimum(deltas[:, 2], BBOX_CLIP)
    th = np.minimum(deltas[:, 3], BBOX_CLIP)
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(tw)
    h = ah * np.exp(th)
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    if width is not None:
        out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    if height is not None:
        out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    return out
