"""Figures and tables from evaluation reports.

PNG panels are drawn with Pillow; tables are plain CSV text.
"""
from __future__ import annotations

import csv
import io
from typing import Any, Sequence

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from .core_types import AnnotatedSample, BBox, DistortionType

# One colour per distortion code, index 0 is "no distortion".
TYPE_COLORS = np.array(
    [
        (0, 0, 0),
        (230, 25, 75),  # blank
        (60, 180, 75),  # blurred
        (255, 225, 25),  # mislocate
        (0, 130, 200),  # salt_pepper
        (245, 130, 48),  # rotate
        (145, 30, 180),  # speckle
    ],
    dtype=np.uint8,
)
GAP = 4


def to_rgb(image: np.ndarray) -> np.ndarray:
    g = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=2)


def labeled_boxes(image: np.ndarray, boxes: Sequence[tuple[BBox, int]]) -> PILImage.Image:
    """Grayscale image with coloured box outlines and type codes."""
    pil = PILImage.fromarray(to_rgb(image))
    draw = ImageDraw.Draw(pil)
    for box, code in boxes:
        color = tuple(int(c) for c in TYPE_COLORS[code % len(TYPE_COLORS)])
        draw.rectangle([box.x0, box.y0, box.x1 - 1, box.y1 - 1], outline=color)
        draw.text((box.x0 + 2, box.y0 + 1), str(code), fill=color)
    return pil


def distortion_map(shape: tuple[int, int], boxes: Sequence[tuple[BBox, int]]) -> np.ndarray:
    """RGB map with each box filled by its type colour; later boxes paint over earlier ones."""
    out = np.zeros((*shape, 3), dtype=np.uint8)
    for box, code in boxes:
        out[box.slices] = TYPE_COLORS[code % len(TYPE_COLORS)]
    return out


def hstack(panels: Sequence[PILImage.Image | np.ndarray]) -> PILImage.Image:
    imgs = [p if isinstance(p, PILImage.Image) else PILImage.fromarray(p) for p in panels]
    h = max(i.height for i in imgs)
    w = sum(i.width for i in imgs) + GAP * (len(imgs) - 1)
    canvas = PILImage.new("RGB", (w, h), (255, 255, 255))
    x = 0
    for i in imgs:
        canvas.paste(i.convert("RGB"), (x, 0))
        x += i.width + GAP
    return canvas


def preview_panel(original: np.ndarray, sample: AnnotatedSample) -> PILImage.Image:
    """original | distorted | distorted with labelled boxes."""
    boxes = [(r.box, int(r.dtype)) for r in sample.records]
    return hstack([to_rgb(original), to_rgb(sample.distorted), labeled_boxes(sample.distorted, boxes)])


def ssl_figure(original: np.ndarray, sample: AnnotatedSample, detections: Sequence[Any], recovered: np.ndarray) -> PILImage.Image:
    gt = [(r.box, int(r.dtype)) for r in sample.records]
    pred = [(d.box, int(d.class_id)) for d in detections]
    return fig2_from_boxes(original, sample.distorted, gt, pred, recovered)


def legend() -> str:
    return ", ".join(f"{t.value}-{t.name}" for t in DistortionType)


def _csv(rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def table2_csv(ssl_report: dict[str, Any], label: str = "phantom") -> str:
    """Three measures x (dist, ssl, delta), one row per report."""
    m = ssl_report["mean"]
    header = ["dataset"]
    row: list[Any] = [label]
    for measure in ("ssim", "psnr", "cs"):
        for side in ("dist", "ssl", "delta"):
            header.append(f"{measure}_{side}")
            row.append(f"{m[f'{measure}_{side}']:.4f}")
    return _csv([header, row])


def ssl_rows_csv(ssl_report: dict[str, Any]) -> str:
    from .metrics import SSL_FIELDS

    rows = [["sample_id", *SSL_FIELDS]]
    rows += [[r["sample_id"], *(r[k] for k in SSL_FIELDS)] for r in ssl_report["rows"]]
    return _csv(rows)


def seg_csv(seg_report: dict[str, Any]) -> str:
    rows = [["sample_id", "tp", "fp", "fn", "dice"]]
    rows += [[r["sample_id"], r["tp"], r["fp"], r["fn"], r["dice"]] for r in seg_report["per_image"]]
    a = seg_report["aggregate"]
    rows.append(["ALL", a["tp"], a["fp"], a["fn"], a["dice"]])
    return _csv(rows)


def table3_csv(grid_report: dict[str, Any]) -> str:
    """Rows recall/precision/dice; one column per (arm, label size) holding the seed mean and range."""
    cells = {(c["arm"], c["label_size"]): c for c in grid_report["cells"]}
    cols = [(a, ls) for a in grid_report["arms"] for ls in grid_report["label_sizes"]]
    header = ["metric", *(f"{a}/{ls}" for a, ls in cols)]
    rows = [header]
    for metric in ("recall", "precision", "dice"):
        row: list[Any] = [metric]
        for key in cols:
            c = cells[key]
            mean, lo, hi = c["mean"][metric], c["min"][metric], c["max"][metric]
            row.append("failed" if mean is None else f"{mean:.4f} [{lo:.4f}, {hi:.4f}]")
        rows.append(row)
    return _csv(rows)


def table3_figure(grid_report: dict[str, Any], metric: str = "dice") -> PILImage.Image:
    """Grouped bar chart of seed means per label size, with min-max whiskers."""
    arms, sizes = grid_report["arms"], grid_report["label_sizes"]
    cells = {(c["arm"], c["label_size"]): c for c in grid_report["cells"]}
    bar, pad, top, base = 18, 24, 20, 40
    w = pad + len(sizes) * (len(arms) * bar + pad)
    h = 240
    scale = h - top - base
    img = PILImage.new("RGB", (w, h), (255, 255, 255))
    d = ImageDraw.Draw(img)
    y0 = h - base
    d.line([(pad // 2, y0), (w - pad // 2, y0)], fill=(0, 0, 0))
    d.text((4, 2), f"{metric} (seed mean, min-max)", fill=(0, 0, 0))
    palette = [tuple(int(c) for c in TYPE_COLORS[1 + i % 6]) for i in range(len(arms))]
    for gi, ls in enumerate(sizes):
        gx = pad + gi * (len(arms) * bar + pad)
        for ai, arm in enumerate(arms):
            c = cells[(arm, ls)]
            mean = c["mean"][metric]
            x = gx + ai * bar
            if mean is not None:
                d.rectangle([x + 2, y0 - mean * scale, x + bar - 2, y0], fill=palette[ai])
                d.line([(x + bar // 2, y0 - c["min"][metric] * scale), (x + bar // 2, y0 - c["max"][metric] * scale)], fill=(0, 0, 0))
        d.text((gx, y0 + 4), f"n={ls}", fill=(0, 0, 0))
    for ai, arm in enumerate(arms):
        d.rectangle([4 + ai * 70, h - 14, 12 + ai * 70, h - 6], fill=palette[ai])
        d.text((14 + ai * 70, h - 16), arm[:9], fill=(0, 0, 0))
    return img


def fig2_from_boxes(
    original: np.ndarray,
    distorted: np.ndarray,
    gt: Sequence[tuple[BBox, int]],
    pred: Sequence[tuple[BBox, int]],
    recovered: np.ndarray,
) -> PILImage.Image:
    """Original, distorted, GT mask, predicted mask, GT type map, predicted type map, recovered."""
    shape = original.shape

    def box_mask(boxes: Sequence[tuple[BBox, int]]) -> np.ndarray:
        m = np.zeros(shape)
        for b, _ in boxes:
            m[b.slices] = 1.0
        return m

    return hstack(
        [
            to_rgb(original),
            to_rgb(distorted),
            to_rgb(box_mask(gt)),
            to_rgb(box_mask(pred)),
            distortion_map(shape, gt),
            distortion_map(shape, pred),
            to_rgb(recovered),
        ]
    )
