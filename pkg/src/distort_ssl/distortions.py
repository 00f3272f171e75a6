"""Distortion block: corrupt 3-7 random rectangles and record pretext ground truth.

Choices not fixed by the method description (all configurable):
Gaussian blur kernel, multiplicative Gaussian speckle, quarter-turn rotation
on square boxes, same-image transplant for ``mislocate``, and pairwise
disjoint regions by default.
"""
from __future__ import annotations

import enum
import io
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import ndimage

from .core_types import (
    AnnotatedSample,
    BBox,
    DistortionRecord,
    DistortionType,
    SegSample,
    ValidationError,
    crop,
    make_rng,
    stream_id,
)
from .dataset import atomic_write_bytes, load_sample, read_manifest, save_sample, write_manifest
from .render import preview_panel


class PlacementError(RuntimeError):
    """No valid set of boxes could be placed within the retry budget."""


class OverlapPolicy(str, enum.Enum):
    REJECT_OVERLAP = "reject_overlap"
    ALLOW = "allow"


@dataclass(frozen=True)
class DistortionConfig:
    count_range: tuple[int, int] = (3, 7)
    size_range: tuple[int, int] = (50, 80)
    blur_sigma: tuple[float, float] = (1.5, 4.0)
    sp_fraction: tuple[float, float] = (0.05, 0.25)
    speckle_sigma: tuple[float, float] = (0.2, 0.5)
    rotate_quarter_turns: tuple[int, ...] = (1, 2, 3)
    overlap_policy: OverlapPolicy = OverlapPolicy.REJECT_OVERLAP
    max_attempts: int = 200

    def violations(self, dims: tuple[int, int] | None = None) -> list[str]:
        out = []
        lo, hi = self.count_range
        if lo > hi:
            out.append(f"count_range: ({lo}, {hi}) is inverted")
        if lo < 1 or hi > 10:
            out.append(f"count_range: ({lo}, {hi}) must lie within [1, 10]")
        slo, shi = self.size_range
        if slo > shi or slo < 1:
            out.append(f"size_range: ({slo}, {shi}) must be positive and ordered")
        if dims is not None and shi > min(dims):
            out.append(f"size_range: side {shi} does not fit image {dims[0]}x{dims[1]}")
        for name in ("blur_sigma", "sp_fraction", "speckle_sigma"):
            a, b = getattr(self, name)
            if not (0 < a <= b):
                out.append(f"{name}: ({a}, {b}) must be positive and ordered")
        if self.sp_fraction[1] > 1:
            out.append("sp_fraction: must be <= 1")
        if not self.rotate_quarter_turns or any(k not in (1, 2, 3) for k in self.rotate_quarter_turns):
            out.append("rotate_quarter_turns: values must be drawn from {1, 2, 3}")
        return out

    def validate(self, dims: tuple[int, int] | None = None) -> None:
        problems = self.violations(dims)
        if problems:
            raise ValidationError("; ".join(problems))

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "DistortionConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown distortion config keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
        if "overlap_policy" in kwargs:
            try:
                kwargs["overlap_policy"] = OverlapPolicy(kwargs["overlap_policy"])
            except ValueError as exc:
                raise ValidationError(f"overlap_policy: {exc}") from exc
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}
        d["overlap_policy"] = self.overlap_policy.value
        return d

    def scaled(self, image_size: int, reference: int = 320) -> "DistortionConfig":
        """Same config with region sides scaled from ``reference`` to ``image_size``."""
        f = image_size / reference
        lo, hi = self.size_range
        return DistortionConfig(**{**self.__dict__, "size_range": (max(1, round(lo * f)), max(1, round(hi * f)))})


@dataclass(frozen=True)
class PlanItem:
    dtype: DistortionType
    box: BBox
    params: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class DistortionPlan:
    items: tuple[PlanItem, ...]
    source_seed: int

    def __len__(self) -> int:
        return len(self.items)


def _overlaps(a: BBox, b: BBox) -> bool:
    return a.x0 < b.x1 and b.x0 < a.x1 and a.y0 < b.y1 and b.y0 < a.y1


def _draw_params(rng: np.random.Generator, dtype: DistortionType, config: DistortionConfig) -> dict[str, float]:
    if dtype == DistortionType.BLURRED:
        return {"blur_sigma": float(rng.uniform(*config.blur_sigma))}
    if dtype == DistortionType.SALT_PEPPER:
        return {"sp_fraction": float(rng.uniform(*config.sp_fraction))}
    if dtype == DistortionType.SPECKLE:
        return {"speckle_sigma": float(rng.uniform(*config.speckle_sigma))}
    if dtype == DistortionType.ROTATE:
        return {"quarter_turns": float(rng.choice(np.asarray(config.rotate_quarter_turns)))}
    return {}


def sample_plan(rng: np.random.Generator, config: DistortionConfig, dims: tuple[int, int], source_seed: int = 0) -> DistortionPlan:
    """Draw a random plan of distortions for an image of shape ``dims`` (height, width).

    Rotation regions are drawn square so a quarter turn fits in place.
    """
    h, w = dims
    config.validate(dims)
    kmin, kmax = config.count_range
    slo, shi = config.size_range
    reject = config.overlap_policy == OverlapPolicy.REJECT_OVERLAP
    if reject and (h // shi) * (w // shi) < kmin:
        raise PlacementError(
            f"image {h}x{w} cannot hold {kmin} disjoint regions of side {shi} (config {config.to_dict()})"
        )

    k = int(rng.integers(kmin, kmax + 1))
    types = [DistortionType(int(t)) for t in rng.integers(1, 7, size=k)]
    items: list[PlanItem] = []
    for dtype in types:
        placed = None
        # Shrink-and-retry: on repeated collisions lower the upper side bound toward slo.
        cap = shi
        while placed is None:
            for _ in range(config.max_attempts):
                bw = int(rng.integers(slo, cap + 1))
                bh = bw if dtype == DistortionType.ROTATE else int(rng.integers(slo, cap + 1))
                x0 = int(rng.integers(0, w - bw + 1))
                y0 = int(rng.integers(0, h - bh + 1))
                box = BBox(x0, y0, x0 + bw, y0 + bh)
                if not reject or not any(_overlaps(box, it.box) for it in items):
                    placed = box
                    break
            if placed is None:
                if cap == slo:
                    raise PlacementError(
                        f"could not place region {len(items) + 1}/{k} in image {h}x{w} "
                        f"with size_range {config.size_range} after shrinking"
                    )
                cap = max(slo, cap - max(1, (shi - slo) // 4))
        items.append(PlanItem(dtype, placed, _draw_params(rng, dtype, config)))
    return DistortionPlan(tuple(items), int(source_seed))


def _mislocate_source(rng: np.random.Generator, box: BBox, h: int, w: int, attempts: int = 100) -> tuple[int, int]:
    bw, bh = box.width, box.height
    if bw == w and bh == h:
        raise ValidationError(f"mislocate impossible: box {box.as_list()} covers the whole image")
    for _ in range(attempts):
        sx = int(rng.integers(0, w - bw + 1))
        sy = int(rng.integers(0, h - bh + 1))
        if not _overlaps(BBox(sx, sy, sx + bw, sy + bh), box):
            return sx, sy
    # Image too small for a disjoint source: any distinct offset.
    choices = [(x, y) for y in range(h - bh + 1) for x in range(w - bw + 1) if (x, y) != (box.x0, box.y0)]
    return choices[int(rng.integers(len(choices)))]


def apply_distortion(
    image: np.ndarray,
    box: BBox,
    dtype: DistortionType | int,
    params: dict[str, float],
    rng: np.random.Generator,
) -> tuple[np.ndarray, dict[str, float]]:
    """Return a copy of ``image`` with ``box`` corrupted, plus the parameters actually used."""
    try:
        dtype = DistortionType(int(dtype))
    except ValueError as exc:
        raise ValidationError(f"unknown distortion code {dtype!r}") from exc
    h, w = image.shape
    box.check_within(h, w)
    out = np.array(image, dtype=np.float64, copy=True)
    region = out[box.slices]
    used = dict(params)

    if dtype == DistortionType.BLANK:
        new = np.zeros_like(region)
    elif dtype == DistortionType.BLURRED:
        sigma = float(params["blur_sigma"])
        m = int(np.ceil(4 * sigma))
        ctx = BBox(max(0, box.x0 - m), max(0, box.y0 - m), min(w, box.x1 + m), min(h, box.y1 + m))
        blurred = ndimage.gaussian_filter(out[ctx.slices], sigma=sigma, mode="reflect", truncate=4.0)
        new = blurred[box.y0 - ctx.y0 : box.y1 - ctx.y0, box.x0 - ctx.x0 : box.x1 - ctx.x0]
    elif dtype == DistortionType.MISLOCATE:
        if "src_x0" in params:
            sx, sy = int(params["src_x0"]), int(params["src_y0"])
        else:
            sx, sy = _mislocate_source(rng, box, h, w)
        src = BBox(sx, sy, sx + box.width, sy + box.height)
        if (sx, sy) == (box.x0, box.y0):
            raise ValidationError("mislocate source equals the target region")
        new = crop(out, src)
        used.update(src_x0=float(sx), src_y0=float(sy))
    elif dtype == DistortionType.SALT_PEPPER:
        frac = float(params["sp_fraction"])
        n = int(round(frac * region.size))
        new = region.copy()
        if n:
            idx = rng.choice(region.size, size=n, replace=False)
            new.ravel()[idx] = rng.integers(0, 2, size=n).astype(np.float64)
    elif dtype == DistortionType.ROTATE:
        k = int(params["quarter_turns"])
        if k % 2 and box.width != box.height:
            raise ValidationError(f"odd quarter turns need a square box, got {box.as_list()}")
        new = np.rot90(region, k=k)
    elif dtype == DistortionType.SPECKLE:
        sigma = float(params["speckle_sigma"])
        new = region * (1.0 + rng.normal(0.0, sigma, size=region.shape))
    else:  # pragma: no cover - IntEnum exhausts the codes
        raise ValidationError(f"unhandled distortion {dtype}")

    out[box.slices] = np.clip(new, 0.0, 1.0)
    return out, used


def distort_sample(
    original: np.ndarray,
    plan: DistortionPlan,
    sample_id: str = "sample",
    original_ref: str = "",
) -> AnnotatedSample:
    h, w = original.shape
    running = np.array(original, dtype=np.float64, copy=True)
    records = []
    for k, item in enumerate(plan.items):
        item.box.check_within(h, w)
        rng = make_rng(plan.source_seed, k + 1)
        running, used = apply_distortion(running, item.box, item.dtype, item.params, rng)
        records.append(
            DistortionRecord(
                dtype=item.dtype,
                box=item.box,
                region_mask=item.box.mask(h, w),
                original_patch=crop(original, item.box),
                params=used,
            )
        )
    return AnnotatedSample(sample_id, running, original_ref, records, int(plan.source_seed))


def plan_and_distort(original: np.ndarray, config: DistortionConfig, seed: int, stream: int, sample_id: str = "sample", original_ref: str = "") -> AnnotatedSample:
    """Convenience: plan from the (seed, stream) key and apply it."""
    rng = make_rng(seed, stream)
    plan_seed = int(rng.integers(0, 2**63))
    plan = sample_plan(rng, config, original.shape, source_seed=plan_seed)
    return distort_sample(original, plan, sample_id, original_ref)


def distort_dataset(
    src: str | os.PathLike,
    out: str | os.PathLike,
    config: DistortionConfig,
    seed: int,
    force: bool = False,
    preview: int = 0,
    splits: Sequence[str] | None = None,
) -> dict[str, Any]:
    """Distort every phantom in ``src`` into an annotated dataset at ``out``.

    Sample ``sid`` is distorted with stream ``("distort", sid)`` so the output
    depends only on ``seed`` and the inputs. The first ``preview`` samples also
    get an ``original | distorted | labelled boxes`` PNG under ``preview/``.
    """
    src, out = Path(src), Path(out)
    manifest = read_manifest(src)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} is not empty; pass force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    wanted = list(manifest["splits"]) if splits is None else list(splits)
    new_splits: dict[str, list[str]] = {}
    shown = 0
    for name in wanted:
        new_splits[name] = []
        for sid in manifest["splits"][name]:
            original = load_sample(src, sid)
            if not isinstance(original, SegSample):
                raise ValidationError(f"{sid}: input dataset must contain phantom samples")
            config.validate(original.image.shape)
            sample = plan_and_distort(original.image, config, seed, stream_id("distort", sid), sid, f"images/{sid}.png")
            save_sample(sample, out)
            new_splits[name].append(sid)
            if shown < preview:
                buf = io.BytesIO()
                preview_panel(original.image, sample).save(buf, format="PNG")
                atomic_write_bytes(out / "preview" / f"{sid}.png", buf.getvalue())
                shown += 1
    return write_manifest(
        out,
        new_splits,
        extra={"kind": "distorted", "seed": int(seed), "source": str(src), "distortion": config.to_dict()},
    )
