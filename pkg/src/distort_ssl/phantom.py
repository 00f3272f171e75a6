"""Synthetic knee-like phantoms with bright effusion-like blobs."""
from __future__ import annotations

import json
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import ndimage

from .core_types import BBox, Instance, SegSample, ValidationError, make_rng, stream_id
from .dataset import atomic_write_json, save_sample, write_manifest


class GenerationError(RuntimeError):
    """Blob placement failed within the retry budget."""


@dataclass(frozen=True)
class PhantomParams:
    image_size: int = 320
    n_tissue_bands: tuple[int, int] = (3, 5)
    blob_count: tuple[int, int] = (0, 3)
    blob_area_fraction: tuple[float, float] = (0.002, 0.02)
    texture_noise_sigma: float = 0.02
    intensity_levels: tuple[float, ...] = (0.12, 0.26, 0.4, 0.52, 0.62)
    blob_intensity: tuple[float, float] = (0.8, 0.92)
    background: float = 0.04
    max_retries: int = 200

    def violations(self) -> list[str]:
        out = []
        if self.image_size < 128:
            out.append(f"image_size: must be >= 128, got {self.image_size}")
        for name in ("n_tissue_bands", "blob_count", "blob_area_fraction", "blob_intensity"):
            lo, hi = getattr(self, name)
            if lo > hi:
                out.append(f"{name}: range ({lo}, {hi}) is inverted")
        if self.n_tissue_bands[0] < 1:
            out.append("n_tissue_bands: need at least one band")
        if self.blob_count[0] < 0:
            out.append("blob_count: must be non-negative")
        lo, hi = self.blob_area_fraction
        if not (0 < lo and hi < 0.5):
            out.append(f"blob_area_fraction: ({lo}, {hi}) must lie in (0, 0.5)")
        if self.blob_area_fraction[0] == self.blob_area_fraction[1]:
            out.append("blob_area_fraction: range is degenerate")
        if self.texture_noise_sigma < 0:
            out.append("texture_noise_sigma: must be >= 0")
        if not self.intensity_levels:
            out.append("intensity_levels: empty")
        elif any(not 0 <= v <= 1 for v in self.intensity_levels):
            out.append("intensity_levels: values must lie in [0, 1]")
        else:
            gap = self.blob_intensity[0] - max(max(self.intensity_levels), self.background)
            if gap < 0.15:
                out.append(f"blob_intensity: must exceed brightest band by >= 0.15 (gap {gap:.3f})")
        if self.blob_intensity[1] > 1:
            out.append("blob_intensity: must be <= 1")
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ValidationError("; ".join(problems))

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "PhantomParams":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown phantom params: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _anatomy(rng: np.random.Generator, params: PhantomParams) -> tuple[np.ndarray, np.ndarray]:
    """Layered curved bands inside an elliptical joint region; returns (image, joint mask)."""
    n = params.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cy = n * rng.uniform(0.45, 0.55)
    cx = n * rng.uniform(0.45, 0.55)
    ry = n * rng.uniform(0.36, 0.44)
    rx = n * rng.uniform(0.38, 0.46)
    joint = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0

    n_bands = int(rng.integers(params.n_tissue_bands[0], params.n_tissue_bands[1] + 1))
    levels = np.asarray(params.intensity_levels, dtype=np.float64)
    band_values = rng.choice(levels, size=n_bands, replace=n_bands > levels.size)
    # Band boundaries are sinusoids spread between the top and bottom of the joint.
    edges = np.sort(rng.uniform(cy - ry, cy + ry, size=n_bands - 1))
    band_idx = np.zeros((n, n), dtype=np.int64)
    for e in edges:
        amp = rng.uniform(0.02, 0.08) * n
        freq = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0, 2 * np.pi)
        curve = e + amp * np.sin(2 * np.pi * freq * xx / n + phase)
        band_idx += (yy > curve).astype(np.int64)
    img = np.full((n, n), params.background)
    img[joint] = band_values[band_idx[joint]]

    # A couple of bone-like ellipses with their own intensity.
    for _ in range(int(rng.integers(1, 3))):
        by = rng.uniform(cy - 0.6 * ry, cy + 0.6 * ry)
        bx = rng.uniform(cx - 0.6 * rx, cx + 0.6 * rx)
        ay = n * rng.uniform(0.06, 0.14)
        ax = n * rng.uniform(0.08, 0.18)
        bone = (((yy - by) / ay) ** 2 + ((xx - bx) / ax) ** 2 <= 1.0) & joint
        img[bone] = rng.choice(levels)
    img = ndimage.gaussian_filter(img, sigma=1.5, mode="reflect")
    return img, joint


def _blob_mask(rng: np.random.Generator, n: int, target_area: float, joint: np.ndarray) -> np.ndarray:
    """Union of 1-3 overlapping ellipses with smoothed boundary, roughly ``target_area`` pixels."""
    k = int(rng.integers(1, 4))
    r_base = np.sqrt(target_area / (np.pi * k)) * 1.15
    ys, xs = np.nonzero(joint)
    pick = int(rng.integers(ys.size))
    cy, cx = float(ys[pick]), float(xs[pick])
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    field_ = np.zeros((n, n))
    for j in range(k):
        oy = cy + (rng.uniform(-1, 1) * r_base if j else 0.0)
        ox = cx + (rng.uniform(-1, 1) * r_base if j else 0.0)
        ay = r_base * rng.uniform(0.6, 1.4)
        ax = r_base * rng.uniform(0.6, 1.4)
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = (xx - ox) * c + (yy - oy) * s
        v = -(xx - ox) * s + (yy - oy) * c
        field_ = np.maximum(field_, ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0).astype(np.float64))
    smooth = ndimage.gaussian_filter(field_, sigma=max(1.0, 0.25 * r_base))
    mask = smooth > 0.5
    if mask.any():
        labels, count = ndimage.label(mask)
        if count > 1:
            sizes = ndimage.sum(mask, labels, index=range(1, count + 1))
            mask = labels == (int(np.argmax(sizes)) + 1)
    return mask


def generate_phantom(seed: int, params: PhantomParams = PhantomParams(), sample_id: str | None = None) -> SegSample:
    params.validate()
    rng = make_rng(seed, stream_id("phantom"))
    n = params.image_size
    img, joint = _anatomy(rng, params)

    n_blobs = int(rng.integers(params.blob_count[0], params.blob_count[1] + 1))
    lo, hi = params.blob_area_fraction
    occupied = np.zeros((n, n), dtype=bool)
    masks: list[np.ndarray] = []
    retries = 0
    while len(masks) < n_blobs:
        if retries >= params.max_retries:
            raise GenerationError(
                f"placed {len(masks)}/{n_blobs} blobs after {retries} retries (seed={seed}, size={n})"
            )
        retries += 1
        target = rng.uniform(lo, hi) * n * n
        mask = _blob_mask(rng, n, target, joint)
        frac = mask.sum() / (n * n)
        if not lo <= frac <= hi:
            continue
        if (mask & ~joint).any() or (ndimage.binary_dilation(mask, iterations=2) & occupied).any():
            continue
        masks.append(mask)
        occupied |= mask

    instances = []
    for mask in masks:
        level = rng.uniform(*params.blob_intensity)
        alpha = ndimage.gaussian_filter(mask.astype(np.float64), sigma=0.8)
        alpha = np.where(mask, np.maximum(alpha, 0.85), alpha * 0.5)
        img = img * (1 - alpha) + level * alpha
        instances.append(Instance(1, BBox.from_mask(mask), mask))

    if params.texture_noise_sigma > 0:
        img = img + rng.normal(0.0, params.texture_noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return SegSample(sample_id or f"seed{seed}", img, instances)


def split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items over ``ratios``."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"split ratios must be non-negative and sum to 1, got {list(ratios)}")
    raw = [n * r for r in ratios]
    counts = [int(np.floor(x + 1e-9)) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def sample_seed_for(seed: int, index: int) -> int:
    return stream_id(seed, index, "phantom-sample")


def _gen_one(args: tuple[int, int, PhantomParams, str]) -> str:
    seed, index, params, out = args
    sid = f"ph{index:06d}"
    s = sample_seed_for(seed, index)
    save_sample(generate_phantom(s, params, sid), out, seed=s)
    return sid


def generate_corpus(
    seed: int,
    params: PhantomParams,
    n: int,
    out: str | os.PathLike,
    split_ratios: Sequence[float] = (0.8, 0.1, 0.1),
    force: bool = False,
    workers: int = 1,
) -> dict[str, Any]:
    """Write ``n`` phantoms to ``out`` and return the manifest."""
    params.validate()
    counts = split_counts(n, split_ratios)
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} is not empty; pass force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / "phantom.json", params.to_dict())

    jobs = [(seed, i, params, str(out)) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            ids = list(pool.map(_gen_one, jobs, chunksize=8))
    else:
        ids = [_gen_one(job) for job in jobs]

    names = ["train", "val", "test"] if len(counts) == 3 else [f"split{i}" for i in range(len(counts))]
    splits, start = {}, 0
    for name, c in zip(names, counts):
        splits[name] = ids[start : start + c]
        start += c
    return write_manifest(
        out,
        splits,
        extra={"kind": "phantom", "seed": int(seed), "n": n, "split_ratios": list(split_ratios)},
    )


def load_params(path: str | os.PathLike) -> PhantomParams:
    return PhantomParams.from_dict(json.loads(Path(path).read_text()))
