"""Shared value types, deterministic randomness and raster helpers.

Images are plain 2-D ``float64`` numpy arrays with values in ``[0, 1]``;
:func:`as_image` is the single validation gate. Boxes use the half-open
convention ``[x0, x1) x [y0, y1)`` throughout.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np


class ValidationError(ValueError):
    """An input violates a documented invariant."""


def as_image(arr: Any, *, name: str = "image") -> np.ndarray:
    """Validate ``arr`` as a single-channel image and return a float64 copy-free view when possible."""
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError(f"{name}: expected 2-D array, got shape {img.shape}")
    if img.shape[0] <= 0 or img.shape[1] <= 0:
        raise ValidationError(f"{name}: empty image {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValidationError(f"{name}: non-finite pixel values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValidationError(f"{name}: pixel values outside [0, 1] ({img.min()}, {img.max()})")
    return img


@dataclass(frozen=True, order=True)
class BBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        for v in (self.x0, self.y0, self.x1, self.y1):
            if int(v) != v:
                raise ValidationError(f"box coordinates must be integers: {self}")
        object.__setattr__(self, "x0", int(self.x0))
        object.__setattr__(self, "y0", int(self.y0))
        object.__setattr__(self, "x1", int(self.x1))
        object.__setattr__(self, "y1", int(self.y1))
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValidationError(f"degenerate box {self.as_list()}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    def fits(self, height: int, width: int) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height

    def check_within(self, height: int, width: int) -> None:
        if not self.fits(height, width):
            raise ValidationError(
                f"box {self.as_list()} out of bounds for image {height}x{width}"
            )

    def mask(self, height: int, width: int) -> np.ndarray:
        m = np.zeros((height, width), dtype=bool)
        m[self.slices] = True
        return m

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "BBox":
        """Tight bounding box of a nonempty binary mask."""
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            raise ValidationError("empty mask has no bounding box")
        return cls(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


class DistortionType(enum.IntEnum):
    BLANK = 1
    BLURRED = 2
    MISLOCATE = 3
    SALT_PEPPER = 4
    ROTATE = 5
    SPECKLE = 6


@dataclass(frozen=True, eq=False)
class DistortionRecord:
    dtype: DistortionType
    box: BBox
    region_mask: np.ndarray
    original_patch: np.ndarray
    params: dict[str, float] = field(default_factory=dict)

    def validate(self, height: int, width: int, size_range: tuple[int, int] | None = None) -> None:
        self.box.check_within(height, width)
        if self.region_mask.shape != (height, width):
            raise ValidationError(
                f"region mask shape {self.region_mask.shape} != image {(height, width)}"
            )
        if not np.array_equal(self.region_mask.astype(bool), self.box.mask(height, width)):
            raise ValidationError(f"region mask support differs from box {self.box.as_list()}")
        if self.original_patch.shape != (self.box.height, self.box.width):
            raise ValidationError(
                f"patch shape {self.original_patch.shape} != box dims {(self.box.height, self.box.width)}"
            )
        if size_range is not None:
            lo, hi = size_range
            if not (lo <= self.box.width <= hi and lo <= self.box.height <= hi):
                raise ValidationError(f"box sides of {self.box.as_list()} outside {size_range}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DistortionRecord):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.box == other.box
            and np.array_equal(self.region_mask, other.region_mask)
            and np.array_equal(self.original_patch, other.original_patch)
            and self.params == other.params
        )


@dataclass(frozen=True, eq=False)
class AnnotatedSample:
    sample_id: str
    distorted: np.ndarray
    original_ref: str
    records: list[DistortionRecord]
    seed: int

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AnnotatedSample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and np.array_equal(self.distorted, other.distorted)
            and self.original_ref == other.original_ref
            and self.records == other.records
            and self.seed == other.seed
        )


@dataclass(frozen=True, eq=False)
class Instance:
    class_id: int
    box: BBox
    mask: np.ndarray

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.class_id == other.class_id
            and self.box == other.box
            and np.array_equal(self.mask, other.mask)
        )


@dataclass(frozen=True, eq=False)
class SegSample:
    sample_id: str
    image: np.ndarray
    instances: list[Instance]

    def validate(self) -> None:
        h, w = self.image.shape
        for k, inst in enumerate(self.instances):
            if inst.class_id < 1:
                raise ValidationError(f"instance {k}: class_id must be >= 1")
            if inst.mask.shape != (h, w):
                raise ValidationError(f"instance {k}: mask shape {inst.mask.shape} != image {(h, w)}")
            if not inst.mask.any():
                raise ValidationError(f"instance {k}: empty mask")
            inst.box.check_within(h, w)
            outside = inst.mask.copy()
            outside[inst.box.slices] = False
            if outside.any():
                raise ValidationError(f"instance {k}: mask extends outside box {inst.box.as_list()}")

    def union_mask(self) -> np.ndarray:
        m = np.zeros(self.image.shape, dtype=bool)
        for inst in self.instances:
            m |= inst.mask.astype(bool)
        return m

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SegSample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and np.array_equal(self.image, other.image)
            and self.instances == other.instances
        )


# Randomness. Philox is counter-based: the key (seed, stream) fully fixes the
# sequence, independent of platform and of draw order in other streams.
RNG_ALGORITHM = "philox4x64"
_U64 = (1 << 64) - 1


def stream_id(*parts: int | str) -> int:
    """Fold integers/strings into a stable 64-bit stream id."""
    entropy: list[int] = []
    for p in parts:
        if isinstance(p, str):
            entropy.extend(p.encode("utf-8"))
            entropy.append(0xFF_FFFF)
        else:
            entropy.append(int(p) & _U64)
    if not entropy:
        return 0
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    key = (int(seed) & _U64) | ((int(stream) & _U64) << 64)
    return np.random.Generator(np.random.Philox(key=key))


# Raster operations.

def crop(image: np.ndarray, box: BBox) -> np.ndarray:
    h, w = image.shape
    box.check_within(h, w)
    return image[box.slices].copy()


def paste(image: np.ndarray, patch: np.ndarray, box: BBox) -> np.ndarray:
    """Return a copy of ``image`` with ``patch`` written into ``box``."""
    h, w = image.shape
    box.check_within(h, w)
    if patch.shape != (box.height, box.width):
        raise ValidationError(f"patch shape {patch.shape} does not match box {box.as_list()}")
    out = np.array(image, copy=True)
    out[box.slices] = patch
    return out


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling.

    Output pixel ``i`` samples source coordinate ``i * (in - 1) / (out - 1)``,
    so the four corner pixels map exactly onto the source corners. A target
    length of 1 samples the source centre.
    """
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"target dims must be positive, got {out_h}x{out_w}")
    src = np.asarray(image, dtype=np.float64)
    in_h, in_w = src.shape
    if (in_h, in_w) == (out_h, out_w):
        return src.copy()

    def coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if n_out == 1:
            pos = np.array([(n_in - 1) / 2.0])
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(in_h, out_h)
    x0, x1, fx = coords(in_w, out_w)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class Detection:
    """One predicted region: box, class code (0 = background), score and head patch."""

    box: BBox
    class_id: int
    score: float
    patch: np.ndarray | None = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Detection):
            return NotImplemented
        same_patch = (self.patch is None and other.patch is None) or (
            self.patch is not None and other.patch is not None and np.array_equal(self.patch, other.patch)
        )
        return self.box == other.box and self.class_id == other.class_id and self.score == other.score and same_patch
