"""On-disk dataset layout.

::

    <root>/manifest.json          ids + split assignment
    <root>/images/<id>.png        16-bit grayscale
    <root>/ann/<id>.json          one annotation object per sample
    <root>/patches/<id>_<k>.png   original patch of record k (distorted sets only)

Masks are stored as row-major run-length counts starting with a run of zeros.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from PIL import Image as PILImage

from .core_types import (
    AnnotatedSample,
    BBox,
    DistortionRecord,
    DistortionType,
    Instance,
    SegSample,
    ValidationError,
    as_image,
)

SCHEMA_VERSION = 1
QMAX = 65535


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: str | os.PathLike, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def quantize16(image: np.ndarray) -> np.ndarray:
    """Snap pixel values to the 16-bit grid used on disk."""
    return np.round(np.asarray(image, dtype=np.float64) * QMAX) / QMAX


def write_png16(path: str | os.PathLike, image: np.ndarray) -> None:
    img = as_image(image)
    q = np.round(img * QMAX).astype(np.uint16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    PILImage.fromarray(q).save(tmp, format="PNG")
    os.replace(tmp, path)


def read_png16(path: str | os.PathLike) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ValidationError(f"{path}: expected single-channel PNG, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) / QMAX


def rle_encode(mask: np.ndarray) -> dict[str, Any]:
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": list(mask.shape), "counts": counts}


def rle_decode(rle: dict[str, Any]) -> np.ndarray:
    h, w = (int(v) for v in rle["size"])
    counts = [int(c) for c in rle["counts"]]
    if any(c < 0 for c in counts) or sum(counts) != h * w:
        raise ValidationError(f"RLE counts do not cover a {h}x{w} mask")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    return np.repeat(values, counts).reshape(h, w)


def _box_from_json(raw: Any, where: str) -> BBox:
    try:
        x0, y0, x1, y1 = (int(v) for v in raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: malformed box {raw!r}") from exc
    try:
        return BBox(x0, y0, x1, y1)
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def _check_schema(obj: dict[str, Any], path: Path, kind: str) -> None:
    version = obj.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(f"{path}: schema_version {version!r} != {SCHEMA_VERSION}")
    if obj.get("kind") != kind:
        raise ValidationError(f"{path}: expected kind {kind!r}, got {obj.get('kind')!r}")


def save_sample(sample: AnnotatedSample | SegSample, root: str | os.PathLike, seed: int | None = None) -> Path:
    """Write one sample into the dataset at ``root``; returns the annotation path."""
    root = Path(root)
    sid = sample.sample_id
    if isinstance(sample, AnnotatedSample):
        h, w = sample.distorted.shape
        write_png16(root / "images" / f"{sid}.png", sample.distorted)
        records = []
        for k, rec in enumerate(sample.records):
            rec.validate(h, w)
            patch_rel = f"patches/{sid}_{k}.png"
            write_png16(root / patch_rel, rec.original_patch)
            records.append(
                {
                    "dtype": int(rec.dtype),
                    "box": rec.box.as_list(),
                    "params": {key: float(v) for key, v in rec.params.items()},
                    "patch": patch_rel,
                    "mask": rle_encode(rec.region_mask),
                }
            )
        ann = {
            "schema_version": SCHEMA_VERSION,
            "kind": "distorted",
            "sample_id": sid,
            "seed": int(sample.seed),
            "original_ref": sample.original_ref,
            "height": h,
            "width": w,
            "records": records,
        }
    elif isinstance(sample, SegSample):
        sample.validate()
        h, w = sample.image.shape
        write_png16(root / "images" / f"{sid}.png", sample.image)
        ann = {
            "schema_version": SCHEMA_VERSION,
            "kind": "seg",
            "sample_id": sid,
            "height": h,
            "width": w,
            "instances": [
                {"class_id": int(inst.class_id), "box": inst.box.as_list(), "mask": rle_encode(inst.mask)}
                for inst in sample.instances
            ],
        }
        if seed is not None:
            ann["seed"] = int(seed)
    else:
        raise TypeError(f"cannot save {type(sample).__name__}")
    ann_path = root / "ann" / f"{sid}.json"
    atomic_write_json(ann_path, ann)
    return ann_path


def load_sample(root: str | os.PathLike, sample_id: str) -> AnnotatedSample | SegSample:
    root = Path(root)
    ann_path = root / "ann" / f"{sample_id}.json"
    obj = json.loads(ann_path.read_text())
    kind = obj.get("kind")
    if kind == "distorted":
        return _load_annotated(root, ann_path, obj)
    if kind == "seg":
        return _load_seg(root, ann_path, obj)
    raise ValidationError(f"{ann_path}: unknown sample kind {kind!r}")


def _load_image(root: Path, sample_id: str, h: int, w: int, where: Path) -> np.ndarray:
    img = read_png16(root / "images" / f"{sample_id}.png")
    if img.shape != (h, w):
        raise ValidationError(f"{where}: image shape {img.shape} != declared {(h, w)}")
    return img


def _load_annotated(root: Path, path: Path, obj: dict[str, Any]) -> AnnotatedSample:
    _check_schema(obj, path, "distorted")
    h, w = int(obj["height"]), int(obj["width"])
    image = _load_image(root, obj["sample_id"], h, w, path)
    records = []
    for k, raw in enumerate(obj["records"]):
        where = f"{path}: record {k}"
        try:
            dtype = DistortionType(int(raw["dtype"]))
        except ValueError as exc:
            raise ValidationError(f"{where}: unknown distortion code {raw['dtype']!r}") from exc
        box = _box_from_json(raw["box"], where)
        mask = rle_decode(raw["mask"])
        patch = read_png16(root / raw["patch"])
        rec = DistortionRecord(dtype, box, mask, patch, {key: float(v) for key, v in raw["params"].items()})
        try:
            rec.validate(h, w)
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from exc
        records.append(rec)
    return AnnotatedSample(obj["sample_id"], image, obj["original_ref"], records, int(obj["seed"]))


def _load_seg(root: Path, path: Path, obj: dict[str, Any]) -> SegSample:
    _check_schema(obj, path, "seg")
    h, w = int(obj["height"]), int(obj["width"])
    image = _load_image(root, obj["sample_id"], h, w, path)
    instances = []
    for k, raw in enumerate(obj["instances"]):
        where = f"{path}: instance {k}"
        box = _box_from_json(raw["box"], where)
        mask = rle_decode(raw["mask"])
        instances.append(Instance(int(raw["class_id"]), box, mask))
    sample = SegSample(obj["sample_id"], image, instances)
    try:
        sample.validate()
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    return sample


def sample_seed(root: str | os.PathLike, sample_id: str) -> int | None:
    obj = json.loads((Path(root) / "ann" / f"{sample_id}.json").read_text())
    return obj.get("seed")


# Manifest.

def write_manifest(root: str | os.PathLike, splits: dict[str, list[str]], extra: dict[str, Any] | None = None) -> dict[str, Any]:
    ids = [sid for name in ("train", "val", "test") for sid in splits.get(name, [])]
    ids += [sid for name, part in splits.items() if name not in ("train", "val", "test") for sid in part]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "ids": ids,
        "splits": {name: list(part) for name, part in splits.items()},
    }
    if extra:
        manifest.update(extra)
    atomic_write_json(Path(root) / "manifest.json", manifest)
    return manifest


def read_manifest(root: str | os.PathLike) -> dict[str, Any]:
    path = Path(root) / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(f"{path}: schema_version {manifest.get('schema_version')!r} != {SCHEMA_VERSION}")
    seen: set[str] = set()
    for name, part in manifest["splits"].items():
        overlap = seen.intersection(part)
        if overlap:
            raise ValidationError(f"{path}: split {name!r} overlaps others on {sorted(overlap)[:3]}")
        seen.update(part)
    return manifest


def split_ids(manifest: dict[str, Any], split: str) -> list[str]:
    try:
        return list(manifest["splits"][split])
    except KeyError as exc:
        raise ValidationError(f"manifest has no split {split!r}") from exc


def hash_tree(root: str | os.PathLike, patterns: Iterable[str] = ("manifest.json", "images/*", "ann/*", "patches/*")) -> str:
    """SHA-256 over the relative paths and bytes of dataset files."""
    root = Path(root)
    digest = hashlib.sha256()
    files = sorted({p for pat in patterns for p in root.glob(pat) if p.is_file()})
    for p in files:
        digest.update(str(p.relative_to(root)).encode())
        digest.update(p.read_bytes())
    return digest.hexdigest()
