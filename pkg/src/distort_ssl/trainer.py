"""Two-phase training: distortion pretraining, then fine-tuning for segmentation.

Every random choice during training is keyed by ``(seed, step, sample_id)``
so a run is reproducible bit-for-bit in single-threaded mode.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .core_types import AnnotatedSample, BBox, Instance, SegSample, ValidationError, make_rng, stream_id
from .dataset import atomic_write_json, atomic_write_text, load_sample, read_manifest, split_ids, write_png16
from .distortions import DistortionConfig, plan_and_distort
from .metrics import (
    SSL_FIELDS,
    aggregate_seg,
    dice_from_counts,
    eval_ssl,
    match_detections,
    pixel_counts,
)
from .model.boxes import iou_matrix
from .model.checkpoint import Checkpoint, checkpoint_from_model, load_checkpoint, model_from_checkpoint, save_checkpoint
from .model.net import PHASES, NetConfig, RegionNet, backbone_checksum, predicted_mask, recover_image

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """A non-finite loss was produced; the last good checkpoint was kept."""


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretext"
    steps: int = 500
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    data: str = ""
    init: str = "random"
    freeze_backbone: bool | None = None
    train_size: int | None = None
    eval_every: int = 0
    eval_size: int | None = None
    checkpoint_every: int = 0
    out: str = ""
    augment: bool = True
    deterministic: bool = True
    workers: int = 1
    net: NetConfig = field(default_factory=NetConfig)
    distortion: DistortionConfig = field(default_factory=DistortionConfig)

    @property
    def frozen(self) -> bool:
        if self.freeze_backbone is None:
            return self.phase == "downstream"
        return bool(self.freeze_backbone)

    def violations(self) -> list[str]:
        out = []
        if self.phase not in PHASES:
            out.append(f"phase: must be one of {PHASES}, got {self.phase!r}")
        if not self.learning_rate > 0:
            out.append(f"learning_rate: must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            out.append(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            out.append(f"steps: must be >= 0, got {self.steps}")
        if self.train_size is not None and self.train_size < 1:
            out.append(f"train_size: must be >= 1, got {self.train_size}")
        if self.phase == "pretext" and self.init != "random":
            out.append("init: pretext training starts from random weights")
        if self.workers < 1:
            out.append("workers: must be >= 1")
        out += [f"net.{v}" for v in self.net.violations(self.distortion.size_range if self.phase == "pretext" else None)]
        out += [f"distortion.{v}" for v in self.distortion.violations((self.net.input_size, self.net.input_size))]
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ValidationError("; ".join(problems))

    def to_dict(self) -> dict[str, Any]:
        d = {k: v for k, v in asdict(self).items() if k not in ("net", "distortion")}
        d["net"] = self.net.to_dict()
        d["distortion"] = self.distortion.to_dict()
        return d

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "TrainConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        kwargs = dict(raw)
        if "net" in kwargs and isinstance(kwargs["net"], dict):
            kwargs["net"] = NetConfig.from_dict(kwargs["net"])
        if "distortion" in kwargs and isinstance(kwargs["distortion"], dict):
            kwargs["distortion"] = DistortionConfig.from_dict(kwargs["distortion"])
        return cls(**kwargs)


def desk_config(image_size: int = 160, **overrides: Any) -> TrainConfig:
    """Desk-scale defaults with region sizes and anchors scaled to ``image_size``."""
    f = image_size / 320
    net = NetConfig(
        input_size=image_size,
        anchor_sides=tuple(round(a * f) for a in NetConfig.anchor_sides),
        seg_anchor_sides=tuple(round(a * f) for a in NetConfig.seg_anchor_sides),
    )
    return replace(TrainConfig(net=net, distortion=DistortionConfig().scaled(image_size)), **overrides)


# Data.

class ImageStore:
    """Original images of a phantom dataset, loaded once and kept as float32."""

    def __init__(self, root: str | os.PathLike, ids: Sequence[str]):
        self.root = Path(root)
        self.ids = list(ids)
        self._images: dict[str, np.ndarray] = {}
        self._samples: dict[str, SegSample] = {}

    def sample(self, sid: str) -> SegSample:
        if sid not in self._samples:
            s = load_sample(self.root, sid)
            if not isinstance(s, SegSample):
                raise ValidationError(f"{sid}: expected a phantom (seg) sample")
            self._samples[sid] = s
        return self._samples[sid]

    def image(self, sid: str) -> np.ndarray:
        return self.sample(sid).image


def _dataset_ids(config: TrainConfig, split: str, size: int | None) -> list[str]:
    if not config.data:
        raise ValidationError("data: dataset path is required")
    ids = split_ids(read_manifest(config.data), split)
    if size is not None:
        if size > len(ids):
            raise ValidationError(f"requested {size} {split} samples but only {len(ids)} exist")
        ids = ids[:size]
    if not ids:
        raise ValidationError(f"dataset split {split!r} is empty")
    return ids


def distorted_sample(store: ImageStore, sid: str, config: TrainConfig, key: int) -> AnnotatedSample:
    img = store.image(sid)
    return plan_and_distort(img, config.distortion, config.seed, stream_id(key, sid), sid, f"images/{sid}.png")


def dihedral(image: np.ndarray, k: int) -> np.ndarray:
    """One of the eight square symmetries: ``k % 4`` quarter turns, transposed first when ``k >= 4``."""
    out = image.T if k >= 4 else image
    return np.ascontiguousarray(np.rot90(out, k % 4))


def augment_seg(sample: SegSample, k: int) -> SegSample:
    if k == 0:
        return sample
    instances = []
    for inst in sample.instances:
        m = dihedral(inst.mask, k)
        instances.append(Instance(inst.class_id, BBox.from_mask(m), m))
    return SegSample(sample.sample_id, dihedral(sample.image, k), instances)


def _batch_ids(config: TrainConfig, ids: Sequence[str], step: int) -> list[str]:
    rng = make_rng(config.seed, stream_id("batch", config.phase, step))
    replace_ = len(ids) < config.batch_size
    return [ids[i] for i in rng.choice(len(ids), size=config.batch_size, replace=replace_)]


def _to_tensor(images: Sequence[np.ndarray], dtype: torch.dtype) -> torch.Tensor:
    return torch.as_tensor(np.stack(images)[:, None], dtype=dtype)


# Training loop.

class _Logger:
    """JSON-lines loss log plus a ``timing.jsonl`` sidecar, so the loss log stays bit-reproducible."""

    def __init__(self, path: Path | None):
        self.path = path
        self.lines: list[dict[str, Any]] = []
        self.t0 = time.perf_counter()
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")
            self.timing = path.with_name("timing.jsonl")
            self.timing.write_text("")

    def write(self, entry: dict[str, Any]) -> None:
        self.lines.append(entry)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
            with self.timing.open("a") as fh:
                fh.write(json.dumps({"step": entry["step"], "wall_time": round(time.perf_counter() - self.t0, 3)}) + "\n")


def _setup_torch(config: TrainConfig) -> None:
    if config.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _run(
    model: RegionNet,
    config: TrainConfig,
    make_targets,
    ids: list[str],
    out: Path | None,
    evaluator=None,
) -> tuple[Checkpoint, list[dict[str, Any]]]:
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    logger = _Logger(out / "train_log.jsonl" if out else None)
    dtype = next(model.parameters()).dtype
    cfg_dict = {k: v for k, v in config.to_dict().items() if k != "out"}
    last_good = checkpoint_from_model(model, 0, config.seed, cfg_dict)
    best: tuple[float, Checkpoint] | None = None
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 and not config.deterministic else None
    t0 = time.perf_counter()
    model.train()
    try:
        for step in range(config.steps):
            batch = _batch_ids(config, ids, step)
            if pool is not None:
                targets = list(pool.map(lambda sid: make_targets(sid, step), batch))
            else:
                targets = [make_targets(sid, step) for sid in batch]
            images = [t.distorted if isinstance(t, AnnotatedSample) else t.image for t in targets]
            inputs = model.forward_train(_to_tensor(images, dtype), targets, make_rng(config.seed, stream_id("roi", config.phase, step)))
            total, report = inputs.loss()
            if not math.isfinite(report.l_total):
                if out:
                    save_checkpoint(last_good, out / "last_good")
                raise TrainingDiverged(f"non-finite loss at step {step}: {report.to_dict()}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            logger.write({"step": step + 1, "phase": config.phase, **report.to_dict()})
            last_done = step + 1
            if config.checkpoint_every and last_done % config.checkpoint_every == 0:
                last_good = checkpoint_from_model(model, last_done, config.seed, cfg_dict)
                if out:
                    save_checkpoint(last_good, out / f"step{last_done:06d}")
            if evaluator is not None and config.eval_every and last_done % config.eval_every == 0:
                score = evaluator(model)
                log.info("step %d validation score %.4f", last_done, score)
                if best is None or score > best[0]:
                    best = (score, checkpoint_from_model(model, last_done, config.seed, cfg_dict))
                model.train()
    finally:
        if pool is not None:
            pool.shutdown()
    log.info("%s: %d steps in %.1f s", config.phase, config.steps, time.perf_counter() - t0)
    final = checkpoint_from_model(model, config.steps, config.seed, cfg_dict)
    if out:
        save_checkpoint(final, out / "final")
    if best is not None:
        if evaluator is not None:
            score = evaluator(model)
            if score > best[0]:
                best = (score, final)
        final = best[1]
        final.header["selected_by"] = "validation"
        if out:
            save_checkpoint(final, out / "best")
    return final, logger.lines


def pretrain(config: TrainConfig) -> Checkpoint:
    """Train the network on freshly distorted images; returns the final (or best) checkpoint."""
    if config.phase != "pretext":
        raise ValidationError("pretrain needs phase='pretext'")
    config.validate()
    _setup_torch(config)
    ids = _dataset_ids(config, "train", config.train_size)
    store = ImageStore(config.data, ids)
    model = RegionNet(config.net, "pretext", seed=config.seed)
    out = Path(config.out) if config.out else None

    def targets(sid: str, step: int) -> AnnotatedSample:
        return distorted_sample(store, sid, config, stream_id("pretext-step", step))

    evaluator = None
    if config.eval_every:
        val_ids = _dataset_ids(config, "val", config.eval_size)
        val_store = ImageStore(config.data, val_ids)
        evaluator = lambda m: evaluate_ssl_model(m, val_store, val_ids, config)["mean"]["psnr_delta"]
    ckpt, _ = _run(model, config, targets, ids, out, evaluator)
    return ckpt


def load_init(init: str | Checkpoint | None) -> Checkpoint | None:
    if init is None or isinstance(init, Checkpoint):
        return init
    if init == "random":
        return None
    return load_checkpoint(init)


def build_finetune_model(config: TrainConfig, init: Checkpoint | None) -> RegionNet:
    """Downstream model: random, pretext backbone plus fresh heads, or a downstream checkpoint as-is."""
    if init is None:
        model = RegionNet(config.net, "downstream", seed=config.seed)
    elif init.phase == "downstream":
        if init.num_classes != config.net.num_downstream_classes:
            raise ValidationError(
                f"checkpoint has {init.num_classes} downstream classes, config expects {config.net.num_downstream_classes}"
            )
        if init.net_config != config.net:
            raise ValidationError("downstream checkpoint net config differs from config.net")
        model = model_from_checkpoint(init)
    else:
        old = init.net_config
        if old.input_size != config.net.input_size or old.backbone_channels != config.net.backbone_channels:
            raise ValidationError("checkpoint backbone geometry differs from config.net")
        model = model_from_checkpoint(init)
        model.cfg = config.net
        model.set_phase("downstream", seed=config.seed)
    model.freeze_backbone(config.frozen)
    return model


def finetune(config: TrainConfig, init: str | Checkpoint | None = None) -> Checkpoint:
    """Train downstream heads (and the backbone unless frozen) on labelled phantoms."""
    if config.phase != "downstream":
        raise ValidationError("finetune needs phase='downstream'")
    config.validate()
    _setup_torch(config)
    init_ckpt = load_init(init if init is not None else config.init)
    ids = _dataset_ids(config, "train", config.train_size)
    store = ImageStore(config.data, ids)
    model = build_finetune_model(config, init_ckpt)
    before = backbone_checksum(model)
    out = Path(config.out) if config.out else None

    evaluator = None
    if config.eval_every:
        val_ids = _dataset_ids(config, "val", config.eval_size)
        val_store = ImageStore(config.data, val_ids)
        evaluator = lambda m: evaluate_seg_model(m, val_store, val_ids)["aggregate"]["dice"]
    def targets(sid: str, step: int) -> SegSample:
        s = store.sample(sid)
        if not config.augment:
            return s
        k = int(make_rng(config.seed, stream_id("augment", step, sid)).integers(8))
        return augment_seg(s, k)

    ckpt, _ = _run(model, config, targets, ids, out, evaluator)
    if config.frozen and backbone_checksum(model) != before:
        raise RuntimeError("backbone parameters changed while frozen")
    ckpt.header["init"] = "random" if init_ckpt is None else init_ckpt.header.get("config_hash", "checkpoint")
    ckpt.header["frozen_backbone"] = config.frozen
    return ckpt


# Evaluation.

def _model_dtype(model: RegionNet) -> torch.dtype:
    return next(model.parameters()).dtype


def roi_type_accuracy(model: RegionNet, samples: Sequence[AnnotatedSample]) -> tuple[float, int]:
    """Type accuracy of the box head over RPN proposals that match a distortion (IoU >= roi_pos_iou).

    The predicted type is the argmax over the six foreground classes.
    """
    from .model.net import roi_align  # local: keeps the hot path import explicit

    cfg = model.cfg
    correct = total = 0
    model.eval()
    with torch.no_grad():
        for s in samples:
            x = torch.as_tensor(s.distorted[None, None], dtype=_model_dtype(model))
            feats = model.backbone(x)
            obj, deltas = model.heads.rpn(feats)
            props, _ = model._proposals(obj[0], deltas[0], cfg.proposals_infer)
            gt = np.array([r.box.as_list() for r in s.records], dtype=np.float64)
            if len(props) == 0 or len(gt) == 0:
                continue
            ious = iou_matrix(props, gt)
            hit = ious.max(axis=1) >= cfg.roi_pos_iou
            if not hit.any():
                continue
            rf = roi_align(feats, torch.as_tensor(props[hit], dtype=feats.dtype), torch.zeros(int(hit.sum())), cfg.box_pool, cfg.stride)
            logits, _ = model.heads.box(rf)
            pred = logits[:, 1:].argmax(dim=1).numpy() + 1
            truth = np.array([int(s.records[j].dtype) for j in ious[hit].argmax(axis=1)])
            correct += int((pred == truth).sum())
            total += int(hit.sum())
    return (correct / total if total else 0.0), total


def write_dump(dump_dir: Path, original: np.ndarray, sample: AnnotatedSample, dets: Sequence[Any], recovered: np.ndarray) -> None:
    """Inference dump: detections and ground truth as JSON plus original/distorted/recovered PNGs."""
    sid = sample.sample_id
    for tag, img in (("original", original), ("distorted", sample.distorted), ("recovered", recovered)):
        write_png16(dump_dir / f"{sid}_{tag}.png", img)
    atomic_write_json(
        dump_dir / f"{sid}.json",
        {
            "sample_id": sid,
            "detections": [{"box": d.box.as_list(), "class_id": int(d.class_id), "score": float(d.score)} for d in dets],
            "ground_truth": [{"box": r.box.as_list(), "class_id": int(r.dtype)} for r in sample.records],
        },
    )


def evaluate_ssl_model(
    model: RegionNet,
    store: ImageStore,
    ids: Sequence[str],
    config: TrainConfig,
    eval_key: str = "eval",
    dump_dir: Path | None = None,
    dump: int = 0,
) -> dict[str, Any]:
    rows = []
    samples = []
    for sid in ids:
        original = store.image(sid)
        sample = plan_and_distort(original, config.distortion, config.seed, stream_id(eval_key, sid), sid, f"images/{sid}.png")
        samples.append(sample)
        dets = model.forward_infer(sample.distorted)
        recovered = recover_image(sample.distorted, dets)
        if dump_dir is not None and len(rows) < dump:
            write_dump(dump_dir, original, sample, dets, recovered)
        gts = [(int(r.dtype), r.box) for r in sample.records]
        m = match_detections(dets, gts)
        row = eval_ssl(original, sample.distorted, recovered)
        rows.append({"sample_id": sid, **row.to_dict(), "n_distortions": len(sample.records), "n_detections": len(dets), "tp": m.tp, "fp": m.fp, "fn": m.fn})
    acc, n_roi = roi_type_accuracy(model, samples)
    mean = {k: float(np.mean([r[k] for r in rows])) for k in SSL_FIELDS}
    return {"rows": rows, "mean": mean, "roi_type_accuracy": acc, "n_matched_rois": n_roi, "n_images": len(rows)}


def evaluate_seg_model(model: RegionNet, store: ImageStore, ids: Sequence[str], iou_thresh: float = 0.5) -> dict[str, Any]:
    per_image = []
    for sid in ids:
        s = store.sample(sid)
        dets = model.forward_infer(s.image)
        gts = [(inst.class_id, inst.box) for inst in s.instances]
        m = match_detections(dets, gts, iou_thresh)
        counts = pixel_counts(predicted_mask(s.image.shape, dets), s.union_mask())
        per_image.append(
            {
                "sample_id": sid,
                "tp": m.tp,
                "fp": m.fp,
                "fn": m.fn,
                "dice": dice_from_counts(*counts),
                "pixel_counts": list(counts),
                "n_gt": len(gts),
                "n_pred": len(dets),
            }
        )
    return {"aggregate": aggregate_seg(per_image).to_dict(), "per_image": per_image}


def _eval_config(ckpt: Checkpoint, overrides: TrainConfig | None) -> TrainConfig:
    if overrides is not None:
        return overrides
    raw = ckpt.header.get("train_config") or {}
    if raw:
        return TrainConfig.from_dict(raw)
    # No recorded training config: scale the default distortions to the network input.
    net = ckpt.net_config
    return TrainConfig(net=net, distortion=DistortionConfig().scaled(net.input_size))


def evaluate(
    checkpoint: Checkpoint | str,
    data: str | os.PathLike,
    kind: str,
    split: str = "test",
    out: str | os.PathLike | None = None,
    config: TrainConfig | None = None,
    limit: int | None = None,
    dump: int = 0,
) -> dict[str, Any]:
    """Evaluate a checkpoint on ``split``; writes ``ssl_eval.json`` or ``seg_eval.json`` when ``out`` is set."""
    ckpt = load_checkpoint(checkpoint) if not isinstance(checkpoint, Checkpoint) else checkpoint
    if kind not in ("ssl", "seg"):
        raise ValidationError(f"unknown evaluation kind {kind!r}")
    needed = "pretext" if kind == "ssl" else "downstream"
    if ckpt.phase != needed:
        raise ValidationError(f"{kind} evaluation needs a {needed} checkpoint, got phase {ckpt.phase!r}")
    cfg = _eval_config(ckpt, config)
    ids = split_ids(read_manifest(data), split)
    if limit is not None:
        ids = ids[:limit]
    store = ImageStore(data, ids)
    model = model_from_checkpoint(ckpt)
    if kind == "ssl":
        report = evaluate_ssl_model(model, store, ids, cfg, dump_dir=Path(out) / "dump" if out is not None else None, dump=dump)
    else:
        report = evaluate_seg_model(model, store, ids)
    report.update({"kind": kind, "split": split, "checkpoint": ckpt.header.get("config_hash"), "phase": ckpt.phase, "step": ckpt.header.get("step")})
    if out is not None:
        atomic_write_json(Path(out) / f"{kind}_eval.json", report)
    return report


# Experiment grid.

@dataclass(frozen=True)
class ExperimentGrid:
    pretrain_sizes: tuple[int, ...] = (2000, 200, 40)
    label_sizes: tuple[int, ...] = (200, 50, 5)
    seeds: tuple[int, ...] = (0, 1, 2)
    baselines: tuple[str, ...] = ("scratch",)

    def violations(self, n_train: int | None = None) -> list[str]:
        out = []
        if not self.seeds:
            out.append("seeds: must be nonempty")
        if not self.label_sizes:
            out.append("label_sizes: must be nonempty")
        if any(b != "scratch" for b in self.baselines):
            out.append(f"baselines: only 'scratch' is supported, got {list(self.baselines)}")
        if n_train is not None:
            for name in ("pretrain_sizes", "label_sizes"):
                too_big = [s for s in getattr(self, name) if s > n_train]
                if too_big:
                    out.append(f"{name}: {too_big} exceed the {n_train} available training samples")
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentGrid":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown grid keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in raw.items()})

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) for k, v in asdict(self).items()}


GRID_METRICS = ("recall", "precision", "dice", "dice_micro")


def _cell_summary(per_seed: list[dict[str, Any]]) -> dict[str, Any]:
    ok = [r for r in per_seed if "error" not in r]
    summary: dict[str, Any] = {"n_ok": len(ok), "n_failed": len(per_seed) - len(ok)}
    for stat, fn in (("mean", np.mean), ("min", np.min), ("max", np.max), ("median", np.median)):
        summary[stat] = {m: (float(fn([r[m] for r in ok])) if ok else None) for m in GRID_METRICS}
    return summary


def run_grid(
    grid: ExperimentGrid,
    pretrain_config: TrainConfig,
    finetune_config: TrainConfig,
    out: str | os.PathLike,
    test_split: str = "test",
    test_limit: int | None = None,
) -> dict[str, Any]:
    """Pretrain (per size and seed), fine-tune per label size, evaluate on the test split.

    The scratch arm fine-tunes from random weights with the whole network
    trainable. A failing cell is recorded and the grid continues.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    n_train = len(split_ids(read_manifest(finetune_config.data), "train"))
    problems = grid.violations(n_train)
    if problems:
        raise ValidationError("; ".join(problems))

    arms: list[tuple[str, int | None]] = [(f"ssl_{n}", n) for n in grid.pretrain_sizes]
    arms += [(b, None) for b in grid.baselines]
    results: dict[tuple[str, int], list[dict[str, Any]]] = {(a, ls): [] for a, _ in arms for ls in grid.label_sizes}

    for arm, psize in arms:
        for seed in grid.seeds:
            init: Checkpoint | None = None
            arm_dir = out / arm / f"seed{seed}"
            pre_error = None
            if psize is not None:
                try:
                    init = pretrain(replace(pretrain_config, seed=seed, train_size=psize, out=str(arm_dir / "pretrain")))
                except Exception as exc:  # noqa: BLE001 - cell failure is reported, grid continues
                    log.exception("pretraining failed for %s seed %d", arm, seed)
                    pre_error = f"pretrain: {exc}"
            for ls in grid.label_sizes:
                entry: dict[str, Any] = {"seed": seed}
                if pre_error:
                    entry["error"] = pre_error
                    results[(arm, ls)].append(entry)
                    continue
                try:
                    ft_cfg = replace(
                        finetune_config,
                        seed=seed,
                        train_size=ls,
                        out=str(arm_dir / f"labels{ls}"),
                        freeze_backbone=finetune_config.freeze_backbone if psize is not None else False,
                        init="random",
                    )
                    ckpt = finetune(ft_cfg, init if init is not None else "random")
                    report = evaluate(ckpt, finetune_config.data, "seg", test_split, out=arm_dir / f"labels{ls}", limit=test_limit)
                    agg = report["aggregate"]
                    entry.update({m: agg[m] for m in GRID_METRICS})
                except Exception as exc:  # noqa: BLE001
                    log.exception("cell %s/%d seed %d failed", arm, ls, seed)
                    entry["error"] = str(exc)
                results[(arm, ls)].append(entry)

    cells = []
    for (arm, ls), per_seed in results.items():
        cells.append({"arm": arm, "label_size": ls, "per_seed": per_seed, **_cell_summary(per_seed), "status": "ok" if all("error" not in r for r in per_seed) else "partial_failure"})
    matrix = {
        m: {arm: {str(ls): next(c["mean"][m] for c in cells if c["arm"] == arm and c["label_size"] == ls) for ls in grid.label_sizes} for arm, _ in arms}
        for m in GRID_METRICS
    }
    report = {
        "grid": grid.to_dict(),
        "arms": [a for a, _ in arms],
        "label_sizes": list(grid.label_sizes),
        "cells": cells,
        "matrix": matrix,
        "pretrain_config": pretrain_config.to_dict(),
        "finetune_config": finetune_config.to_dict(),
    }
    atomic_write_json(out / "grid_report.json", report)
    atomic_write_text(out / "grid_report.csv", grid_csv(report))
    return report


def grid_csv(report: dict[str, Any]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "label_size", "metric", "mean", "min", "max", "n_ok", "n_failed"])
    for c in report["cells"]:
        for m in GRID_METRICS:
            w.writerow([c["arm"], c["label_size"], m, c["mean"][m], c["min"][m], c["max"][m], c["n_ok"], c["n_failed"]])
    return buf.getvalue()
