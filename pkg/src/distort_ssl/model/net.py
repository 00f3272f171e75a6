"""Compact two-stage region network.

One stride-8 feature level feeds an RPN, a class-agnostic box/class head and a
patch head. The patch head is an encoder/decoder with a skip connection from
the pooled RoI features to the first decoder stage; it predicts restored
pixels in the pretext phase and instance-mask probabilities downstream.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .. import losses as L
from ..core_types import (
    AnnotatedSample,
    BBox,
    Detection,
    SegSample,
    ValidationError,
    make_rng,
    paste,
    resize_bilinear,
)
from .boxes import decode_array, encode_array, iou_matrix, nms_order, to_pixel_box

PHASES = ("pretext", "downstream")
# Scale of the RoI-head regression targets relative to raw deltas.
HEAD_BOX_WEIGHTS = np.array([10.0, 10.0, 5.0, 5.0])


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 320
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    anchor_sides: tuple[int, ...] = (48, 64, 80)
    seg_anchor_sides: tuple[int, ...] = (16, 32, 48)
    proposals_train: int = 64
    proposals_infer: int = 32
    roi_pool: int = 14
    head_output: int = 28
    num_pretext_classes: int = 6
    num_downstream_classes: int = 1
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_pos_iou: float = 0.5
    nms_iou: float = 0.7
    detection_nms_iou: float = 0.3
    score_threshold_infer: float = 0.5
    rpn_batch: int = 128
    rpn_pos_fraction: float = 0.5
    roi_pos_fraction: float = 0.25
    pre_nms_topk: int = 300
    head_channels: int = 32
    fc_dim: int = 128
    skip_connection: bool = True
    add_gt_proposals: bool = True

    @property
    def stride(self) -> int:
        return 2 ** len(self.backbone_channels)

    @property
    def box_pool(self) -> int:
        # The box/class head pools at half resolution; the patch head uses roi_pool.
        return self.roi_pool // 2

    @property
    def feature_size(self) -> int:
        return self.input_size // self.stride

    def anchors_for(self, phase: str) -> tuple[int, ...]:
        return self.anchor_sides if phase == "pretext" else self.seg_anchor_sides

    def num_classes(self, phase: str) -> int:
        return self.num_pretext_classes if phase == "pretext" else self.num_downstream_classes

    def violations(self, size_range: tuple[int, int] | None = None) -> list[str]:
        out = []
        if self.input_size % self.stride:
            out.append(f"input_size: {self.input_size} not divisible by stride {self.stride}")
        if self.head_output != 2 * self.roi_pool:
            out.append(f"head_output: must equal 2 x roi_pool ({2 * self.roi_pool}), got {self.head_output}")
        if self.roi_pool % 2:
            out.append("roi_pool: must be even")
        if size_range is not None:
            lo, hi = size_range
            if min(self.anchor_sides) > lo or max(self.anchor_sides) < hi:
                out.append(f"anchor_sides: {self.anchor_sides} do not bracket distortion sizes {size_range}")
        for name in ("rpn_pos_iou", "rpn_neg_iou", "roi_pos_iou", "nms_iou", "detection_nms_iou", "score_threshold_infer"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                out.append(f"{name}: {v} outside [0, 1]")
        if self.rpn_neg_iou > self.rpn_pos_iou:
            out.append("rpn_neg_iou: must not exceed rpn_pos_iou")
        for name in ("proposals_train", "proposals_infer", "rpn_batch", "pre_nms_topk"):
            if getattr(self, name) < 1:
                out.append(f"{name}: must be >= 1")
        return out

    def validate(self, size_range: tuple[int, int] | None = None) -> None:
        problems = self.violations(size_range)
        if problems:
            raise ValidationError("; ".join(problems))

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "NetConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown net config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})


def make_anchors(cfg: NetConfig, sides: Sequence[int]) -> np.ndarray:
    """Anchor boxes ordered (row, col, side), centred on stride cells."""
    n, s = cfg.feature_size, cfg.stride
    centers = (np.arange(n) + 0.5) * s
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    half = np.asarray(sides, dtype=np.float64)[None, None, :] / 2
    boxes = np.stack(
        [cx[..., None] - half, cy[..., None] - half, cx[..., None] + half, cy[..., None] + half], axis=-1
    )
    return boxes.reshape(-1, 4)


def roi_align(features: torch.Tensor, boxes: torch.Tensor, batch_idx: torch.Tensor, out_size: int, stride: int) -> torch.Tensor:
    """Bilinear RoI pooling with one sample at the centre of each output bin.

    ``boxes`` are ``(R, 4)`` image coordinates; feature cell ``k`` covers image
    pixels ``[k*stride, (k+1)*stride)`` with its value located at the cell
    centre. Samples outside the map are clamped to the border.
    """
    b, c, h, w = features.shape
    r = boxes.shape[0]
    if r == 0:
        return features.new_zeros((0, c, out_size, out_size))
    boxes = boxes.to(features.dtype)
    t = (torch.arange(out_size, dtype=features.dtype) + 0.5) / out_size
    xs = boxes[:, 0:1] + t[None] * (boxes[:, 2:3] - boxes[:, 0:1])
    ys = boxes[:, 1:2] + t[None] * (boxes[:, 3:4] - boxes[:, 1:2])
    fx = (xs / stride - 0.5).clamp(0, w - 1)
    fy = (ys / stride - 0.5).clamp(0, h - 1)
    x0 = fx.floor().long()
    y0 = fy.floor().long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    wx = (fx - x0.to(fx.dtype))[:, None, :, None]  # (R, 1, P, 1)
    wy = (fy - y0.to(fy.dtype))[:, :, None, None]  # (R, P, 1, 1)

    flat = features.permute(0, 2, 3, 1).reshape(b * h * w, c)
    base = (batch_idx.long() * h * w)[:, None, None]

    def gather(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        idx = base + yi[:, :, None] * w + xi[:, None, :]
        return flat[idx.reshape(-1)].reshape(r, out_size, out_size, c)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bot = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    out = top * (1 - wy) + bot * wy
    return out.permute(0, 3, 1, 2).contiguous()


class Backbone(nn.Module):
    def __init__(self, channels: Sequence[int]):
        super().__init__()
        layers: list[nn.Module] = []
        c_in = 1
        for c in channels:
            layers += [
                nn.Conv2d(c_in, c, 3, stride=2, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(c, c, 3, padding=1),
                nn.ReLU(inplace=True),
            ]
            c_in = c
        self.body = nn.Sequential(*layers)
        self.out_channels = c_in

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(2.0 * x - 1.0)


class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.num_anchors = num_anchors
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.objectness = nn.Conv2d(channels, num_anchors, 1)
        self.deltas = nn.Conv2d(channels, 4 * num_anchors, 1)

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, _, h, w = feats.shape
        a = self.num_anchors
        x = F.relu(self.conv(feats))
        obj = self.objectness(x).permute(0, 2, 3, 1).reshape(b, h * w * a)
        deltas = self.deltas(x).view(b, a, 4, h, w).permute(0, 3, 4, 1, 2).reshape(b, h * w * a, 4)
        return obj, deltas


class BoxHead(nn.Module):
    """Classification over background + classes and class-agnostic box deltas."""

    def __init__(self, channels: int, pool: int, fc_dim: int, num_classes: int):
        super().__init__()
        self.fc1 = nn.Linear(channels * pool**2, fc_dim)
        self.fc2 = nn.Linear(fc_dim, fc_dim)
        self.cls = nn.Linear(fc_dim, num_classes + 1)
        self.box = nn.Linear(fc_dim, 4)

    def forward(self, roi_feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = F.relu(self.fc1(roi_feats.flatten(1)))
        x = F.relu(self.fc2(x))
        return self.cls(x), self.box(x)


class PatchHead(nn.Module):
    """Encoder (x1/2) then two x2 decoder stages; output is ``2 * roi_pool`` square.

    With ``skip`` the pooled RoI features are concatenated onto the first
    decoder stage before fusion.
    """

    def __init__(self, channels: int, hidden: int, skip: bool = True):
        super().__init__()
        self.skip = skip
        self.encoder = nn.Conv2d(channels, hidden, 3, stride=2, padding=1)
        self.up1 = nn.ConvTranspose2d(hidden, hidden, 2, stride=2)
        self.fuse = nn.Conv2d(hidden + (channels if skip else 0), hidden, 3, padding=1)
        self.up2 = nn.ConvTranspose2d(hidden, hidden, 2, stride=2)
        self.refine = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.out = nn.Conv2d(hidden, 1, 1)

    def forward(self, roi_feats: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.encoder(roi_feats))
        x = F.relu(self.up1(x))
        if self.skip:
            x = torch.cat([x, roi_feats], dim=1)
        x = F.relu(self.fuse(x))
        x = F.relu(self.up2(x))
        x = F.relu(self.refine(x))
        return torch.sigmoid(self.out(x))[:, 0]


class Heads(nn.Module):
    def __init__(self, cfg: NetConfig, channels: int, phase: str):
        super().__init__()
        self.rpn = RPNHead(channels, len(cfg.anchors_for(phase)))
        self.box = BoxHead(channels, cfg.box_pool, cfg.fc_dim, cfg.num_classes(phase))
        self.patch = PatchHead(channels, cfg.head_channels, cfg.skip_connection)


@dataclass
class ImageTargets:
    boxes: np.ndarray  # (n, 4) float
    classes: np.ndarray  # (n,) int, 1-based
    patches: np.ndarray  # (n, head_output, head_output)


def prepare_targets(sample: AnnotatedSample | SegSample, phase: str, head_output: int) -> ImageTargets:
    """Ground truth for one image, with patch targets resampled from the GT box."""
    if phase == "pretext":
        if not isinstance(sample, AnnotatedSample):
            raise ValidationError("pretext phase needs AnnotatedSample targets")
        boxes = [r.box.as_list() for r in sample.records]
        classes = [int(r.dtype) for r in sample.records]
        patches = [resize_bilinear(r.original_patch, head_output, head_output) for r in sample.records]
    elif phase == "downstream":
        if not isinstance(sample, SegSample):
            raise ValidationError("downstream phase needs SegSample targets")
        boxes = [inst.box.as_list() for inst in sample.instances]
        classes = [int(inst.class_id) for inst in sample.instances]
        patches = [
            (resize_bilinear(inst.mask[inst.box.slices].astype(np.float64), head_output, head_output) >= 0.5).astype(np.float64)
            for inst in sample.instances
        ]
    else:
        raise ValidationError(f"unknown phase {phase!r}")
    n = len(boxes)
    return ImageTargets(
        np.asarray(boxes, dtype=np.float64).reshape(n, 4),
        np.asarray(classes, dtype=np.int64).reshape(n),
        np.asarray(patches, dtype=np.float64).reshape(n, head_output, head_output),
    )


@dataclass
class LossInputs:
    phase: str
    rpn_logits: torch.Tensor
    rpn_labels: torch.Tensor
    rpn_pred_deltas: torch.Tensor
    rpn_target_deltas: torch.Tensor
    roi_boxes: np.ndarray
    roi_batch: np.ndarray
    cls_logits: torch.Tensor
    cls_targets: torch.Tensor
    box_pred: torch.Tensor
    box_targets: torch.Tensor
    positive: torch.Tensor
    patch_pred: torch.Tensor
    patch_target: torch.Tensor
    patch_gt: list[tuple[int, int]] = field(default_factory=list)
    feature_shape: tuple[int, ...] = ()

    @property
    def n_pos(self) -> int:
        return int(self.positive.sum())

    def loss(self) -> tuple[torch.Tensor, L.LossReport]:
        rpn_pos = torch.ones(self.rpn_pred_deltas.shape[0], dtype=torch.bool)
        if self.phase == "pretext":
            patch = L.l_restored(self.patch_pred, self.patch_target)
            kind = "restored"
        else:
            patch = L.l_mask_downstream(self.patch_pred, self.patch_target)
            kind = "mask"
        parts = {
            "l_rpn_obj": L.l_rpn_objectness(self.rpn_logits, self.rpn_labels),
            "l_rpn_box": L.l_bbox(self.rpn_pred_deltas, self.rpn_target_deltas, rpn_pos),
            "l_cls": L.l_cls(self.cls_logits, self.cls_targets),
            "l_bbox": L.l_bbox(self.box_pred, self.box_targets, self.positive),
            "l_patch": patch,
            "patch_kind": kind,
        }
        return L.total_loss(parts, self.phase, n_pos=self.n_pos, n_sampled=int(self.cls_targets.shape[0]))


def _subsample(rng: np.random.Generator, idx: np.ndarray, k: int) -> np.ndarray:
    if idx.size <= k:
        return idx
    return np.sort(rng.choice(idx, size=k, replace=False))


class RegionNet(nn.Module):
    def __init__(self, cfg: NetConfig = NetConfig(), phase: str = "pretext", seed: int = 0):
        super().__init__()
        if phase not in PHASES:
            raise ValidationError(f"unknown phase {phase!r}")
        cfg.validate()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.backbone = Backbone(cfg.backbone_channels)
        self.phase = phase
        self._build_heads(phase, seed)

    def _build_heads(self, phase: str, seed: int) -> None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            heads = Heads(self.cfg, self.backbone.out_channels, phase)
        dtype = next(self.backbone.parameters()).dtype
        self.heads = heads.to(dtype)
        self.phase = phase
        self.anchors = make_anchors(self.cfg, self.cfg.anchors_for(phase))

    def set_phase(self, phase: str, seed: int = 0) -> None:
        """Swap in freshly initialised heads for ``phase``; the backbone is untouched."""
        if phase not in PHASES:
            raise ValidationError(f"unknown phase {phase!r}")
        self._build_heads(phase, seed)

    def freeze_backbone(self, frozen: bool = True) -> None:
        for p in self.backbone.parameters():
            p.requires_grad_(not frozen)

    # Proposal generation.

    def _proposals(self, obj: torch.Tensor, deltas: torch.Tensor, keep: int) -> tuple[np.ndarray, np.ndarray]:
        s = self.cfg.input_size
        scores = obj.detach().cpu().double().numpy()
        d = deltas.detach().cpu().double().numpy()
        top = np.argsort(-scores, kind="stable")[: self.cfg.pre_nms_topk]
        boxes = decode_array(self.anchors[top], d[top], s, s)
        ok = ((boxes[:, 2] - boxes[:, 0]) >= 2) & ((boxes[:, 3] - boxes[:, 1]) >= 2)
        boxes, sc = boxes[ok], scores[top][ok]
        kept = nms_order(boxes, sc, self.cfg.nms_iou, max_keep=keep)
        return boxes[kept], sc[kept]

    def _check_images(self, images: torch.Tensor) -> None:
        s = self.cfg.input_size
        if images.dim() != 4 or images.shape[1] != 1 or images.shape[2:] != (s, s):
            raise ValidationError(f"expected images of shape (B, 1, {s}, {s}), got {tuple(images.shape)}")

    # Training forward.

    def forward_train(
        self,
        images: torch.Tensor,
        targets: Sequence[AnnotatedSample | SegSample | ImageTargets],
        rng: np.random.Generator | None = None,
    ) -> LossInputs:
        self._check_images(images)
        if len(targets) != images.shape[0]:
            raise ValidationError(f"{images.shape[0]} images but {len(targets)} targets")
        cfg = self.cfg
        rng = rng if rng is not None else make_rng(0)
        tgts = [t if isinstance(t, ImageTargets) else prepare_targets(t, self.phase, cfg.head_output) for t in targets]
        feats = self.backbone(images)
        obj, deltas = self.heads.rpn(feats)

        rpn_logit_sel, rpn_label_sel, rpn_pred_d, rpn_tgt_d = [], [], [], []
        rois, roi_b, cls_t, box_t, pos_flags, patch_gt = [], [], [], [], [], []
        for b, tg in enumerate(tgts):
            n_gt = tg.boxes.shape[0]
            # RPN anchor assignment.
            labels = np.full(len(self.anchors), -1, dtype=np.int64)
            if n_gt:
                ious = iou_matrix(self.anchors, tg.boxes)
                best_gt = ious.argmax(axis=1)
                best = ious.max(axis=1)
                labels[best < cfg.rpn_neg_iou] = 0
                labels[best >= cfg.rpn_pos_iou] = 1
                # Every GT keeps its best anchors as positives.
                col_best = ious.max(axis=0)
                labels[np.nonzero((ious == col_best[None, :]) & (col_best[None, :] > 0))[0]] = 1
            else:
                best_gt = np.zeros(len(self.anchors), dtype=np.int64)
                labels[:] = 0
            pos = _subsample(rng, np.flatnonzero(labels == 1), int(cfg.rpn_batch * cfg.rpn_pos_fraction))
            neg = _subsample(rng, np.flatnonzero(labels == 0), cfg.rpn_batch - pos.size)
            sel = np.concatenate([pos, neg])
            rpn_logit_sel.append(obj[b, torch.as_tensor(sel)])
            rpn_label_sel.append(torch.as_tensor((labels[sel] == 1).astype(np.int64)))
            if pos.size:
                rpn_pred_d.append(deltas[b, torch.as_tensor(pos)])
                rpn_tgt_d.append(torch.as_tensor(encode_array(self.anchors[pos], tg.boxes[best_gt[pos]])))

            # Proposals and RoI sampling.
            props, _ = self._proposals(obj[b], deltas[b], cfg.proposals_train)
            cand = np.concatenate([props, tg.boxes]) if (cfg.add_gt_proposals and n_gt) else props
            if n_gt:
                ious = iou_matrix(cand, tg.boxes)
                match = ious.argmax(axis=1)
                is_pos = ious.max(axis=1) >= cfg.roi_pos_iou
            else:
                match = np.zeros(len(cand), dtype=np.int64)
                is_pos = np.zeros(len(cand), dtype=bool)
            n_pos_max = int(round(cfg.proposals_train * cfg.roi_pos_fraction))
            p_idx = _subsample(rng, np.flatnonzero(is_pos), n_pos_max)
            n_idx = _subsample(rng, np.flatnonzero(~is_pos), cfg.proposals_train - p_idx.size)
            if p_idx.size + n_idx.size == 0:
                raise ValidationError(f"image {b}: no RoIs could be sampled (degenerate batch)")
            chosen = np.concatenate([p_idx, n_idx])
            rois.append(cand[chosen])
            roi_b.append(np.full(chosen.size, b))
            cls = np.zeros(chosen.size, dtype=np.int64)
            cls[: p_idx.size] = tg.classes[match[p_idx]]
            cls_t.append(cls)
            bt = np.zeros((chosen.size, 4))
            if p_idx.size:
                bt[: p_idx.size] = encode_array(cand[p_idx], tg.boxes[match[p_idx]]) * HEAD_BOX_WEIGHTS
            box_t.append(bt)
            flags = np.zeros(chosen.size, dtype=bool)
            flags[: p_idx.size] = True
            pos_flags.append(flags)
            patch_gt.extend((b, int(g)) for g in sorted(set(match[p_idx].tolist())))

        dtype = feats.dtype
        roi_boxes = np.concatenate(rois)
        roi_batch = np.concatenate(roi_b)
        roi_feats = roi_align(feats, torch.as_tensor(roi_boxes, dtype=dtype), torch.as_tensor(roi_batch), cfg.box_pool, cfg.stride)
        cls_logits, box_pred = self.heads.box(roi_feats)

        if patch_gt:
            gt_boxes = np.stack([tgts[b].boxes[g] for b, g in patch_gt])
            gt_b = np.array([b for b, _ in patch_gt])
            pf = roi_align(feats, torch.as_tensor(gt_boxes, dtype=dtype), torch.as_tensor(gt_b), cfg.roi_pool, cfg.stride)
            patch_pred = self.heads.patch(pf)
            patch_target = torch.as_tensor(np.stack([tgts[b].patches[g] for b, g in patch_gt]), dtype=dtype)
        else:
            k = cfg.head_output
            patch_pred = feats.new_zeros((0, k, k))
            patch_target = feats.new_zeros((0, k, k))

        def cat(xs: list[torch.Tensor], shape: tuple[int, ...]) -> torch.Tensor:
            return torch.cat(xs).to(dtype) if xs else feats.new_zeros(shape)

        return LossInputs(
            phase=self.phase,
            rpn_logits=torch.cat(rpn_logit_sel),
            rpn_labels=torch.cat(rpn_label_sel),
            rpn_pred_deltas=cat(rpn_pred_d, (0, 4)),
            rpn_target_deltas=cat(rpn_tgt_d, (0, 4)),
            roi_boxes=roi_boxes,
            roi_batch=roi_batch,
            cls_logits=cls_logits,
            cls_targets=torch.as_tensor(np.concatenate(cls_t)),
            box_pred=box_pred,
            box_targets=torch.as_tensor(np.concatenate(box_t), dtype=dtype),
            positive=torch.as_tensor(np.concatenate(pos_flags)),
            patch_pred=patch_pred,
            patch_target=patch_target,
            patch_gt=patch_gt,
            feature_shape=tuple(feats.shape),
        )

    # Inference.

    @torch.no_grad()
    def detect_batch(self, images: torch.Tensor) -> list[list[Detection]]:
        self._check_images(images)
        cfg = self.cfg
        s = cfg.input_size
        dtype = next(self.parameters()).dtype
        images = images.to(dtype)
        feats = self.backbone(images)
        obj, deltas = self.heads.rpn(feats)
        out = []
        for b in range(images.shape[0]):
            props, _ = self._proposals(obj[b], deltas[b], cfg.proposals_infer)
            if len(props) == 0:
                out.append([])
                continue
            rf = roi_align(feats, torch.as_tensor(props, dtype=dtype), torch.full((len(props),), b), cfg.box_pool, cfg.stride)
            logits, bd = self.heads.box(rf)
            probs = torch.softmax(logits.double(), dim=1).numpy()
            fg = probs[:, 1:]
            cls = fg.argmax(axis=1) + 1
            score = fg.max(axis=1)
            refined = decode_array(props, bd.double().numpy() / HEAD_BOX_WEIGHTS, s, s)
            keep = np.flatnonzero(score >= cfg.score_threshold_infer)
            keep = keep[nms_order(refined[keep], score[keep], cfg.detection_nms_iou)][: cfg.proposals_infer]
            boxes: list[BBox] = []
            kept = []
            for i in keep:
                pb = to_pixel_box(refined[i], s, s)
                if pb is not None:
                    boxes.append(pb)
                    kept.append(i)
            if not boxes:
                out.append([])
                continue
            bx = torch.as_tensor([bb.as_list() for bb in boxes], dtype=dtype)
            pf = roi_align(feats, bx, torch.full((len(boxes),), b), cfg.roi_pool, cfg.stride)
            patches = self.heads.patch(pf).double().numpy()
            out.append(
                [Detection(bb, int(cls[i]), float(score[i]), patches[k]) for k, (bb, i) in enumerate(zip(boxes, kept))]
            )
        return out

    def forward_infer(self, image: np.ndarray) -> list[Detection]:
        was_training = self.training
        self.eval()
        try:
            t = torch.as_tensor(np.asarray(image, dtype=np.float64))[None, None]
            return self.detect_batch(t)[0]
        finally:
            self.train(was_training)


def recover_image(distorted: np.ndarray, detections: Sequence[Detection]) -> np.ndarray:
    """Paste each detection's patch (resized to its box) into a copy of ``distorted``.

    Patches are painted in ascending score order so the most confident one wins
    where boxes overlap.
    """
    out = np.array(distorted, dtype=np.float64, copy=True)
    for det in sorted(detections, key=lambda d: (d.score, d.box.as_list())):
        if det.patch is None:
            continue
        patch = resize_bilinear(np.clip(det.patch, 0.0, 1.0), det.box.height, det.box.width)
        out = paste(out, patch, det.box)
    return np.clip(out, 0.0, 1.0)


def predicted_mask(shape: tuple[int, int], detections: Sequence[Detection], threshold: float = 0.5) -> np.ndarray:
    """Union of per-detection masks, each patch resized to its box and thresholded."""
    mask = np.zeros(shape, dtype=bool)
    for det in detections:
        if det.patch is None:
            continue
        m = resize_bilinear(np.clip(det.patch, 0.0, 1.0), det.box.height, det.box.width) >= threshold
        mask[det.box.slices] |= m
    return mask


def backbone_checksum(model: RegionNet) -> str:
    digest = hashlib.sha256()
    for name, p in sorted(model.backbone.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
