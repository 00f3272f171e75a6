"""Training objectives.

``L = L_rpn_obj + L_rpn_box + L_cls + L_bbox + L_patch`` with unit weights,
where ``L_patch`` is the restoration loss (RMSE + MAE + cosine) in the pretext
phase and per-pixel binary cross-entropy in the downstream phase.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .core_types import ValidationError

COS_EPS = 1e-8
PROB_CLAMP = 1e-7
PHASES = ("pretext", "downstream")


def _rmse(diff: torch.Tensor) -> torch.Tensor:
    # Subgradient 0 at diff == 0 instead of sqrt'(0) = inf.
    ms = torch.mean(diff * diff)
    safe = torch.where(ms > 0, ms, torch.ones_like(ms))
    return torch.where(ms > 0, torch.sqrt(safe), torch.zeros_like(ms))


def l_restored(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """RMSE + MAE + (1 - cosine) between predicted and original patches.

    Inputs are ``(N, ...)`` batches of patches. RMSE and MAE are taken over all
    elements; the cosine term is computed per patch and averaged, so every
    patch counts equally. An empty batch gives 0.
    """
    if pred.shape != target.shape:
        raise ValidationError(f"l_restored: shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.numel() == 0:
        return pred.sum() * 0.0
    diff = pred - target
    l_rmse = _rmse(diff)
    l_mae = torch.mean(torch.abs(diff))
    p = pred.reshape(pred.shape[0], -1) if pred.dim() > 1 else pred.reshape(1, -1)
    t = target.reshape(p.shape)
    norm_p = torch.linalg.vector_norm(p, dim=1).clamp_min(COS_EPS)
    norm_t = torch.linalg.vector_norm(t, dim=1).clamp_min(COS_EPS)
    cos = (p * t).sum(dim=1) / (norm_p * norm_t)
    # Rounding can push cos a hair above 1 for parallel patches; keep the term >= 0.
    l_cs = torch.mean((1.0 - cos).clamp_min(0.0))
    return l_rmse + l_mae + l_cs


def l_cls(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over sampled RoIs; class 0 is background."""
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ValidationError(f"l_cls: target index outside [0, {logits.shape[1] - 1}]")
    return F.cross_entropy(logits, targets)


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    ax = torch.abs(x)
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def l_bbox(pred_deltas: torch.Tensor, target_deltas: torch.Tensor, positive: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 averaged over positive RoIs x 4 coordinates; 0 without positives."""
    if pred_deltas.shape != target_deltas.shape:
        raise ValidationError("l_bbox: shape mismatch")
    positive = positive.bool()
    n = int(positive.sum())
    if n == 0:
        return pred_deltas.sum() * 0.0
    return smooth_l1(pred_deltas[positive] - target_deltas[positive]).sum() / (4 * n)


def l_mask_downstream(pred_probs: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    if pred_probs.shape != target_mask.shape:
        raise ValidationError("l_mask_downstream: shape mismatch")
    if pred_probs.numel() == 0:
        return pred_probs.sum() * 0.0
    if not torch.all((target_mask == 0) | (target_mask == 1)):
        raise ValidationError("l_mask_downstream: target mask must be binary")
    p = pred_probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(target_mask * torch.log(p) + (1 - target_mask) * torch.log(1 - p)).mean()


def l_rpn_objectness(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy over sampled anchors (labels 1/0; -1 ignored)."""
    keep = labels >= 0
    if int(keep.sum()) == 0:
        return logits.sum() * 0.0
    return F.binary_cross_entropy_with_logits(logits[keep], labels[keep].to(logits.dtype))


@dataclass
class LossReport:
    l_total: float
    l_rpn_obj: float
    l_rpn_box: float
    l_cls: float
    l_bbox: float
    l_patch: float
    n_pos: int = 0
    n_sampled: int = 0
    no_positives: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


COMPONENTS = ("l_rpn_obj", "l_rpn_box", "l_cls", "l_bbox", "l_patch")


def total_loss(parts: dict[str, torch.Tensor], phase: str, n_pos: int = 0, n_sampled: int = 0) -> tuple[torch.Tensor, LossReport]:
    """Unit-weight sum of the loss components.

    ``parts`` holds the five scalar tensors in ``COMPONENTS`` plus
    ``patch_kind`` naming how ``l_patch`` was computed (``"restored"`` for the
    pretext phase, ``"mask"`` downstream).
    """
    if phase not in PHASES:
        raise ValidationError(f"unknown phase {phase!r}")
    expected = "restored" if phase == "pretext" else "mask"
    kind = parts.get("patch_kind", expected)
    if kind != expected:
        raise ValidationError(f"phase {phase!r} needs a {expected!r} patch term, got {kind!r}")
    missing = [k for k in COMPONENTS if k not in parts]
    if missing:
        raise ValidationError(f"missing loss parts: {missing}")
    total = sum((parts[k] for k in COMPONENTS[1:]), parts[COMPONENTS[0]])
    values = {k: float(parts[k].detach()) for k in COMPONENTS}
    report = LossReport(
        l_total=float(sum(values[k] for k in COMPONENTS)),
        n_pos=int(n_pos),
        n_sampled=int(n_sampled),
        no_positives=n_pos == 0,
        **values,
    )
    return total, report
