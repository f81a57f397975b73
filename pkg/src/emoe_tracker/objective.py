"""Tracking, attribute and total losses; optimizer and step schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch

from .backbone import decode_at
from .errors import ConfigError, NumericError

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0


@dataclass
class LossWeights:
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    alpha: float = 1.0
    beta: float = 1.0
    regress_at: str = "argmax"

    def __post_init__(self):
        for f in fields(self):
            if f.name != "regress_at" and getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be non-negative")

    @classmethod
    def from_config(cls, loss_cfg):
        return cls(loss_cfg.lambda_iou, loss_cfg.lambda_l1, loss_cfg.alpha, loss_cfg.beta, loss_cfg.regress_at)


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    iou: torch.Tensor
    l1: torch.Tensor
    nce: torch.Tensor
    attr: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {f"loss/{k}": float(getattr(self, k).detach()) for k in ("cls", "iou", "l1", "nce", "attr", "total")}


# --------------------------------------------------------------------------- boxes

def box_xyxy(b):
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def iou_and_giou(pred, gt):
    """IoU and generalized IoU of (cx, cy, w, h) boxes, broadcasting over leading dims."""
    p, g = box_xyxy(pred), box_xyxy(gt)
    area_p = (p[..., 2] - p[..., 0]) * (p[..., 3] - p[..., 1])
    area_g = (g[..., 2] - g[..., 0]) * (g[..., 3] - g[..., 1])
    iw = (torch.minimum(p[..., 2], g[..., 2]) - torch.maximum(p[..., 0], g[..., 0])).clamp_min(0)
    ih = (torch.minimum(p[..., 3], g[..., 3]) - torch.maximum(p[..., 1], g[..., 1])).clamp_min(0)
    inter = iw * ih
    union = area_p + area_g - inter
    iou = inter / union
    ew = torch.maximum(p[..., 2], g[..., 2]) - torch.minimum(p[..., 0], g[..., 0])
    eh = torch.maximum(p[..., 3], g[..., 3]) - torch.minimum(p[..., 1], g[..., 1])
    enclose = ew * eh
    return iou, iou - (enclose - union) / enclose


# --------------------------------------------------------------------------- tracking loss

def gaussian_target(gt_box, grid: int):
    """(B, S, S) heatmap peaking at exactly 1 on the cell containing the box center.

    sigma is a quarter of the mean box side in cells, at least half a cell.
    """
    gt = torch.as_tensor(gt_box)
    if gt.dim() == 1:
        gt = gt[None]
    if (gt[:, 2] <= 0).any() or (gt[:, 3] <= 0).any():
        raise ValueError("degenerate ground-truth box")
    ci = (gt[:, 1] * grid).floor().clamp(0, grid - 1)
    cj = (gt[:, 0] * grid).floor().clamp(0, grid - 1)
    sigma = (0.25 * (gt[:, 2] + gt[:, 3]) / 2 * grid).clamp_min(0.5)
    r = torch.arange(grid, dtype=gt.dtype, device=gt.device)
    dy = (r[None, :] - ci[:, None]) ** 2
    dx = (r[None, :] - cj[:, None]) ** 2
    d2 = dy[:, :, None] + dx[:, None, :]
    return torch.exp(-d2 / (2 * sigma[:, None, None] ** 2))


def focal_loss(score, target, eps=1e-6):
    """Penalty-reduced pixel-wise focal loss over a heatmap, normalized by #peaks."""
    p = score.clamp(eps, 1 - eps)
    pos = target.eq(1).to(score.dtype)
    neg = 1 - pos
    pos_loss = -torch.log(p) * (1 - p) ** FOCAL_ALPHA * pos
    neg_loss = -torch.log(1 - p) * p ** FOCAL_ALPHA * (1 - target) ** FOCAL_BETA * neg
    n_pos = pos.sum().clamp_min(1)
    return (pos_loss.sum() + neg_loss.sum()) / n_pos


def center_cell(gt, grid: int):
    """Row-major index of the grid cell holding each box center."""
    row = (gt[:, 1] * grid).floor().clamp(0, grid - 1).long()
    col = (gt[:, 0] * grid).floor().clamp(0, grid - 1).long()
    return row * grid + col


def tracking_loss(pred, gt_box, target_map=None, regress_at="argmax"):
    """(cls, iou, l1) for a HeadOutput against (B, 4) ground-truth boxes.

    The regression terms use the box decoded at the score argmax, or at the
    ground-truth center cell when ``regress_at="gt"``; iou is ``1 - GIoU`` and
    l1 the mean absolute difference of (cx, cy, w, h).
    """
    gt = torch.as_tensor(gt_box, dtype=pred.box.dtype)
    if gt.dim() == 1:
        gt = gt[None]
    grid = pred.score_map.shape[-1]
    if target_map is None:
        target_map = gaussian_target(gt, grid).to(pred.score_map.dtype)
    cls = focal_loss(pred.score_map, target_map)
    if regress_at == "gt":
        box = decode_at(center_cell(gt, grid), pred.offset_map, pred.size_map)
    elif regress_at == "argmax":
        box = pred.box
    else:
        raise ValueError(f"regress_at must be 'gt' or 'argmax', got {regress_at!r}")
    _, giou = iou_and_giou(box, gt)
    iou = (1 - giou).mean()
    l1 = (box - gt).abs().mean()
    return cls, iou, l1


# --------------------------------------------------------------------------- attribute loss

def attribute_loss(scores, g):
    """Sum over injected layers and experts of ``|w - g|``, averaged over the batch.

    ``scores`` is a list of (B, K) or (K,) tensors; ``g`` is (B, K) or (K,).
    """
    if len(scores) == 0:
        return torch.zeros(())
    g = torch.as_tensor(g)
    total = 0.0
    for w in scores:
        if w.shape[-1] != g.shape[-1]:
            raise ValueError(f"score length {w.shape[-1]} does not match label length {g.shape[-1]}")
        total = total + (w - g.to(w.dtype)).abs().sum(dim=-1)
    return total.mean() if torch.is_tensor(total) and total.dim() > 0 else total


# --------------------------------------------------------------------------- total

def total_loss(cls, iou, l1, nce, attr, w: LossWeights) -> LossBreakdown:
    parts = {"cls": cls, "iou": iou, "l1": l1, "nce": nce, "attr": attr}
    parts = {k: torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v
             for k, v in parts.items()}
    for name, v in parts.items():
        if not torch.isfinite(v).all():
            raise NumericError(name, float(v.detach().reshape(-1)[0]))
    total = (parts["cls"] + w.lambda_iou * parts["iou"] + w.lambda_l1 * parts["l1"]
             + w.alpha * parts["nce"] + w.beta * parts["attr"])
    return LossBreakdown(total=total, **parts)


# --------------------------------------------------------------------------- optimizer

def decay_epoch(epochs: int, frac: float) -> int:
    """Last epoch (1-based) trained at the base learning rate."""
    return max(1, int(round(frac * epochs)))


def lr_at_epoch(base_lr: float, epoch: int, epochs: int, frac: float) -> float:
    """Step schedule: ``base_lr`` through ``decay_epoch``, then ``base_lr / 10``."""
    return base_lr * (0.1 if epoch > decay_epoch(epochs, frac) else 1.0)


def make_optimizer(model, optim_cfg, epochs: int):
    """AdamW over trainable parameters only plus a per-epoch LambdaLR step schedule.

    Call ``scheduler.step()`` once per finished epoch.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ConfigError("no trainable parameters; nothing to optimize")
    opt = torch.optim.AdamW(params, lr=optim_cfg.lr, weight_decay=optim_cfg.weight_decay)
    last = decay_epoch(epochs, optim_cfg.decay_epoch_frac)
    # LambdaLR's counter starts at 0 for epoch 1
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda e: 0.1 if e + 1 > last else 1.0)
    return opt, sched


def finite_or_raise(name, value):
    if not math.isfinite(value):
        raise NumericError(name, value)
    return value
