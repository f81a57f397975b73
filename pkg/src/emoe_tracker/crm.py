"""Contrastive relation modeling between fused template and search tokens."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import SegmentLayout

NORM_EPS = 1e-8
# stands in for -inf in masked log-sum-exp so gradients stay finite
_MASK_FILL = -1e4


@dataclass
class FusedTokens:
    z: torch.Tensor  # (B, N_z, D)
    x: torch.Tensor  # (B, N_x, D)


class CRM(nn.Module):
    """Per-token fusion ``[rgb || event] (2D) -> D``, initialized to averaging."""

    def __init__(self, dim, tau=0.07):
        super().__init__()
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.tau = tau
        self.fuse_z = nn.Linear(2 * dim, dim)
        self.fuse_x = nn.Linear(2 * dim, dim)
        eye = torch.eye(dim)
        with torch.no_grad():
            for lin in (self.fuse_z, self.fuse_x):
                lin.weight.copy_(torch.cat([0.5 * eye, 0.5 * eye], dim=1))
                lin.bias.zero_()

    def fuse(self, tokens, layout: SegmentLayout) -> FusedTokens:
        zr, xr, ze, xe = layout.split(tokens)
        return FusedTokens(self.fuse_z(torch.cat([zr, ze], dim=-1)),
                           self.fuse_x(torch.cat([xr, xe], dim=-1)))

    def forward(self, tokens, layout, pos_mask):
        fused = self.fuse(tokens, layout)
        s = similarity(fused, self.tau)
        return info_nce(s, pos_mask), fused, s


def similarity(fused: FusedTokens, tau: float):
    """Cosine similarity of each search token to the mean template token, over ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    zbar = fused.z.mean(dim=-2, keepdim=True)
    num = (fused.x * zbar).sum(-1)
    den = fused.x.norm(dim=-1).clamp_min(NORM_EPS) * zbar.norm(dim=-1).clamp_min(NORM_EPS)
    return num / den / tau


def partition_pairs(gt_box, grid: int):
    """Boolean (..., grid*grid) mask: True where the patch center lies inside the box.

    Boundary points count as inside. ``gt_box`` is (cx, cy, w, h) in search
    coordinates, either a length-4 sequence or a (B, 4) tensor.
    """
    box = torch.as_tensor(gt_box, dtype=torch.float64)
    if (box[..., 2] <= 0).any() or (box[..., 3] <= 0).any():
        raise ValueError("degenerate box with zero area")
    c = (torch.arange(grid, dtype=torch.float64) + 0.5) / grid
    cy, cx = torch.meshgrid(c, c, indexing="ij")
    cx, cy = cx.reshape(-1), cy.reshape(-1)
    x0 = (box[..., 0] - box[..., 2] / 2)[..., None]
    x1 = (box[..., 0] + box[..., 2] / 2)[..., None]
    y0 = (box[..., 1] - box[..., 3] / 2)[..., None]
    y1 = (box[..., 1] + box[..., 3] / 2)[..., None]
    pos = (cx >= x0) & (cx <= x1) & (cy >= y0) & (cy <= y1)
    neg = ~pos
    assert not (pos & neg).any() and (pos | neg).all()
    return pos


def info_nce(s, pos_mask, reduction="mean"):
    """``-log(sum_pos e^s / sum_all e^s)``, written as softplus(lse_neg - lse_pos).

    Raises ``ValueError`` when any row has no positive entry.
    """
    pos_mask = torch.as_tensor(pos_mask, dtype=torch.bool, device=s.device)
    if not pos_mask.any(dim=-1).all():
        raise ValueError("info_nce needs at least one positive pair per row")
    fill = torch.full_like(s, _MASK_FILL)
    lse_pos = torch.logsumexp(torch.where(pos_mask, s, fill), dim=-1)
    lse_neg = torch.logsumexp(torch.where(pos_mask, fill, s), dim=-1)
    has_neg = (~pos_mask).any(dim=-1)
    loss = torch.where(has_neg, F.softplus(lse_neg - lse_pos), torch.zeros_like(lse_pos))
    if reduction == "mean":
        return loss.mean()
    if reduction == "none":
        return loss
    raise ValueError(f"unknown reduction {reduction!r}")
