"""One-stream ViT backbone: patch embedding, pre-norm encoder, center head.

Token order through every layer is fixed as
``[rgb_template | rgb_search | event_template | event_search]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn


SCORE_PRIOR = 0.1


@dataclass(frozen=True)
class SegmentLayout:
    n_z: int
    n_x: int

    @property
    def total(self) -> int:
        return 2 * (self.n_z + self.n_x)

    @property
    def rgb_template(self) -> slice:
        return slice(0, self.n_z)

    @property
    def rgb_search(self) -> slice:
        return slice(self.n_z, self.n_z + self.n_x)

    @property
    def event_template(self) -> slice:
        s = self.n_z + self.n_x
        return slice(s, s + self.n_z)

    @property
    def event_search(self) -> slice:
        s = 2 * self.n_z + self.n_x
        return slice(s, s + self.n_x)

    def split(self, tokens):
        """Return the four segments of a (B, N, D) tensor."""
        if tokens.shape[-2] != self.total:
            raise ValueError(f"expected {self.total} tokens, got {tokens.shape[-2]}")
        return (tokens[..., self.rgb_template, :], tokens[..., self.rgb_search, :],
                tokens[..., self.event_template, :], tokens[..., self.event_search, :])


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (B, N, D)
    layout: SegmentLayout
    layer_index: int = 0


@dataclass
class HeadOutput:
    score_map: torch.Tensor   # (B, S, S), sigmoid
    offset_map: torch.Tensor  # (B, 2, S, S), cells, (dx, dy) from the cell center
    size_map: torch.Tensor    # (B, 2, S, S), (w, h) normalized
    box: torch.Tensor         # (B, 4) decoded (cx, cy, w, h)


def trunc_normal_init(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class PatchEmbed(nn.Module):
    """Per-modality linear patch projection plus learned positional embeddings."""

    def __init__(self, dim, patch, template_size, search_size):
        super().__init__()
        self.patch = patch
        self.template_size = template_size
        self.search_size = search_size
        self.n_z = (template_size // patch) ** 2
        self.n_x = (search_size // patch) ** 2
        self.proj_rgb = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        self.proj_event = nn.Conv2d(2, dim, kernel_size=patch, stride=patch)
        self.pos_rgb_z = nn.Parameter(torch.zeros(self.n_z, dim))
        self.pos_rgb_x = nn.Parameter(torch.zeros(self.n_x, dim))
        self.pos_event_z = nn.Parameter(torch.zeros(self.n_z, dim))
        self.pos_event_x = nn.Parameter(torch.zeros(self.n_x, dim))
        for p in (self.pos_rgb_z, self.pos_rgb_x, self.pos_event_z, self.pos_event_x):
            nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04)

    def forward(self, rgb, ev, which):
        """Embed a (B, 3, H, W) image and a (B, 2, H, W) event frame into token segments."""
        if which not in ("template", "search"):
            raise ValueError(f"which must be 'template' or 'search', got {which!r}")
        size = self.template_size if which == "template" else self.search_size
        if rgb.shape[-3:] != (3, size, size) or ev.shape[-3:] != (2, size, size):
            raise ValueError(f"{which} inputs must be 3x{size}x{size} and 2x{size}x{size}, "
                             f"got {tuple(rgb.shape[-3:])} and {tuple(ev.shape[-3:])}")
        pos_rgb, pos_ev = ((self.pos_rgb_z, self.pos_event_z) if which == "template"
                           else (self.pos_rgb_x, self.pos_event_x))
        t_rgb = self.proj_rgb(rgb).flatten(2).transpose(1, 2) + pos_rgb
        t_ev = self.proj_event(ev).flatten(2).transpose(1, 2) + pos_ev
        return t_rgb, t_ev


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.keep_weights = False
        self.last_weights = None

    def forward(self, x):
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (D // self.heads) ** -0.5
        attn = attn.softmax(dim=-1)
        if self.keep_weights:
            self.last_weights = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(out)


class EncoderLayer(nn.Module):
    """Pre-norm block: x + MSA(LN(x)), then + FFN(LN(.))."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, dim, depth, heads, mlp_ratio, injected_layers=()):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.injected_layers = tuple(injected_layers)
        trunc_normal_init(self)

    @property
    def depth(self):
        return len(self.layers)

    def layer(self, x, l):
        """Apply encoder layer ``l`` (1-based)."""
        if not 1 <= l <= self.depth:
            raise ValueError(f"layer index {l} outside [1, {self.depth}]")
        return self.layers[l - 1](x)

    def forward(self, x0, injections=None, return_all=False):
        """Run all layers, adding ``P`` at injected layers.

        ``injections`` is either a mapping ``{layer: delta}`` or a callable
        ``(layer, tokens_before_layer) -> delta | None``. The delta for layer
        ``l`` is computed from the tokens entering that layer and added to the
        layer's output. Returns the final normalized tokens (and, with
        ``return_all``, the list of per-layer outputs before the final norm).
        """
        if isinstance(injections, dict):
            bad = set(injections) - set(self.injected_layers)
            if bad:
                raise ValueError(f"injection at non-configured layers {sorted(bad)}; "
                                 f"allowed {list(self.injected_layers)}")
            table = injections
            injections = lambda l, _x: table.get(l)  # noqa: E731
        x = x0
        outs = []
        for l in range(1, self.depth + 1):
            delta = injections(l, x) if (injections is not None and l in self.injected_layers) else None
            x = self.layers[l - 1](x) if delta is None else self.layers[l - 1](x) + delta
            outs.append(x)
        x = self.norm(x)
        return (x, outs) if return_all else x


class CenterHead(nn.Module):
    """Three small conv towers (score / offset / size) over the S x S search grid."""

    def __init__(self, dim, channels, grid):
        super().__init__()
        self.grid = grid

        def tower(out):
            return nn.Sequential(
                nn.Conv2d(dim, channels, 3, padding=1), nn.ReLU(),
                nn.Conv2d(channels, channels // 2, 3, padding=1), nn.ReLU(),
                nn.Conv2d(channels // 2, out, 1))

        self.score = tower(1)
        self.offset = tower(2)
        self.size = tower(2)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        # focal-loss prior: initial score ~ SCORE_PRIOR everywhere
        nn.init.constant_(self.score[-1].bias, -math.log((1 - SCORE_PRIOR) / SCORE_PRIOR))

    def forward(self, search_tokens) -> HeadOutput:
        B, N, D = search_tokens.shape
        S = self.grid
        if N != S * S:
            raise ValueError(f"head expects {S * S} search tokens, got {N}")
        fmap = search_tokens.transpose(1, 2).reshape(B, D, S, S)
        score = torch.sigmoid(self.score(fmap)[:, 0])
        offset = self.offset(fmap)
        size = torch.sigmoid(self.size(fmap))
        return HeadOutput(score, offset, size, decode_maps(score, offset, size))


def decode_maps(score, offset, size):
    """Box at the score argmax: center = (cell + 0.5 + offset) / S, size read at that cell.

    Ties resolve to the smallest row-major index. The box is clamped to the unit square.
    """
    B, S, _ = score.shape
    idx = score.reshape(B, -1).argmax(dim=1)
    return decode_at(idx, offset, size)


def decode_at(idx, offset, size):
    B, _, S, _ = offset.shape
    row = torch.div(idx, S, rounding_mode="floor")
    col = idx - row * S
    b = torch.arange(B, device=offset.device)
    off = offset[b, :, row, col]
    wh = size[b, :, row, col]
    cx = (col.to(offset.dtype) + 0.5 + off[:, 0]) / S
    cy = (row.to(offset.dtype) + 0.5 + off[:, 1]) / S
    cx = cx.clamp(0.0, 1.0)
    cy = cy.clamp(0.0, 1.0)
    w = wh[:, 0].clamp(1e-6, 1.0)
    h = wh[:, 1].clamp(1e-6, 1.0)
    return torch.stack([cx, cy, w, h], dim=1)


def fuse_search_mean(tokens, layout: SegmentLayout):
    _, xr, _, xe = layout.split(tokens)
    return 0.5 * (xr + xe)


def grid_side(n_tokens: int) -> int:
    s = int(math.isqrt(n_tokens))
    if s * s != n_tokens:
        raise ValueError(f"{n_tokens} tokens do not form a square grid")
    return s
