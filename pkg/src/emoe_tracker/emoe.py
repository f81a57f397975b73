"""Environmental mixture-of-experts router.

Each injected encoder layer owns K attribute experts and one assembling
(gating) network. The gate emits K scores in (0, 1); the injection added to
the backbone tokens is the score-weighted sum of the expert features.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .backbone import trunc_normal_init


class Expert(nn.Module):
    """Pointwise conv -> MLP -> pointwise conv over a (B, N, D) token sequence."""

    def __init__(self, dim, hidden_ratio=2):
        super().__init__()
        hidden = dim * hidden_ratio
        self.conv_in = nn.Conv1d(dim, dim, 1)
        self.mlp = nn.Sequential(nn.Conv1d(dim, hidden, 1), nn.GELU(), nn.Conv1d(hidden, dim, 1))
        self.conv_out = nn.Conv1d(dim, dim, 1)

    def forward(self, x):
        h = x.transpose(1, 2)
        h = self.conv_out(self.mlp(self.conv_in(h)))
        return h.transpose(1, 2)


class AssemblingNetwork(nn.Module):
    """(conv -> batchnorm -> relu) x 2 -> conv to K -> sigmoid, mean-pooled over tokens."""

    def __init__(self, dim, num_experts):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv1d(dim, dim, 1), nn.BatchNorm1d(dim), nn.ReLU(),
            nn.Conv1d(dim, dim, 1), nn.BatchNorm1d(dim), nn.ReLU(),
            nn.Conv1d(dim, num_experts, 1))

    def forward(self, x):
        logits = self.body(x.transpose(1, 2))  # (B, K, N)
        return torch.sigmoid(logits).mean(dim=2)


def assemble(features, scores):
    """Weighted sum over experts: ``sum_t scores[:, t] * features[t]``.

    ``features`` is a sequence of K tensors (B, N, D); ``scores`` is (B, K).
    """
    if len(features) != scores.shape[-1]:
        raise ValueError(f"got {len(features)} expert features for {scores.shape[-1]} scores")
    out = scores[:, 0, None, None] * features[0]
    for t in range(1, len(features)):
        out = out + scores[:, t, None, None] * features[t]
    return out


class EmoeBlock(nn.Module):
    def __init__(self, dim, num_experts, hidden_ratio=2):
        super().__init__()
        self.experts = nn.ModuleList(Expert(dim, hidden_ratio) for _ in range(num_experts))
        self.gate = AssemblingNetwork(dim, num_experts)
        trunc_normal_init(self)

    @property
    def num_experts(self):
        return len(self.experts)

    def expert_forward(self, x, i):
        """Feature of expert ``i`` (1-based)."""
        if not 1 <= i <= self.num_experts:
            raise ValueError(f"expert index {i} outside [1, {self.num_experts}]")
        return self.experts[i - 1](x)

    def forward(self, x):
        """Return (injection, scores, expert features)."""
        feats = [e(x) for e in self.experts]
        scores = self.gate(x)
        return assemble(feats, scores), scores, feats


class Emoe(nn.Module):
    """All eMoE blocks, keyed by the 1-based encoder layer they feed."""

    def __init__(self, dim, num_experts, layers, hidden_ratio=2):
        super().__init__()
        self.layers = tuple(layers)
        self.blocks = nn.ModuleDict({str(l): EmoeBlock(dim, num_experts, hidden_ratio) for l in self.layers})
        self.num_experts = num_experts
        self._scores = None
        self.keep_features = False
        self.last_features = {}

    def block(self, l) -> EmoeBlock:
        if l not in self.layers:
            raise ValueError(f"layer {l} has no eMoE block; injected layers are {list(self.layers)}")
        return self.blocks[str(l)]

    def reset(self):
        self._scores = {}
        self.last_features = {}

    def inject(self, l, x):
        """Injection for layer ``l`` given the tokens entering that layer."""
        p, scores, feats = self.block(l)(x)
        self._scores[l] = scores
        if self.keep_features:
            self.last_features[l] = [f.detach() for f in feats]
        return p

    def collect_scores(self):
        """Scores (B, K) of every injected layer, in layer order, from the last forward pass."""
        if self._scores is None or len(self._scores) != len(self.layers):
            raise RuntimeError("collect_scores called before a forward pass")
        return [self._scores[l] for l in self.layers]
