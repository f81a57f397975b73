"""Attention, score-map and expert-feature images for one sample."""
from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
import torch

from .errors import DataError
from .eventrep import Sequence, load_sample
from .model import EMoETracker
from .trackloop import to_tensor

GATING_FILE = "gating_weights.txt"


def _to_u8(m):
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        return np.zeros(m.shape, np.uint8)
    return np.round((m - lo) / (hi - lo) * 255).astype(np.uint8)


def heat_image(m, size):
    """Min-max normalized map, upsampled with nearest neighbour, JET colormap (BGR)."""
    u8 = cv2.resize(_to_u8(m), (size, size), interpolation=cv2.INTER_NEAREST)
    return cv2.applyColorMap(u8, cv2.COLORMAP_JET)


def overlay(rgb, m, alpha=0.5):
    bgr = cv2.cvtColor(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8), cv2.COLOR_RGB2BGR)
    heat = heat_image(m, rgb.shape[0])
    return cv2.addWeighted(bgr, 1 - alpha, heat, alpha, 0)


def search_attention(weights, layout, grid):
    """Template-to-search attention of one layer, averaged over heads and template queries.

    ``weights`` is (B, heads, N, N). Both modality segments are summed so the
    map shows where the target template looks in the search region.
    """
    a = weights[0].mean(0)
    queries = torch.cat([a[layout.rgb_template], a[layout.event_template]], 0).mean(0)
    m = queries[layout.rgb_search] + queries[layout.event_search]
    return m.reshape(grid, grid).cpu().numpy()


def expert_magnitudes(features, layout, grid):
    """Per-expert L2 norm over channels of the search tokens, modalities averaged."""
    out = []
    for f in features:
        f = f[0]
        mag = 0.5 * (f[layout.rgb_search].norm(dim=-1) + f[layout.event_search].norm(dim=-1))
        out.append(mag.reshape(grid, grid).cpu().numpy())
    return out


def format_gating(layers, scores):
    """One line per injected layer: ``layer <l>: w_1 ... w_K`` with round-trip float reprs."""
    lines = []
    for l, w in zip(layers, scores):
        vals = " ".join(repr(float(v)) for v in w[0].tolist())
        lines.append(f"layer {l}: {vals}")
    return "\n".join(lines) + "\n"


def parse_gating(text):
    out = {}
    for line in text.strip().splitlines():
        head, vals = line.split(":", 1)
        out[int(head.split()[1])] = [float(v) for v in vals.split()]
    return out


@torch.no_grad()
def visualize(model: EMoETracker, seq: Sequence, frame_index: int, out_dir) -> list[Path]:
    """Write the attention, score and expert images plus the gating sidecar; returns the paths."""
    if not 0 <= frame_index < len(seq):
        raise DataError(f"frame {frame_index} not in sequence {seq.name} ({len(seq)} frames)")
    out_dir = Path(out_dir)
    cfg = model.cfg
    sample = load_sample(seq, frame_index, 0, cfg.data)
    dtype = next(model.parameters()).dtype
    model.eval()
    model.set_attention_capture(True)
    if model.emoe is not None:
        model.emoe.keep_features = True
    try:
        out = model(to_tensor(sample.rgb_template[None], dtype), to_tensor(sample.rgb_search[None], dtype),
                    to_tensor(sample.event_template[None], dtype), to_tensor(sample.event_search[None], dtype))
        layers = list(cfg.injected_layers)
        attn = {l: search_attention(model.encoder.layers[l - 1].attn.last_weights, model.layout, model.grid)
                for l in layers}
        feats = model.emoe.last_features[layers[-1]] if model.emoe is not None else []
    finally:
        model.set_attention_capture(False)
        if model.emoe is not None:
            model.emoe.keep_features = False

    out_dir.mkdir(parents=True, exist_ok=True)
    size = cfg.data.search_size
    written = []
    for l, m in attn.items():
        p = out_dir / f"attention_layer{l:02d}.png"
        cv2.imwrite(str(p), overlay(sample.rgb_search, m))
        written.append(p)
    p = out_dir / "score_map.png"
    cv2.imwrite(str(p), overlay(sample.rgb_search, out.head.score_map[0].cpu().numpy()))
    written.append(p)
    for i, m in enumerate(expert_magnitudes(feats, model.layout, model.grid), start=1):
        p = out_dir / f"expert{i}_layer{layers[-1]:02d}.png"
        cv2.imwrite(str(p), heat_image(m, size))
        written.append(p)
    side = out_dir / GATING_FILE
    side.write_text(format_gating(layers, out.scores) if out.scores else "")
    return written
