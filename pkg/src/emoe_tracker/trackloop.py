"""Training loop, online sequence tracking, and SR / PR / NPR evaluation."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import kernels
from .config import ATTRIBUTE_NAMES, RunConfig
from .crm import info_nce, partition_pairs, similarity
from .errors import DataError
from .eventrep import (BoundingBox, FixtureDataset, Sequence, crop_to_image, load_sample,
                       search_crops, template_crops)
from .model import EMoETracker, save_checkpoint
from .objective import LossWeights, attribute_loss, center_cell, make_optimizer, total_loss, tracking_loss

log = logging.getLogger(__name__)

IOU_THRESHOLDS = np.arange(21) / 20.0
PR_THRESHOLD_PX = 20.0
NPR_THRESHOLD = 0.2
MIN_SEARCH_SIDE_PX = 8.0


@dataclass
class TrackResult:
    """Per-frame pixel boxes (cx, cy, w, h) and peak scores."""

    name: str
    boxes: np.ndarray
    scores: np.ndarray

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"{k},{b[0]:.4f},{b[1]:.4f},{b[2]:.4f},{b[3]:.4f},{s:.6f}"
                 for k, (b, s) in enumerate(zip(self.boxes, self.scores))]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path, name=None) -> "TrackResult":
        arr = np.loadtxt(path, delimiter=",", ndmin=2)
        if arr.shape[1] != 6:
            raise DataError(f"{path}: expected frame_idx,cx,cy,w,h,score")
        return cls(name or Path(path).stem, arr[:, 1:5], arr[:, 5])


@dataclass
class MetricsReport:
    sr: float
    pr: float
    npr: float
    num_sequences: int
    per_attribute: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"SR": self.sr, "PR": self.pr, "NPR": self.npr, "num_sequences": self.num_sequences}
        for name, sub in self.per_attribute.items():
            for k in ("SR", "PR", "NPR", "num_sequences"):
                out[f"attr/{name}/{k}"] = sub[k]
        return out


@dataclass
class TrainResult:
    model: EMoETracker
    history: list
    best_sr: float
    checkpoint: Path | None


# --------------------------------------------------------------------------- batches

def to_tensor(img, dtype=torch.float32):
    """(H, W, C) or (B, H, W, C) numpy -> channel-first tensor."""
    t = torch.as_tensor(np.ascontiguousarray(img), dtype=dtype)
    return t.permute(2, 0, 1) if t.dim() == 3 else t.permute(0, 3, 1, 2)


def collate(samples, dtype=torch.float32):
    rgb_z = to_tensor(np.stack([s.rgb_template for s in samples]), dtype)
    rgb_x = to_tensor(np.stack([s.rgb_search for s in samples]), dtype)
    ev_z = to_tensor(np.stack([s.event_template for s in samples]), dtype)
    ev_x = to_tensor(np.stack([s.event_search for s in samples]), dtype)
    gt = torch.tensor(np.stack([s.gt_box.as_array() for s in samples]), dtype=dtype)
    attr = torch.tensor(np.stack([s.attr for s in samples]), dtype=dtype)
    return rgb_z, rgb_x, ev_z, ev_x, gt, attr


def compute_losses(model: EMoETracker, batch, weights: LossWeights):
    rgb_z, rgb_x, ev_z, ev_x, gt, attr = batch
    pos = None
    if model.crm is not None:
        pos = partition_pairs(gt, model.grid)
        # a box smaller than a patch may cover no patch center; its center cell stands in
        empty = ~pos.any(dim=-1)
        if empty.any():
            pos[empty, center_cell(gt[empty], model.grid)] = True
    out = model(rgb_z, rgb_x, ev_z, ev_x, pos_mask=pos)
    cls, iou, l1 = tracking_loss(out.head, gt, regress_at=weights.regress_at)
    zero = torch.zeros((), dtype=gt.dtype)
    nce = info_nce(similarity(out.fused, model.crm.tau), pos) if model.crm is not None else zero
    attr_l = attribute_loss(out.scores, attr) if out.scores else zero
    return total_loss(cls, iou, l1, nce, attr_l, weights), out


def sample_batch(dataset, rng, cfg: RunConfig):
    samples = []
    for _ in range(cfg.train.batch_size):
        seq = dataset[int(rng.integers(len(dataset)))]
        k = int(rng.integers(len(seq)))
        samples.append(load_sample(seq, k, 0, cfg.data, rng))
    return samples


# --------------------------------------------------------------------------- training

def train(cfg: RunConfig, dataset, out_dir=None, val_dataset=None, log_every: int = 0) -> TrainResult:
    """Seeded training of the trainable groups; keeps the best-SR weights."""
    cfg.validate()
    torch.manual_seed(cfg.train.seed)
    rng = np.random.default_rng(cfg.train.seed)
    model = EMoETracker(cfg)
    model.train()
    weights = LossWeights.from_config(cfg.loss)
    epochs = math.ceil(cfg.train.steps / cfg.train.steps_per_epoch)
    opt, sched = make_optimizer(model, cfg.optim, epochs)
    trainable = [p for p in model.parameters() if p.requires_grad]
    val = val_dataset if val_dataset is not None else dataset

    history = []
    best_sr, best_state = -1.0, None
    out_dir = Path(out_dir) if out_dir is not None else None
    for step in range(1, cfg.train.steps + 1):
        batch = collate(sample_batch(dataset, rng, cfg))
        parts, _ = compute_losses(model, batch, weights)
        opt.zero_grad(set_to_none=True)
        parts.total.backward()
        if cfg.optim.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(trainable, cfg.optim.grad_clip)
        opt.step()
        rec = {"step": step, "lr": opt.param_groups[0]["lr"], **parts.as_floats()}
        history.append(rec)
        if log_every and step % log_every == 0:
            log.info("step %d %s", step, " ".join(f"{k}={v:.4f}" for k, v in rec.items() if k != "step"))
        end_of_epoch = step % cfg.train.steps_per_epoch == 0 or step == cfg.train.steps
        if end_of_epoch:
            sched.step()
            if cfg.train.validate:
                sr = evaluate_dataset(model, val, cfg).sr
                model.train()
                rec["val/SR"] = sr
                if sr > best_sr:
                    best_sr, best_state = sr, copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    ckpt = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = save_checkpoint(model, out_dir / "model.npz")
        write_history(history, out_dir / "losses.csv")
    return TrainResult(model, history, best_sr, ckpt)


def write_history(history, path):
    keys = sorted({k for rec in history for k in rec}, key=lambda k: (k != "step", k))
    lines = [",".join(keys)]
    for rec in history:
        lines.append(",".join("" if k not in rec else f"{rec[k]:.8g}" for k in keys))
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------- tracking

@torch.no_grad()
def track_sequence(model: EMoETracker, seq: Sequence, cfg: RunConfig | None = None) -> TrackResult:
    """Template from frame 0; each search window is centered on the previous prediction."""
    cfg = cfg or model.cfg
    if len(seq) < 2:
        raise DataError(f"sequence {seq.name} has fewer than 2 frames")
    was_training = model.training
    model.eval()
    d = cfg.data
    dtype = next(model.parameters()).dtype
    z_rgb, z_ev = template_crops(seq, 0, d.template_size, d.template_factor)
    z_rgb, z_ev = to_tensor(z_rgb[None], dtype), to_tensor(z_ev[None], dtype)
    H, W = seq.height, seq.width
    boxes = np.zeros((len(seq), 4))
    scores = np.zeros(len(seq))
    boxes[0] = seq.box_px(0)
    scores[0] = 1.0
    prev = boxes[0]
    for k in range(1, len(seq)):
        side = max(math.sqrt(prev[2] * prev[3]) * d.search_factor, MIN_SEARCH_SIDE_PX)
        center = (prev[0], prev[1])
        x_rgb, x_ev = search_crops(seq, k, center, side, d.search_size)
        out = model(z_rgb, to_tensor(x_rgb[None], dtype), z_ev, to_tensor(x_ev[None], dtype))
        box = crop_to_image(out.head.box[0].double().numpy(), center, side)
        boxes[k] = clip_box_px(box, W, H)
        scores[k] = float(out.head.score_map[0].max())
        prev = boxes[k]
    if was_training:
        model.train()
    return TrackResult(seq.name, boxes, scores)


def clip_box_px(box, width, height, min_size=1.0):
    x0 = np.clip(box[0] - box[2] / 2, 0, width - min_size)
    y0 = np.clip(box[1] - box[3] / 2, 0, height - min_size)
    x1 = np.clip(box[0] + box[2] / 2, x0 + min_size, width)
    y1 = np.clip(box[1] + box[3] / 2, y0 + min_size, height)
    return np.array([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0])


# --------------------------------------------------------------------------- metrics

def box_iou_px(a, b):
    """Row-wise IoU of (N, 4) center-size boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax0, ay0, ax1, ay1 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2, a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx0, by0, bx1, by1 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2, b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0, None)
    inter = iw * ih
    # areas from the same corners as the overlap, so identical boxes give exactly 1
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def success_rate(ious) -> float:
    """Mean over thresholds 0, 0.05, ..., 1 of the fraction of frames with 0 < IoU >= t."""
    ious = np.asarray(ious, dtype=np.float64)
    counts = kernels.success_counts(ious, IOU_THRESHOLDS)
    return float(np.mean(counts / len(ious)))


def sequence_metrics(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DataError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    n = len(gt)
    sr = success_rate(box_iou_px(pred, gt))
    d = pred[:, :2] - gt[:, :2]
    err = np.hypot(d[:, 0], d[:, 1])
    nerr = np.hypot(d[:, 0] / gt[:, 2], d[:, 1] / gt[:, 3])
    pr = kernels.precision_counts(err, np.array([PR_THRESHOLD_PX]))[0] / n
    npr = kernels.precision_counts(nerr, np.array([NPR_THRESHOLD]))[0] / n
    return sr, float(pr), float(npr)


def evaluate(results, gts, attrs=None, attribute_names=ATTRIBUTE_NAMES) -> MetricsReport:
    """Average per-sequence SR / PR / NPR; sub-reports over sequences whose attribute bit is 1.

    ``results`` are TrackResults or (n, 4) pixel arrays; ``gts`` matching pixel arrays.
    """
    if len(results) != len(gts):
        raise DataError(f"{len(results)} results for {len(gts)} ground-truth sequences")
    if len(gts) == 0:
        raise DataError("nothing to evaluate")
    per_seq = []
    for r, g in zip(results, gts):
        boxes = r.boxes if isinstance(r, TrackResult) else r
        per_seq.append(sequence_metrics(boxes, g))
    per_seq = np.array(per_seq)
    sr, pr, npr = per_seq.mean(axis=0)
    sub = {}
    if attrs is not None:
        attrs = np.asarray(attrs)
        if len(attrs) != len(gts):
            raise DataError("attribute labels do not align with sequences")
        for j in range(attrs.shape[1]):
            sel = attrs[:, j] == 1
            # keys stay fixed; an attribute no sequence carries reports NaN
            m = per_seq[sel].mean(axis=0) if sel.any() else np.full(3, np.nan)
            sub[attribute_names[j]] = {"SR": float(m[0]), "PR": float(m[1]), "NPR": float(m[2]),
                                       "num_sequences": int(sel.sum())}
    return MetricsReport(float(sr), float(pr), float(npr), len(gts), sub)


def gt_pixels(seq: Sequence) -> np.ndarray:
    return np.array([seq.box_px(k) for k in range(len(seq))])


def evaluate_dataset(model, dataset, cfg=None, return_results=False):
    results = [track_sequence(model, s, cfg) for s in dataset]
    report = evaluate(results, [gt_pixels(s) for s in dataset], [s.attr for s in dataset])
    return (report, results) if return_results else report


def load_split(root, cfg: RunConfig, split="train"):
    """Fixture split; falls back to every sequence when the split is empty."""
    try:
        return FixtureDataset(root, cfg.emoe.num_experts, split)
    except DataError:
        if split is None:
            raise
        return FixtureDataset(root, cfg.emoe.num_experts, None)


__all__ = ["BoundingBox", "MetricsReport", "TrackResult", "TrainResult", "evaluate",
           "evaluate_dataset", "track_sequence", "train"]
