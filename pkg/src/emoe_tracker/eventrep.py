"""Event stacking, the synthetic RGB+event fixture, and sample loading.

On-disk fixture layout (one directory per sequence)::

    <root>/manifest.json
    <root>/<seq>/rgb/%06d.png          8-bit RGB frames
    <root>/<seq>/events/%06d.csv       header ``x,y,t,p``; events of frame k's window
    <root>/<seq>/groundtruth.txt       one ``cx,cy,w,h`` line per frame, normalized
    <root>/<seq>/attributes.txt        K comma-separated 0/1 digits

Attribute order is fixed: illumination variation, motion blur, scale variance,
occlusion. Frame ``k`` collects events with ``k*dt <= t < (k+1)*dt``.
"""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import cv2
import numpy as np

from . import kernels
from .config import ATTRIBUTE_NAMES
from .errors import DataError

log = logging.getLogger(__name__)

FRAME_INTERVAL_US = 33_333
EVENT_THRESHOLD = 0.1
IMAGE_SIZE = (128, 128)  # (height, width)
MANIFEST = "manifest.json"


class FixtureExistsError(DataError):
    pass


class RawEvent(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True)
class BoundingBox:
    """Normalized center/size box; coordinates are fractions of the frame."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise DataError(f"non-finite bounding box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise DataError(f"degenerate bounding box {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        return cls(*(float(v) for v in a))

    def xyxy(self) -> np.ndarray:
        return np.array([self.cx - self.w / 2, self.cy - self.h / 2,
                         self.cx + self.w / 2, self.cy + self.h / 2])

    def clamped(self) -> "BoundingBox":
        """Intersect with the unit square (keeps a minimal positive size)."""
        x0, y0, x1, y1 = np.clip(self.xyxy(), 0.0, 1.0)
        w = max(x1 - x0, 1e-6)
        h = max(y1 - y0, 1e-6)
        return BoundingBox(min(x0 + w / 2, 1.0), min(y0 + h / 2, 1.0), w, h)


@dataclass
class EventFrame:
    """Polarity counts, shape (2, H, W): channel 0 positive, 1 negative, in [0, 1]."""

    grid: np.ndarray


@dataclass
class Sample:
    """One training/inference pair. Crops are channel-last float32 in [0, 1].

    ``search_center``/``search_side`` (pixels) locate the search crop in the
    source frame so predictions can be mapped back.
    """

    rgb_template: np.ndarray
    rgb_search: np.ndarray
    event_template: np.ndarray
    event_search: np.ndarray
    gt_box: BoundingBox
    attr: np.ndarray
    search_center: tuple = (0.0, 0.0)
    search_side: float = 1.0


# --------------------------------------------------------------------------- events

def as_event_array(events) -> np.ndarray:
    """Coerce a list of RawEvent / (x, y, t, p) rows into an (N, 4) int64 array."""
    if isinstance(events, np.ndarray):
        arr = events
    else:
        arr = np.array([tuple(e) for e in events], dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.int64)
    arr = np.asarray(arr, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise DataError(f"events must have shape (N, 4), got {arr.shape}")
    return arr


def event_counts(events, window, resolution) -> np.ndarray:
    """Un-normalized (2, H, W) polarity counts of events with window[0] <= t < window[1]."""
    h, w = resolution
    if h <= 0 or w <= 0:
        raise DataError(f"resolution must be positive, got {resolution}")
    arr = as_event_array(events)
    if len(arr) == 0:
        return np.zeros((2, h, w), dtype=np.float64)
    x, y, t, p = arr.T
    if np.any(np.diff(t) < 0):
        raise DataError("event stream is not sorted by timestamp")
    if x.min() < 0 or y.min() < 0 or x.max() >= w or y.max() >= h:
        raise DataError(f"event coordinates outside resolution {resolution}")
    if not np.all((p == 1) | (p == -1)):
        raise DataError("event polarity must be +1 or -1")
    lo = np.searchsorted(t, window[0], side="left")
    hi = np.searchsorted(t, window[1], side="left")
    return kernels.accumulate_polarity(x[lo:hi], y[lo:hi], p[lo:hi], h, w)


def stack_events(events, window, resolution) -> EventFrame:
    """Count events per polarity inside ``window`` and divide by the frame max."""
    counts = event_counts(events, window, resolution)
    peak = counts.max()
    if peak > 0:
        counts /= peak
    return EventFrame(counts)


# --------------------------------------------------------------------------- fixture

def _supersampled_mask(shape, cx, cy, w, h, kind, ss=4):
    """Anti-aliased coverage of an axis-aligned rectangle or ellipse (pixel units)."""
    H, W = shape
    ys = (np.arange(H * ss) + 0.5) / ss
    xs = (np.arange(W * ss) + 0.5) / ss
    dx = (xs[None, :] - cx) / (w / 2)
    dy = (ys[:, None] - cy) / (h / 2)
    if kind == "ellipse":
        inside = dx * dx + dy * dy <= 1.0
    else:
        inside = (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0)
    return inside.reshape(H, ss, W, ss).mean(axis=(1, 3))


def _background(rng, shape):
    H, W = shape
    coarse = rng.uniform(0.25, 0.6, size=(6, 6, 3))
    bg = cv2.resize(coarse, (W, H), interpolation=cv2.INTER_CUBIC)
    return np.clip(bg, 0.05, 0.95)


def _rect_overlap(a, b):
    """Overlap area of two (x0, y0, x1, y1) rectangles."""
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(w, 0.0) * max(h, 0.0)


def _render_sequence(rng, n_frames, label, shape=IMAGE_SIZE):
    """Render ``n_frames + 1`` float frames (the first is event pre-roll).

    Returns frames, per-frame boxes in pixels (cx, cy, w, h), and a record of
    the degradations actually applied.
    """
    H, W = shape
    illum, blur, scale, occl = (bool(b) for b in label)
    total = n_frames + 1
    bg = _background(rng, shape)
    color = rng.uniform(0.0, 1.0, size=3)
    color[rng.integers(3)] = rng.uniform(0.85, 1.0)
    color[rng.integers(3)] = rng.uniform(0.0, 0.1)
    kind = "ellipse" if rng.random() < 0.5 else "rect"
    base = rng.uniform(18.0, 26.0)
    aspect = rng.uniform(0.75, 1.33)

    s_end = rng.uniform(1.5, 1.8) if scale else 1.0
    if scale and rng.random() < 0.5:
        s_start, s_end = s_end, 1.0
    else:
        s_start = 1.0
    sizes = np.linspace(s_start, s_end, total)
    max_half = base * max(s_start, s_end) * max(aspect, 1 / aspect) * 0.6

    speed = rng.uniform(1.5, 3.0) if not blur else rng.uniform(3.0, 4.5)
    ang = rng.uniform(0, 2 * np.pi)
    vel = np.array([np.cos(ang), np.sin(ang)]) * speed
    pos = np.array([rng.uniform(max_half + 4, W - max_half - 4),
                    rng.uniform(max_half + 4, H - max_half - 4)])
    centers = np.zeros((total, 2))
    for k in range(total):
        centers[k] = pos
        nxt = pos + vel
        for d, lim in ((0, W), (1, H)):
            if nxt[d] < max_half + 2 or nxt[d] > lim - max_half - 2:
                vel[d] = -vel[d]
        pos = pos + vel

    gains = np.ones(total)
    record = {}
    if illum:
        g0, g1 = 1.0, float(rng.uniform(0.4, 0.5))
        if rng.random() < 0.5:
            g0, g1 = g1, 1.0
        gains = np.linspace(g0, g1, total)
        record["illumination_variation"] = {"gain_start": round(g0, 6), "gain_end": round(g1, 6)}
    if scale:
        record["scale_variance"] = {"scale_start": round(float(s_start), 6),
                                    "scale_end": round(float(s_end), 6)}

    occ_frames = []
    if occl:
        span = int(np.ceil(0.3 * n_frames))
        start = int(rng.integers(1, n_frames - span + 1))
        occ_frames = list(range(start, start + span))
        occ_frac = float(rng.uniform(0.5, 0.6))
        occ_color = rng.uniform(0.1, 0.3, size=3)
    blur_len = []

    frames = np.zeros((total, H, W, 3))
    boxes = np.zeros((total, 4))
    coverage = []
    for k in range(total):
        w = base * sizes[k] * np.sqrt(aspect)
        h = base * sizes[k] / np.sqrt(aspect)
        cx, cy = centers[k]
        img = bg.copy()
        m = _supersampled_mask(shape, cx, cy, w, h, kind)[..., None]
        img = img * (1 - m) + color * m
        # frame k of the sequence is render index k + 1
        if occl and (k - 1) in occ_frames:
            ow = occ_frac * w
            ox0, oy0, ox1, oy1 = cx - w / 2 - 2, cy - h / 2 - 3, cx - w / 2 + ow, cy + h / 2 + 3
            om = _supersampled_mask(shape, (ox0 + ox1) / 2, (oy0 + oy1) / 2,
                                    ox1 - ox0, oy1 - oy0, "rect")[..., None]
            img = img * (1 - om) + occ_color * om
            target = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            coverage.append(round(_rect_overlap(target, (ox0, oy0, ox1, oy1)) / (w * h), 6))
        if blur:
            n = int(max(5, round(2.0 * speed)))
            if k > 0:
                d = centers[k] - centers[k - 1]
            else:
                d = centers[1] - centers[0]
            d = d / (np.linalg.norm(d) + 1e-12)
            img = kernels.directional_blur(img, d[0], d[1], n)
            if k > 0:
                blur_len.append(n)
        img = np.clip(img * gains[k], 0.0, 1.0)
        frames[k] = img
        boxes[k] = (cx, cy, w, h)
    if blur:
        record["motion_blur"] = {"length_per_frame": blur_len}
    if occl:
        record["occlusion"] = {"frames": occ_frames, "coverage": coverage}
    return frames, boxes, record


def _log_intensity(img):
    lum = img @ np.array([0.299, 0.587, 0.114])
    return np.log(lum + 1e-3)


def generate_fixture(seed: int, num_sequences: int, frames_per_seq: int, out_dir,
                     force: bool = False, val_sequences: int = 0) -> dict:
    """Write a deterministic synthetic RGB+event tracking fixture; returns the manifest."""
    if num_sequences < 1 or frames_per_seq < 2:
        raise DataError("need at least one sequence and two frames per sequence")
    if not 0 <= val_sequences < num_sequences:
        raise DataError("val_sequences must be in [0, num_sequences)")
    out = Path(out_dir)
    mpath = out / MANIFEST
    if mpath.exists():
        if not force:
            raise FixtureExistsError(f"{mpath} exists; pass force=True to overwrite")
        old = json.loads(mpath.read_text())
        for entry in old.get("sequences", []):
            d = out / entry["name"]
            if d.is_dir():
                shutil.rmtree(d)
        mpath.unlink()
    out.mkdir(parents=True, exist_ok=True)

    H, W = IMAGE_SIZE
    seqs = []
    for i in range(num_sequences):
        rng = np.random.default_rng([seed, i])
        label = rng.integers(0, 2, size=len(ATTRIBUTE_NAMES))
        label[i % len(ATTRIBUTE_NAMES)] = 1
        frames, boxes, record = _render_sequence(rng, frames_per_seq, label)

        name = f"seq_{i:03d}"
        sdir = out / name
        (sdir / "rgb").mkdir(parents=True)
        (sdir / "events").mkdir()
        ref = np.ascontiguousarray(_log_intensity(frames[0]))
        prev = ref.copy()
        for k in range(frames_per_seq):
            img = frames[k + 1]
            cur = _log_intensity(img)
            t0 = k * FRAME_INTERVAL_US
            xs, ys, ts, ps = kernels.emulate_events(prev, cur, ref, t0, t0 + FRAME_INTERVAL_US - 1,
                                                    EVENT_THRESHOLD)
            prev = cur
            bgr = (np.round(img[..., ::-1] * 255)).astype(np.uint8)
            cv2.imwrite(str(sdir / "rgb" / f"{k:06d}.png"), bgr)
            rows = ["x,y,t,p"] + [f"{a},{b},{c},{d}" for a, b, c, d in zip(xs, ys, ts, ps)]
            (sdir / "events" / f"{k:06d}.csv").write_text("\n".join(rows) + "\n")

        norm = boxes[1:] / np.array([W, H, W, H])
        (sdir / "groundtruth.txt").write_text(
            "".join(",".join(f"{v:.6f}" for v in b) + "\n" for b in norm))
        (sdir / "attributes.txt").write_text(",".join(str(int(b)) for b in label) + "\n")
        split = "val" if i >= num_sequences - val_sequences else "train"
        seqs.append({"name": name, "split": split, "attributes": [int(b) for b in label],
                     "degradations": record})
        log.info("wrote %s attributes=%s", name, label.tolist())

    manifest = {
        "format": "emoe-fixture",
        "version": 1,
        "seed": int(seed),
        "num_sequences": int(num_sequences),
        "frames_per_seq": int(frames_per_seq),
        "image_size": [H, W],
        "frame_interval_us": FRAME_INTERVAL_US,
        "event_threshold": EVENT_THRESHOLD,
        "attribute_names": list(ATTRIBUTE_NAMES),
        "sequences": seqs,
    }
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# --------------------------------------------------------------------------- loading

def read_events_csv(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing event file {path}")
    with open(path) as f:
        header = f.readline().strip()
        if header != "x,y,t,p":
            raise DataError(f"{path}: expected header 'x,y,t,p', got {header!r}")
        arr = np.loadtxt(f, delimiter=",", dtype=np.int64, ndmin=2)
    return arr.reshape(-1, 4)


def read_attributes(path, num_attributes: int) -> np.ndarray:
    """Parse an attribute file; longer labels keep their first K digits."""
    try:
        digits = Path(path).read_text().strip().split(",")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if any(d.strip() not in ("0", "1") for d in digits):
        raise DataError(f"{path}: attribute entries must be 0 or 1")
    if len(digits) < num_attributes:
        raise DataError(f"{path}: {len(digits)} attribute digits, expected {num_attributes}")
    return np.array([int(d) for d in digits[:num_attributes]], dtype=np.float64)


def read_groundtruth(path) -> np.ndarray:
    try:
        gt = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if gt.shape[1] != 4:
        raise DataError(f"{path}: expected 4 columns cx,cy,w,h")
    return gt


class Sequence:
    """A fixture sequence held in memory. Read-only after construction."""

    def __init__(self, root, name, num_attributes=4, frame_interval_us=FRAME_INTERVAL_US):
        self.name = name
        self.path = Path(root) / name
        if not self.path.is_dir():
            raise DataError(f"missing sequence directory {self.path}")
        gt = read_groundtruth(self.path / "groundtruth.txt")
        self.attr = read_attributes(self.path / "attributes.txt", num_attributes)
        frames, events = [], []
        for k in range(len(gt)):
            p = self.path / "rgb" / f"{k:06d}.png"
            img = cv2.imread(str(p), cv2.IMREAD_COLOR)
            if img is None:
                raise DataError(f"missing RGB frame {p}")
            frames.append(img[..., ::-1].astype(np.float32) / 255.0)
        self.height, self.width = frames[0].shape[:2]
        for k in range(len(gt)):
            ev = read_events_csv(self.path / "events" / f"{k:06d}.csv")
            win = (k * frame_interval_us, (k + 1) * frame_interval_us)
            grid = stack_events(ev, win, (self.height, self.width)).grid
            events.append(np.ascontiguousarray(grid.transpose(1, 2, 0), dtype=np.float32))
        self.rgb = np.stack(frames)
        self.events = np.stack(events)
        self.gt = np.array([BoundingBox.from_array(b).clamped().as_array() for b in gt])
        for arr in (self.rgb, self.events, self.gt, self.attr):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.gt)

    def box_px(self, k):
        cx, cy, w, h = self.gt[k]
        return np.array([cx * self.width, cy * self.height, w * self.width, h * self.height])


class FixtureDataset:
    def __init__(self, root, num_attributes=4, split=None):
        self.root = Path(root)
        mpath = self.root / MANIFEST
        if not mpath.is_file():
            raise DataError(f"no fixture manifest at {mpath}")
        self.manifest = json.loads(mpath.read_text())
        interval = self.manifest.get("frame_interval_us", FRAME_INTERVAL_US)
        entries = [e for e in self.manifest["sequences"] if split in (None, e.get("split"))]
        if not entries:
            raise DataError(f"fixture at {root} has no sequences in split {split!r}")
        self.sequences = [Sequence(self.root, e["name"], num_attributes, interval) for e in entries]

    def __len__(self):
        return len(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    def by_name(self, name):
        for s in self.sequences:
            if s.name == name:
                return s
        raise DataError(f"no sequence named {name!r}")


def crop(image, center, side, out_size, border=0.0):
    """Square crop of ``side`` pixels around ``center`` (continuous coords), resized.

    Out-of-frame regions are filled with ``border``.
    """
    a = side / out_size
    bx = center[0] - side / 2 + 0.5 * a - 0.5
    by = center[1] - side / 2 + 0.5 * a - 0.5
    M = np.array([[a, 0.0, bx], [0.0, a, by]])
    out = cv2.warpAffine(image, M, (out_size, out_size),
                         flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=(border,) * 4)
    if out.ndim == 2:
        out = out[:, :, None]
    return out


def box_to_crop(box_px, center, side) -> BoundingBox:
    """Map a pixel (cx, cy, w, h) box into normalized crop coordinates, clamped."""
    cx = (box_px[0] - (center[0] - side / 2)) / side
    cy = (box_px[1] - (center[1] - side / 2)) / side
    return BoundingBox(cx, cy, box_px[2] / side, box_px[3] / side).clamped()


def crop_to_image(box, center, side) -> np.ndarray:
    """Inverse of :func:`box_to_crop` (without clamping); returns pixel (cx, cy, w, h)."""
    b = box.as_array() if isinstance(box, BoundingBox) else np.asarray(box, dtype=np.float64)
    return np.array([center[0] - side / 2 + b[0] * side,
                     center[1] - side / 2 + b[1] * side,
                     b[2] * side, b[3] * side])


def template_crops(seq: Sequence, template_index: int, size: int, factor: float):
    box = seq.box_px(template_index)
    side = np.sqrt(box[2] * box[3]) * factor
    c = (box[0], box[1])
    return (crop(seq.rgb[template_index], c, side, size),
            crop(seq.events[template_index], c, side, size))


def search_crops(seq: Sequence, frame_index: int, center, side, size: int):
    return (crop(seq.rgb[frame_index], center, side, size),
            crop(seq.events[frame_index], center, side, size))


def load_sample(seq: Sequence, frame_index: int, template_index: int, data_cfg=None,
                rng: np.random.Generator | None = None) -> Sample:
    """Template around the template-frame box, search around the current box.

    With ``rng`` given, the search center and size are jittered per
    ``data_cfg.center_jitter`` / ``data_cfg.scale_jitter``.
    """
    from .config import DataConfig

    cfg = data_cfg or DataConfig()
    n = len(seq)
    if not (0 <= frame_index < n and 0 <= template_index < n):
        raise DataError(f"indices ({frame_index}, {template_index}) out of range for {n} frames")
    zt_rgb, zt_ev = template_crops(seq, template_index, cfg.template_size, cfg.template_factor)

    box = seq.box_px(frame_index)
    base = np.sqrt(box[2] * box[3])
    center = np.array(box[:2])
    side = base * cfg.search_factor
    if rng is not None:
        center = center + rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=2) * base
        side = side * float(np.exp(rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)))
    x_rgb, x_ev = search_crops(seq, frame_index, center, side, cfg.search_size)
    gt = box_to_crop(box, center, side)
    return Sample(zt_rgb, x_rgb, zt_ev, x_ev, gt, np.array(seq.attr),
                  (float(center[0]), float(center[1])), float(side))
