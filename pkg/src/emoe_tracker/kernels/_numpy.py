"""Pure-numpy reference versions of the hot loops.

Every function here has a twin in ``_numba`` with the same signature and the
same floating-point operation order, so both backends agree bit for bit.
"""
import numpy as np


def accumulate_polarity(xs, ys, ps, height, width):
    counts = np.zeros((2, height, width), dtype=np.float64)
    ch = (ps < 0).astype(np.int64)
    flat = (ch * height + ys.astype(np.int64)) * width + xs.astype(np.int64)
    counts.ravel()[:] = np.bincount(flat, minlength=2 * height * width)
    return counts


def emulate_events(prev_log, cur_log, ref_log, t0, t1, threshold):
    """Emit threshold-crossing events between two log-intensity frames.

    ``ref_log`` is the per-pixel reference level and is updated in place.
    Returns unsorted (x, y, t, p) arrays in row-major pixel order.
    """
    h, w = cur_log.shape
    delta = cur_log - ref_log
    n = np.floor(np.abs(delta) / threshold).astype(np.int64).ravel()
    total = int(n.sum())
    pix = np.repeat(np.arange(h * w), n)
    starts = np.repeat(np.cumsum(n) - n, n)
    k = (np.arange(total) - starts + 1).astype(np.float64)

    sign = np.where(delta.ravel() >= 0.0, 1.0, -1.0)
    s = sign[pix]
    ref = ref_log.ravel()[pix]
    prev = prev_log.ravel()[pix]
    cur = cur_log.ravel()[pix]
    level = ref + s * k * threshold
    span = cur - prev
    safe = np.where(span != 0.0, span, 1.0)
    frac = np.where(span != 0.0, (level - prev) / safe, 1.0)
    frac = np.minimum(np.maximum(frac, 0.0), 1.0)
    t = np.floor(t0 + frac * (t1 - t0)).astype(np.int64)

    ref_flat = ref_log.reshape(-1)
    ref_flat += sign * n * threshold
    xs = (pix % w).astype(np.int64)
    ys = (pix // w).astype(np.int64)
    return xs, ys, t, s.astype(np.int64)


def directional_blur(img, ux, uy, length):
    h, w = img.shape[:2]
    out = np.zeros(img.shape, dtype=np.float64)
    yy, xx = np.mgrid[0:h, 0:w]
    half = (length - 1) / 2.0
    for j in range(length):
        o = j - half
        sx = np.floor(xx + o * ux + 0.5).astype(np.int64)
        sy = np.floor(yy + o * uy + 0.5).astype(np.int64)
        np.clip(sx, 0, w - 1, out=sx)
        np.clip(sy, 0, h - 1, out=sy)
        out += img[sy, sx]
    return out / length


def success_counts(ious, thresholds):
    hit = (ious[:, None] >= thresholds[None, :]) & (ious[:, None] > 0.0)
    return hit.sum(axis=0).astype(np.int64)


def precision_counts(errors, thresholds):
    return (errors[:, None] <= thresholds[None, :]).sum(axis=0).astype(np.int64)
