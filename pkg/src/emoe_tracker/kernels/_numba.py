"""numba-compiled versions of the hot loops (see ``_numpy`` for the reference)."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def accumulate_polarity(xs, ys, ps, height, width):
    counts = np.zeros((2, height, width), dtype=np.float64)
    for i in range(xs.shape[0]):
        ch = 1 if ps[i] < 0 else 0
        counts[ch, ys[i], xs[i]] += 1.0
    return counts


@njit(cache=True)
def emulate_events(prev_log, cur_log, ref_log, t0, t1, threshold):
    h, w = cur_log.shape
    total = 0
    for y in range(h):
        for x in range(w):
            total += int(math.floor(abs(cur_log[y, x] - ref_log[y, x]) / threshold))

    xs = np.empty(total, dtype=np.int64)
    ys = np.empty(total, dtype=np.int64)
    ts = np.empty(total, dtype=np.int64)
    ps = np.empty(total, dtype=np.int64)
    m = 0
    for y in range(h):
        for x in range(w):
            delta = cur_log[y, x] - ref_log[y, x]
            n = int(math.floor(abs(delta) / threshold))
            if n == 0:
                continue
            s = 1.0 if delta >= 0.0 else -1.0
            ref = ref_log[y, x]
            prev = prev_log[y, x]
            span = cur_log[y, x] - prev
            for k in range(1, n + 1):
                level = ref + s * float(k) * threshold
                if span != 0.0:
                    frac = (level - prev) / span
                else:
                    frac = 1.0
                frac = min(max(frac, 0.0), 1.0)
                xs[m] = x
                ys[m] = y
                ts[m] = int(math.floor(t0 + frac * (t1 - t0)))
                ps[m] = int(s)
                m += 1
            ref_log[y, x] = ref + s * float(n) * threshold
    return xs, ys, ts, ps


@njit(cache=True)
def directional_blur(img, ux, uy, length):
    h, w = img.shape[0], img.shape[1]
    c = img.shape[2]
    out = np.zeros(img.shape, dtype=np.float64)
    half = (length - 1) / 2.0
    for y in range(h):
        for x in range(w):
            for j in range(length):
                o = j - half
                sx = int(math.floor(x + o * ux + 0.5))
                sy = int(math.floor(y + o * uy + 0.5))
                sx = min(max(sx, 0), w - 1)
                sy = min(max(sy, 0), h - 1)
                for ch in range(c):
                    out[y, x, ch] += img[sy, sx, ch]
    return out / length


@njit(cache=True)
def success_counts(ious, thresholds):
    out = np.zeros(thresholds.shape[0], dtype=np.int64)
    for i in range(ious.shape[0]):
        v = ious[i]
        if v <= 0.0:
            continue
        for j in range(thresholds.shape[0]):
            if v >= thresholds[j]:
                out[j] += 1
    return out


@njit(cache=True)
def precision_counts(errors, thresholds):
    out = np.zeros(thresholds.shape[0], dtype=np.int64)
    for i in range(errors.shape[0]):
        for j in range(thresholds.shape[0]):
            if errors[i] <= thresholds[j]:
                out[j] += 1
    return out
