"""Slow, obviously-correct reference implementations used only by the tests."""
import itertools
import math
from fractions import Fraction

import numpy as np


def conv2d_loops(x, w, b):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    top, left = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((n, cout, h, wd), dtype=np.float64)
    for i in range(n):
        for o in range(cout):
            for y in range(h):
                for xx in range(wd):
                    acc = float(b[o])
                    for c in range(cin):
                        for dy in range(kh):
                            for dx in range(kw):
                                yy, xi = y + dy - top, xx + dx - left
                                if 0 <= yy < h and 0 <= xi < wd:
                                    acc += float(x[i, c, yy, xi]) * float(w[o, c, dy, dx])
                    out[i, o, y, xx] = acc
    return out


def maxpool_loops(x, pool):
    n, c, h, w = x.shape
    ph, pw = pool
    out = np.zeros((n, c, h // ph, w // pw), dtype=x.dtype)
    for i, ch, y, xx in itertools.product(range(n), range(c), range(h // ph), range(w // pw)):
        out[i, ch, y, xx] = max(x[i, ch, y * ph + a, xx * pw + bb]
                                for a in range(ph) for bb in range(pw))
    return out


def dense_loops(x, w, b):
    return np.array([[sum(float(x[i, f]) * float(w[k, f]) for f in range(x.shape[1])) + float(b[k])
                      for k in range(w.shape[0])] for i in range(x.shape[0])])


def central_difference(f, x, step=1e-5):
    """Gradient of scalar ``f`` at array ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + step
        hi = f()
        flat[k] = old - step
        lo = f()
        flat[k] = old
        g.reshape(-1)[k] = (hi - lo) / (2 * step)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


# -- event scoring ------------------------------------------------------------


def events_brute(starts, window_s, labels, events, duration_h, tol):
    """Event scoring by explicit interval overlap, one window at a time."""
    detected = set()
    for k, (s, lab) in enumerate(zip(starts, labels)):
        if not lab:
            continue
        for j, (a, b) in enumerate(events):
            if s < b + tol and s + window_s > a - tol:
                detected.add(j)
    runs, inside = 0, False
    for s, lab in zip(starts, labels):
        false_alarm = lab and not any(s < b + tol and s + window_s > a - tol for a, b in events)
        if false_alarm and not inside:
            runs += 1
        inside = bool(false_alarm)
    return detected, runs, runs / duration_h


def smooth_brute(raw):
    return [int(sum(raw[max(0, i - 2):i + 1]) >= 2) for i in range(len(raw))]


# -- fixed-point requantization in exact rationals ----------------------------


def round_half_away_exact(fr: Fraction) -> int:
    n = abs(fr)
    r = math.floor(n + Fraction(1, 2))
    return r if fr >= 0 else -r


def requant_exact(acc: int, m0: int, shift: int, zp: int, lo: int, hi: int = 127) -> int:
    v = round_half_away_exact(Fraction(acc * m0, 2 ** (31 - shift))) + zp
    return max(lo, min(hi, v))


def quantized_forward_exact(qm, q_input):
    """Integer forward pass in Python ints, requantizing with exact rationals."""
    x = np.asarray(q_input).astype(object)
    for layer in qm.layers:
        if layer.kind in ("conv", "dense"):
            zp_in, zp_out = layer.in_qp.zero_point, layer.out_qp.zero_point
            lo = zp_out if layer.relu else -128
            w = layer.weights.astype(np.int64)
            b = layer.bias.astype(np.int64)
            if layer.kind == "conv":
                acc = conv2d_loops((x - zp_in).astype(np.float64), w, b)
            else:
                acc = dense_loops((x.reshape(len(x), -1) - zp_in).astype(np.float64), w, b)
            assert np.all(acc == np.round(acc)) and np.abs(acc).max() < 2 ** 53
            flat = [requant_exact(int(a), layer.m0, layer.shift, zp_out, lo) for a in acc.ravel()]
            x = np.array(flat, dtype=object).reshape(acc.shape)
        elif layer.kind == "maxpool":
            x = maxpool_loops(x, layer.pool)
        elif layer.kind == "gap":
            n, c, h, w = x.shape
            x = np.array([[round_half_away_exact(Fraction(int(x[i, k].sum()), h * w))
                           for k in range(c)] for i in range(n)], dtype=object)
    return x.astype(np.int64)
