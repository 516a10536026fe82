"""Slow, obviously-correct reference implementations used as test oracles."""
import math

import numpy as np


def conv2d_loops(x, w, b):
    """Direct-summation 'same' cross-correlation of one (C, H, W) sample.

    Padding before is (k - 1) // 2 on each axis, the rest goes after.
    """
    ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    top, left = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((co, h, wd))
    for o in range(co):
        for i in range(h):
            for j in range(wd):
                acc = b[o]
                for c in range(ci):
                    for u in range(kh):
                        for v in range(kw):
                            r, s = i + u - top, j + v - left
                            if 0 <= r < h and 0 <= s < wd:
                                acc += x[c, r, s] * w[o, c, u, v]
                out[o, i, j] = acc
    return out


def kld_sum(p, q, eps=0.0):
    """sum_i p_i (ln p_i - ln q_i), optionally after adding eps and renormalising."""
    p = [float(v) + eps for v in p]
    q = [float(v) + eps for v in q]
    zp, zq = math.fsum(p), math.fsum(q)
    total = []
    for pi, qi in zip(p, q):
        pi, qi = pi / zp, qi / zq
        if pi > 0:
            total.append(pi * (math.log(pi) - math.log(qi)))
    return math.fsum(total)


def maxpool_loops(x, ph, pw):
    c, h, w = x.shape
    oh, ow = -(-h // ph), -(-w // pw)
    out = np.empty((c, oh, ow))
    for k in range(c):
        for i in range(oh):
            for j in range(ow):
                out[k, i, j] = x[k, i * ph:(i + 1) * ph, j * pw:(j + 1) * pw].max()
    return out


def confusion_accuracy(pred, truth, k):
    m = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(pred, truth):
        m[t, p] += 1
    return np.trace(m) / m.sum()
