"""Slow, literal reference implementations used as independent test oracles."""

import math

import numpy as np


def conv2d_direct(x, w, b, stride=1, dilation=1, pad=0, groups=1):
    """Explicit-loop convolution; sums input channel, kernel row, kernel column, then bias."""
    n_b, c_in, h, wd = x.shape
    c_out, cg, kh, kw = w.shape
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    og = c_out // groups
    out = np.zeros((n_b, c_out, ho, wo))
    for n in range(n_b):
        for o in range(c_out):
            g = o // og
            for yo in range(ho):
                for xo in range(wo):
                    acc = 0.0
                    for cc in range(cg):
                        c = g * cg + cc
                        for i in range(kh):
                            for j in range(kw):
                                y = yo * stride + i * dilation - pad
                                xx = xo * stride + j * dilation - pad
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc = acc + x[n, c, y, xx] * w[o, cc, i, j]
                    out[n, o, yo, xo] = acc + b[o]
    return out


def atrous_1d(f, w, k):
    """h(i) = sum_n f(i + k*n) w(n) with taps centered on i and zeros outside."""
    half = len(w) // 2
    out = []
    for i in range(len(f)):
        s = 0.0
        for n, wn in enumerate(w):
            j = i + k * (n - half)
            if 0 <= j < len(f):
                s += f[j] * wn
        out.append(s)
    return out


def boundary_direct(labels, cls):
    h, w = labels.shape
    out = set()
    for y in range(h):
        for x in range(w):
            if labels[y, x] != cls:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and labels[yy, xx] != cls:
                    out.add((y, x))
                    break
    return out


def bfscore_direct(pred, truth, tol, n=4):
    scores = []
    for o in range(n):
        bp = boundary_direct(pred, o)
        bg = boundary_direct(truth, o)
        if not bp and not bg:
            scores.append(math.nan)
            continue
        if not bp or not bg:
            scores.append(0.0)
            continue

        def hits(src, dst):
            c = 0
            for (y, x) in src:
                d = min(math.sqrt((y - v) ** 2 + (x - u) ** 2) for (v, u) in dst)
                if d < tol:
                    c += 1
            return c

        p = hits(bp, bg) / len(bp)
        r = hits(bg, bp) / len(bg)
        scores.append(0.0 if p + r == 0 else 2 * p * r / (p + r))
    defined = [s for s in scores if not math.isnan(s)]
    return scores, (sum(defined) / len(defined) if defined else math.nan)


def confusion_direct(pred, truth, n=4):
    P = [[0] * n for _ in range(n)]
    for a, b in zip(truth.ravel().tolist(), pred.ravel().tolist()):
        P[a][b] += 1
    return P
