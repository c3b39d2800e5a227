"""Slow, loop-based reference implementations used as test oracles.

Nothing here imports the package's codec or grid code.
"""

import itertools
import math


def offsets(kind):
    if kind == "N4":
        ok = lambda a, b: abs(a) + abs(b) == 1
    elif kind == "N8":
        ok = lambda a, b: max(abs(a), abs(b)) == 1
    else:
        ok = lambda a, b: 0 < abs(a) + abs(b) <= 2
    return sorted((a, b) for a in range(-2, 3) for b in range(-2, 3) if ok(a, b))


def encode(mask, kind):
    h, w = len(mask), len(mask[0])
    offs = offsets(kind)
    cube = [[[0] * len(offs) for _ in range(w)] for _ in range(h)]
    for i in range(h):
        for j in range(w):
            for c, (a, b) in enumerate(offs):
                ni, nj = i + a, j + b
                if 0 <= ni < h and 0 <= nj < w and mask[i][j] and mask[ni][nj]:
                    cube[i][j][c] = 1
    return cube


def decode(cube, kind, t=0.5, k=1):
    h, w = len(cube), len(cube[0])
    offs = offsets(kind)
    out = [[False] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            n = 0
            for c, (a, b) in enumerate(offs):
                ni, nj = i + a, j + b
                if not (0 <= ni < h and 0 <= nj < w):
                    continue
                back = offs.index((-a, -b))
                if cube[i][j][c] > t and cube[ni][nj][back] > t:
                    n += 1
            out[i][j] = n >= k
    return out


def bilinear(img, out_h, out_w):
    """Half-pixel-centre bilinear resize of a 2-D list, one output pixel at a time."""
    h, w = len(img), len(img[0])
    res = [[0.0] * out_w for _ in range(out_h)]
    for y in range(out_h):
        sy = max((y + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(int(math.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for x in range(out_w):
            sx = max((x + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(int(math.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = img[y0][x0] * (1 - fx) + img[y0][x1] * fx
            bot = img[y1][x0] * (1 - fx) + img[y1][x1] * fx
            res[y][x] = top * (1 - fy) + bot * fy
    return res


def conv2d(x, k, stride=1, dilation=1, pad=0):
    """Single-image cross-correlation on nested lists: x[ci][r][c], k[co][ci][kr][kc]."""
    cin, h, w = len(x), len(x[0]), len(x[0][0])
    cout, kh, kw = len(k), len(k[0][0]), len(k[0][0][0])
    oh = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    ow = (w + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    out = [[[0.0] * ow for _ in range(oh)] for _ in range(cout)]
    for co, r, c in itertools.product(range(cout), range(oh), range(ow)):
        s = 0.0
        for ci, a, b in itertools.product(range(cin), range(kh), range(kw)):
            y = r * stride - pad + a * dilation
            xx = c * stride - pad + b * dilation
            if 0 <= y < h and 0 <= xx < w:
                s += x[ci][y][xx] * k[co][ci][a][b]
        out[co][r][c] = s
    return out


def conv_transpose2d(x, k, stride=2, pad=0):
    """Scatter-accumulate transposed convolution; k[ci][co][kr][kc]."""
    cin, h, w = len(x), len(x[0]), len(x[0][0])
    cout, kh, kw = len(k[0]), len(k[0][0]), len(k[0][0][0])
    fh, fw = (h - 1) * stride + kh, (w - 1) * stride + kw
    full = [[[0.0] * fw for _ in range(fh)] for _ in range(cout)]
    for ci, r, c in itertools.product(range(cin), range(h), range(w)):
        for co, a, b in itertools.product(range(cout), range(kh), range(kw)):
            full[co][r * stride + a][c * stride + b] += x[ci][r][c] * k[ci][co][a][b]
    return [[row[pad:fw - pad] for row in plane[pad:fh - pad]] for plane in full]


def prf(pred, gt):
    tp = sum(1 for p, g in zip(pred, gt) if p and g)
    npred = sum(1 for p in pred if p)
    ngt = sum(1 for g in gt if g)
    precision = tp / npred if npred else (1.0 if ngt == 0 else 0.0)
    recall = tp / ngt if ngt else 1.0
    return precision, recall


def fbeta(p, r, beta2=0.3):
    den = beta2 * p + r
    return 0.0 if den == 0 else (1 + beta2) * p * r / den
