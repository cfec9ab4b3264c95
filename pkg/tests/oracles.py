"""Literal loop implementations used as independent references in the tests.

Nothing here imports the package's numerical code: plain Python loops over
nested lists and the math module only.
"""

import math


def matmul(a, b):
    m, k, n = len(a), len(b), len(b[0])
    assert all(len(row) == k for row in a)
    return [[sum(a[i][p] * b[p][j] for p in range(k)) for j in range(n)] for i in range(m)]


def centers(features, labels, num_classes, ignore=255):
    """features: list of pixels (each a list of C floats); labels: flat list."""
    c = len(features[0])
    sums = [[0.0] * c for _ in range(num_classes)]
    counts = [0] * num_classes
    for x, lab in zip(features, labels):
        if lab == ignore:
            continue
        counts[lab] += 1
        for j in range(c):
            sums[lab][j] += x[j]
    mu = [[s / counts[k] if counts[k] else 0.0 for s in sums[k]] for k in range(num_classes)]
    return mu, counts


def intra_c2p(features, labels, mu, ignore=255):
    total, n = 0.0, 0
    for x, lab in zip(features, labels):
        if lab == ignore:
            continue
        n += 1
        for j in range(len(x)):
            total += abs(mu[lab][j] - x[j]) ** 2
    return total / (n * len(features[0])) if n else 0.0


def _softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def _dot(u, v):
    return sum(p * q for p, q in zip(u, v))


def inter_c2c(mu, counts, eps0):
    present = [k for k in range(len(mu)) if counts[k] > 0]
    n = len(present)
    if n < 2:
        return 0.0
    c = len(mu[0])
    margin = eps0 / (n - 1)
    sums = []
    for i in present:
        a = _softmax([_dot(mu[i], mu[j]) / math.sqrt(c) for j in present])
        s = 0.0
        for col, j in enumerate(present):
            d = 0.0 if j == i else a[col]
            s += max(d - margin, 0.0)
        sums.append(s)
    return sum(s * s for s in sums) / n


def inter_c2p(features, labels, mu, counts, eps1, replacement="masked", ignore=255):
    present = [k for k in range(len(mu)) if counts[k] > 0]
    n = len(present)
    valid = [(x, lab) for x, lab in zip(features, labels) if lab != ignore]
    if n < 2 or not valid:
        return 0.0
    margin = eps1 / (n - 1)
    total = 0.0
    for x, lab in valid:
        logits = []
        for k in present:
            self_dot = _dot(mu[k], mu[k])
            if replacement == "masked":
                logits.append(self_dot if k == lab else _dot(x, mu[k]))
            else:
                logits.append((0.0 if k == lab else _dot(x, mu[k])) + self_dot)
        a = _softmax(logits)
        s = 0.0
        for col, k in enumerate(present):
            d = 0.0 if k == lab else a[col]
            s += max(d - margin, 0.0)
        total += s * s
    return total / len(valid)


def cross_entropy(logits, labels, ignore=255):
    total, n = 0.0, 0
    for z, lab in zip(logits, labels):
        if lab == ignore:
            continue
        m = max(z)
        lse = m + math.log(sum(math.exp(v - m) for v in z))
        total += lse - z[lab]
        n += 1
    return total / n


def conv2d_same(x, w, b):
    """x: [H][W][Cin], w: [k][k][Cin][Cout], b: [Cout]; stride 1, zero padding."""
    h, wd, cin = len(x), len(x[0]), len(x[0][0])
    k, cout = len(w), len(w[0][0][0])
    p = k // 2
    out = [[[0.0] * cout for _ in range(wd)] for _ in range(h)]
    for i in range(h):
        for j in range(wd):
            for o in range(cout):
                acc = b[o]
                for dy in range(k):
                    for dx in range(k):
                        y, xx = i + dy - p, j + dx - p
                        if 0 <= y < h and 0 <= xx < wd:
                            for c in range(cin):
                                acc += x[y][xx][c] * w[dy][dx][c][o]
                out[i][j][o] = acc
    return out


def relu3(x):
    return [[[max(v, 0.0) for v in px] for px in row] for row in x]


def confusion(pred, gt, num_classes, ignore=255):
    cm = [[0] * num_classes for _ in range(num_classes)]
    for p, g in zip(pred, gt):
        if g == ignore:
            continue
        cm[g][p] += 1
    return cm


def miou(cm):
    n = len(cm)
    ious = []
    for k in range(n):
        tp = cm[k][k]
        fn = sum(cm[k]) - tp
        fp = sum(cm[r][k] for r in range(n)) - tp
        if sum(cm[k]) == 0:
            continue
        ious.append(tp / (tp + fp + fn))
    return sum(ious) / len(ious)


def cosine(u, v):
    nu = math.sqrt(_dot(u, u))
    nv = math.sqrt(_dot(v, v))
    if nu == 0 or nv == 0:
        return 0.0
    return _dot(u, v) / (nu * nv)
