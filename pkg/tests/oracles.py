"""Independent brute-force references shared by the unit and acceptance tests."""

import math

import numpy as np


def scalar_bilinear(src, out_t, out_f):
    """Pointwise bilinear sample on the half-pixel grid, one output cell at a time."""
    n_t, n_f = len(src), len(src[0])
    out = [[0.0] * out_f for _ in range(out_t)]

    def coord(i, n_in, n_out):
        c = (i + 0.5) * n_in / n_out - 0.5
        c = min(max(c, 0.0), n_in - 1)
        lo = int(math.floor(c))
        return lo, min(lo + 1, n_in - 1), c - lo

    for i in range(out_t):
        t0, t1, a = coord(i, n_t, out_t)
        for j in range(out_f):
            f0, f1, b = coord(j, n_f, out_f)
            out[i][j] = ((1 - a) * (1 - b) * src[t0][f0] + (1 - a) * b * src[t0][f1]
                         + a * (1 - b) * src[t1][f0] + a * b * src[t1][f1])
    return np.array(out)


def oracle_negative(dist, labels, a, p):
    """Scan negatives in index order: farthest strictly closer than the positive, else the nearest."""
    d_ap = dist[a][p]
    best_closer, best_any = None, None
    for n in range(len(labels)):
        if labels[n] == labels[a]:
            continue
        d = dist[a][n]
        if d < d_ap and (best_closer is None or d > dist[a][best_closer]):
            best_closer = n
        if best_any is None or d < dist[a][best_any]:
            best_any = n
    return best_closer if best_closer is not None else best_any


def oracle_loss(emb, labels, margin):
    emb = [np.asarray(e, dtype=np.float64) for e in emb]
    n = len(emb)
    dist = [[float(np.sum((emb[i] - emb[j]) ** 2)) for j in range(n)] for i in range(n)]
    total, count = 0.0, 0
    for a in range(n):
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            neg = oracle_negative(dist, labels, a, p)
            total += max(0.0, dist[a][p] + margin - dist[a][neg])
            count += 1
    return total / count


def random_unit(rng, n, e):
    v = rng.standard_normal((n, e))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def pair_auc(cov, non):
    """Probability that a cover pair is closer than a non-cover pair, ties counting half."""
    wins = sum(1.0 if c < n else 0.5 if c == n else 0.0 for c in cov for n in non)
    return wins / (len(cov) * len(non))


def brute_ap(flags):
    hits, total = 0, 0.0
    for r, f in enumerate(flags, start=1):
        if f:
            hits += 1
            total += hits / r
    return total / hits
