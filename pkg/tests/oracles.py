"""Slow, obviously-correct reference computations used as test oracles."""
import itertools
import math

import numpy as np


def pairwise_auc(scores, truths):
    """P(s_pos > s_neg) + 0.5 * P(s_pos == s_neg) over all pos/neg pairs."""
    s = np.asarray(scores, dtype=float)
    t = np.asarray(truths, dtype=bool)
    pos, neg = s[t], s[~t]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def brute_roc(scores, truths):
    """(fpr, tpr) at +inf then at every distinct score, highest first."""
    s = np.asarray(scores, dtype=float)
    t = np.asarray(truths, dtype=bool)
    pts = [(0.0, 0.0)]
    for th in sorted(set(s.tolist()), reverse=True):
        hit = s >= th
        pts.append(((hit & ~t).sum() / (~t).sum(), (hit & t).sum() / t.sum()))
    return pts


def anova_f(groups):
    allv = [v for g in groups for v in g]
    grand = sum(allv) / len(allv)
    ssb = sum(len(g) * (sum(g) / len(g) - grand) ** 2 for g in groups)
    ssw = sum((v - sum(g) / len(g)) ** 2 for g in groups for v in g)
    return (ssb / (len(groups) - 1)) / (ssw / (len(allv) - len(groups)))


def signed_rank_p(diffs):
    """Two-sided exact Wilcoxon p, enumerating sign vectors with itertools.product."""
    d = [x for x in diffs if x != 0]
    a = sorted(abs(x) for x in d)
    rank = {}
    for v in set(a):
        idx = [i + 1 for i, u in enumerate(a) if u == v]
        rank[v] = sum(idx) / len(idx)
    r = [rank[abs(x)] for x in d]
    wp = sum(ri for ri, x in zip(r, d) if x > 0)
    w = min(wp, sum(r) - wp)
    hits = total = 0
    for signs in itertools.product((0, 1), repeat=len(r)):
        total += 1
        hits += sum(ri for ri, s in zip(r, signs) if s) <= w + 1e-9
    return min(1.0, 2 * hits / total)


def qr_lstsq(y, X):
    """Least squares via Householder QR, independent of the normal equations."""
    q, rr = np.linalg.qr(X)
    return np.linalg.solve(rr, q.T @ y)


def student_t_two_sided(t, df):
    """Two-sided t p-value by Simpson integration of the density."""
    if t == 0:
        return 1.0
    t = abs(t)
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    n = 20000
    h = t / n
    acc = 0.0
    for i in range(n + 1):
        x = i * h
        w = 1 if i in (0, n) else 4 if i % 2 else 2
        acc += w * c * (1 + x * x / df) ** (-(df + 1) / 2)
    return 1.0 - 2 * acc * h / 3
