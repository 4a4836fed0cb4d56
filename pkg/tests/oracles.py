"""Independent reference computations used by the tests.

Each oracle is written from the defining formula with plain loops or dense
linear algebra and shares no code with the package.
"""

from __future__ import annotations

import math

import numpy as np


def entropy(probs) -> float:
    total = 0.0
    for p in probs:
        if p > 0:
            total -= p * math.log(p)
    return total


def timeliness(age: float, window: float, recent_first: bool = True) -> float:
    x = age / window
    return 1.0 / (1.0 + math.exp(x if recent_first else -x))


def topk_by_hand(qualities, seqs, keep_fraction: float) -> list[int]:
    """Indices kept: ceil(k n) by exact decimal arithmetic, sort by (q, seq) desc."""
    from decimal import Decimal
    n = len(qualities)
    k = int((Decimal(repr(keep_fraction)) * n).to_integral_value(rounding="ROUND_CEILING"))
    k = min(max(k, 1), n)
    order = list(range(n))
    # insertion sort, descending by (quality, seq)
    for i in range(1, n):
        j = i
        while j > 0 and (qualities[order[j]], seqs[order[j]]) > \
                (qualities[order[j - 1]], seqs[order[j - 1]]):
            order[j], order[j - 1] = order[j - 1], order[j]
            j -= 1
    return order[:k]


def urgency(records, n: int, m: int, tm: float | None = None) -> float:
    """d from a list of 0/1 records, oldest first; 0 when fewer than n."""
    if len(records) < n:
        return 0.0
    tm = m if tm is None else tm
    recs = records[-n:]
    l = n // m
    wa = []
    for i in range(m):
        s = 0
        for j in range(i * l, (i + 1) * l):
            s += recs[j]
        wa.append(s)
    d = 0.0
    for i in range(m):
        d += (wa[0] - wa[i]) * (m / (1.0 + math.exp(-i / tm)))
    return d


def gp_posterior(X, y, Q, lengthscale, variance, noise, mean_const=0.0):
    """Dense GP posterior with an explicit inverse (squared-exponential kernel)."""
    X, Q = np.atleast_2d(X), np.atleast_2d(Q)
    y = np.asarray(y, dtype=float)

    def k(a, b):
        out = np.empty((len(a), len(b)))
        for i in range(len(a)):
            for j in range(len(b)):
                d2 = float(np.sum((a[i] - b[j]) ** 2))
                out[i, j] = variance * math.exp(-0.5 * d2 / lengthscale ** 2)
        return out

    K = k(X, X) + noise * np.eye(len(X))
    Kinv = np.linalg.inv(K)
    Ks = k(Q, X)
    mean = mean_const + Ks @ Kinv @ (y - mean_const)
    var = variance - np.einsum("ij,jk,ik->i", Ks, Kinv, Ks)
    return mean, np.maximum(var, 0.0)


def expected_improvement(mu: float, var: float, best: float) -> float:
    sigma = math.sqrt(max(var, 0.0))
    if sigma == 0.0:
        return max(mu - best, 0.0)
    z = (mu - best) / sigma
    pdf = math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    cdf = 0.5 * (1 + math.erf(z / math.sqrt(2)))
    return (mu - best) * cdf + sigma * pdf


def softmax_loss(W, H, y, wd):
    """Mean cross-entropy of logits [H, 1] W^T plus wd/2 ||W[:, :-1]||^2."""
    Z = np.hstack([H, np.ones((len(H), 1))]) @ W.T
    total = 0.0
    for i in range(len(y)):
        z = Z[i] - Z[i].max()
        total += -(z[y[i]] - math.log(np.exp(z).sum()))
    return total / len(y) + 0.5 * wd * float(np.sum(W[:, :-1] ** 2))


def central_difference(f, W, h=1e-6):
    g = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        g[idx] = (f(Wp) - f(Wm)) / (2 * h)
    return g
