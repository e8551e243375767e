"""Independent reference implementations used as test oracles.

Nothing here imports the package; each function is a direct loop-level
transcription of the quantity it checks.
"""

import math

import numpy as np


def central_diff_grad(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def relative_error(analytic, numeric):
    """Max-norm relative error between two gradient arrays."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def nt_xent_loop(z1, z2, tau):
    """Per-anchor NT-Xent over the 2N concatenated views, averaged."""
    views = list(z1) + list(z2)
    n = len(z1)
    total = 0.0
    for a in range(2 * n):
        pos = a + n if a < n else a - n
        num = math.exp(cos(views[a], views[pos]) / tau)
        den = sum(math.exp(cos(views[a], views[j]) / tau) for j in range(2 * n) if j != a)
        total += -math.log(num / den)
    return total / (2 * n)


def softmax_rows_loop(za, zb, tau):
    n = len(za)
    out = np.zeros((n, n))
    for i in range(n):
        s = [cos(za[i], zb[j]) / tau for j in range(n)]
        m = max(s)
        e = [math.exp(v - m) for v in s]
        tot = sum(e)
        out[i] = [v / tot for v in e]
    return out


def kl_rows_loop(p_self, q_peer):
    """Mean over rows of sum_j q log(q / p)."""
    return float(np.mean([sum(q * math.log(q / p) for p, q in zip(pr, qr)) for pr, qr in zip(p_self, q_peer)]))


def knn_bruteforce(train_x, train_y, test_x, ks, n_classes):
    """Exhaustive k-NN for each k in ``ks``: rank by cosine (ties -> lower index),
    majority vote, vote ties -> larger similarity sum -> lower class id.

    Returns {k: predictions}.
    """
    out = {k: [] for k in ks}
    for q in test_x:
        sims = [(cos(q, t), i) for i, t in enumerate(train_x)]
        sims.sort(key=lambda s: (-s[0], s[1]))
        for k in ks:
            votes = [0] * n_classes
            ssum = [0.0] * n_classes
            for s, i in sims[:k]:
                votes[train_y[i]] += 1
                ssum[train_y[i]] += s
            best = None
            for c in range(n_classes):
                if votes[c] == 0:
                    continue
                key = (votes[c], ssum[c])
                if best is None or key > best[0]:
                    best = (key, c)
            out[k].append(best[1])
    return {k: np.array(v) for k, v in out.items()}
