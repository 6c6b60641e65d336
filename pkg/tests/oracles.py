"""Slow, obviously-correct reference implementations used by the tests."""
import math

import numpy as np


def naive_distance(q, p, metric):
    if metric == "cosine":
        dot = sum(float(a) * float(b) for a, b in zip(q, p))
        nq = math.sqrt(sum(float(a) ** 2 for a in q))
        np_ = math.sqrt(sum(float(b) ** 2 for b in p))
        return 1.0 - dot / (nq * np_)
    return math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(q, p)))


def naive_topk(q, pool, k, metric):
    scored = [(naive_distance(q, p, metric), i) for i, p in enumerate(pool)]
    scored.sort()
    return [(i, d) for d, i in scored[:k]]


def naive_knn(source, pool, k, metric):
    """Double loop over source and pool frames; mean accumulated nearest-first."""
    pool = np.asarray(pool, dtype=np.float64)
    out = np.empty((len(source), pool.shape[1]))
    for t, q in enumerate(np.asarray(source, dtype=np.float64)):
        nn = naive_topk(q, pool, k, metric)
        acc = pool[nn[0][0]].copy()
        for i, _ in nn[1:]:
            acc += pool[i]
        out[t] = acc / k
    return out


def min_gap(source, pool, metric):
    """Smallest gap between any two pool distances for any source frame."""
    gap = np.inf
    for q in np.asarray(source, dtype=np.float64):
        d = np.sort([naive_distance(q, p, metric) for p in pool])
        if len(d) > 1:
            gap = min(gap, float(np.diff(d).min()))
    return gap


def levenshtein(ref, hyp):
    """Plain edit-distance table, no traceback."""
    prev = list(range(len(hyp) + 1))
    for i in range(1, len(ref) + 1):
        cur = [i] + [0] * len(hyp)
        for j in range(1, len(hyp) + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ref[i - 1] != hyp[j - 1]))
        prev = cur
    return prev[-1]


def brute_eer(genuine, impostor):
    """Sweep thresholds on a fine grid and return the minimum max(FAR, FRR)."""
    genuine = np.asarray(genuine, float)
    impostor = np.asarray(impostor, float)
    best = 1.0
    for t in np.unique(np.concatenate([genuine, impostor])):
        far = (impostor > t).mean()
        frr = (genuine < t).mean()
        best = min(best, max(far, frr))
    return best


def scalar_forward(params, x, emb, hidden_dims, num_heads, slope=0.01, eps=1e-5):
    """Per-element loops through the MLP and the attention heads."""
    z = [float(v) for v in x]
    for i, width in enumerate(hidden_dims):
        w, b = params[f"mlp{i}.weight"], params[f"mlp{i}.bias"]
        h = []
        for r in range(width):
            s = float(b[r])
            for c in range(len(z)):
                s += float(w[r, c]) * z[c]
            h.append(s if s > 0 else slope * s)
        mean = sum(h) / width
        var = sum((v - mean) ** 2 for v in h) / width
        g, beta = params[f"mlp{i}.ln_gain"], params[f"mlp{i}.ln_bias"]
        z = [(v - mean) / math.sqrt(var + eps) * float(g[r]) + float(beta[r]) for r, v in enumerate(h)]

    def project(vec, wname, bname):
        w, b = params[wname], params[bname]
        return [float(b[r]) + sum(float(w[r, c]) * vec[c] for c in range(len(vec))) for r in range(len(b))]

    q = project(z, "attn.query_weight", "attn.query_bias")
    keys = [project([float(v) for v in e], "attn.key_weight", "attn.key_bias") for e in emb]
    dh = len(q) // num_heads
    probs = [0.0] * len(keys)
    for h in range(num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = [sum(a * b for a, b in zip(q[sl], k[sl])) / math.sqrt(dh) for k in keys]
        top = max(logits)
        ex = [math.exp(v - top) for v in logits]
        tot = sum(ex)
        for m, e in enumerate(ex):
            probs[m] += e / tot / num_heads
    return probs
