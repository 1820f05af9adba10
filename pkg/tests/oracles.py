"""Independent brute-force oracles used to pin expected values.

Everything here is deliberately written as plain scalar loops or set
arithmetic so it shares no code path with the implementations it checks.
"""

import math

EPS = 1e-7


def bce_loop(probs, targets):
    h, w, c = probs.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            for k in range(c):
                p = min(max(float(probs[i, j, k]), EPS), 1.0 - EPS)
                t = float(targets[i, j, k])
                total += t * math.log(p) + (1.0 - t) * math.log(1.0 - p)
    return -total / (h * w * c)


def dcl_loop(embeddings, class_ids, tau):
    n = len(class_ids)
    sims = [[sum(float(a * b) for a, b in zip(embeddings[x], embeddings[y])) / tau for y in range(n)] for x in range(n)]
    total, counted = 0.0, 0
    for a in range(n):
        pos = [p for p in range(n) if p != a and class_ids[p] == class_ids[a]]
        if not pos:
            continue
        neg = [q for q in range(n) if class_ids[q] != class_ids[a]]
        counted += 1
        acc = 0.0
        for p in pos:
            denom = math.fsum([math.exp(sims[a][p])] + [math.exp(sims[a][q]) for q in neg])
            acc += -math.log(math.exp(sims[a][p]) / denom)
        total += acc / len(pos)
    return total / counted if counted else 0.0


def topk_plane_loop(plane, k):
    h, w = plane.shape
    cells = h * w
    m = math.ceil(k * cells / 100.0) if not float(k).is_integer() else -((-int(k) * cells) // 100)
    ranked = sorted(range(cells), key=lambda idx: (-float(plane.flat[idx]), idx))
    out = [[0] * w for _ in range(h)]
    for idx in ranked[:m]:
        out[idx // w][idx % w] = 1
    return out


def miou_sets(gt, pred, class_ids):
    out = {}
    for cid in class_ids:
        inter = 0
        union = 0
        for g, p in zip(gt.ravel().tolist(), pred.ravel().tolist()):
            a, b = g == cid, p == cid
            inter += a and b
            union += a or b
        if union:
            out[cid] = inter / union
    return out


def central_diff(fn, arr, h=1e-4):
    """Central finite differences of scalar fn over every entry of arr."""
    grad = arr * 0.0
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn()
        flat[i] = orig - h
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad
