"""Reference implementations written as plain loops over Python floats.

They share no code with the package beyond what the caller passes in.
"""
import math


def ms_loss(S, pos, neg, alpha, beta, lam):
    n = len(S)
    total = math.fsum(
        math.log(1 + math.fsum(math.exp(-alpha * (S[i][l] - lam)) for l in range(n) if pos[i][l])) / alpha
        + math.log(1 + math.fsum(math.exp(beta * (S[i][l] - lam)) for l in range(n) if neg[i][l])) / beta
        for i in range(n)
    )
    return total


def mine(S, y, eps):
    n = len(S)
    pos = [[False] * n for _ in range(n)]
    neg = [[False] * n for _ in range(n)]
    for i in range(n):
        same = [S[i][h] for h in range(n) if h != i and y[h] == y[i]]
        diff = [S[i][h] for h in range(n) if y[h] != y[i]]
        if not same or not diff:
            continue
        lo, hi = min(same), max(diff)
        for j in range(n):
            if j == i:
                continue
            if y[j] == y[i] and S[i][j] < hi + eps:
                pos[i][j] = True
            if y[j] != y[i] and S[i][j] > lo - eps:
                neg[i][j] = True
    return pos, neg


def rotation_loss(logits, z):
    m = len(logits) // 4
    total = 0.0
    for row, t in zip(logits, z):
        mx = max(row)
        lse = mx + math.log(sum(math.exp(v - mx) for v in row))
        total += lse - row[t]
    return total / m


def contrastive(S, pos, neg, margin):
    n = len(S)
    return math.fsum((1 - S[i][j]) if pos[i][j] else max(0.0, S[i][j] - margin) if neg[i][j] else 0.0
                     for i in range(n) for j in range(n))


def triplet(S, pos, neg, margin):
    n = len(S)
    return math.fsum(max(0.0, S[i][q] - S[i][p] + margin)
                     for i in range(n) for p in range(n) for q in range(n) if pos[i][p] and neg[i][q])


def lifted(S, pos, neg, margin):
    n = len(S)
    total = []
    for i in range(n):
        negs = [margin - (1 - S[i][q]) for q in range(n) if neg[i][q]]
        if not negs:
            continue
        lse = math.log(math.fsum(math.exp(v) for v in negs))
        for p in range(n):
            if pos[i][p]:
                total.append(max(0.0, lse + 1 - S[i][p]) ** 2)
    return math.fsum(total)


def lloyd(points, init, max_iter=100, tol=1e-6):
    """Lloyd iterations with farthest-point repair of empty clusters."""
    pts = [list(map(float, p)) for p in points]
    cents = [list(map(float, c)) for c in init]
    k, d = len(cents), len(pts[0])

    def d2(a, b):
        s = 0.0
        for t in range(d):
            s += (a[t] - b[t]) ** 2
        return s

    labels = [0] * len(pts)
    for _ in range(max_iter):
        dist = []
        for i, p in enumerate(pts):
            best, bd = 0, d2(p, cents[0])
            for c in range(1, k):
                dc = d2(p, cents[c])
                if dc < bd:
                    best, bd = c, dc
            labels[i] = best
            dist.append(bd)
        for c in range(k):
            counts = [labels.count(m) for m in range(k)]
            if counts[c] == 0:
                cand = [i for i in range(len(pts)) if counts[labels[i]] > 1]
                j = max(cand, key=lambda i: (dist[i], -i))
                labels[j] = c
                cents[c] = list(pts[j])
                dist[j] = 0.0
        new = []
        for c in range(k):
            mem = [pts[i] for i in range(len(pts)) if labels[i] == c]
            new.append([sum(m[t] for m in mem) / len(mem) for t in range(d)])
        shift = max(math.sqrt(d2(a, b)) for a, b in zip(new, cents))
        cents = new
        if shift < tol:
            break
    inertia = sum(d2(p, cents[labels[i]]) for i, p in enumerate(pts))
    return labels, cents, inertia


def ranking(sims_row, exclude=None):
    idx = [j for j in range(len(sims_row)) if j != exclude]
    return sorted(idx, key=lambda j: (-sims_row[j], j))


def recall_at_k(emb, labels, ks):
    n = len(emb)
    sims = [[sum(a * b for a, b in zip(emb[i], emb[j])) for j in range(n)] for i in range(n)]
    out = {}
    for k in ks:
        hits = 0
        for i in range(n):
            top = ranking(sims[i], exclude=i)[:k]
            hits += any(labels[j] == labels[i] for j in top)
        out[k] = hits / n
    return out


def nmi(a, b):
    n = len(a)
    ca, cb, joint = {}, {}, {}
    for x, y in zip(a, b):
        ca[x] = ca.get(x, 0) + 1
        cb[y] = cb.get(y, 0) + 1
        joint[(x, y)] = joint.get((x, y), 0) + 1
    ha = -sum(c / n * math.log(c / n) for c in ca.values())
    hb = -sum(c / n * math.log(c / n) for c in cb.values())
    if ha == 0 and hb == 0:
        return 1.0
    if ha == 0 or hb == 0:
        return 0.0
    mi = sum(c / n * math.log((c / n) / ((ca[x] / n) * (cb[y] / n))) for (x, y), c in joint.items())
    return mi / ((ha + hb) / 2)
