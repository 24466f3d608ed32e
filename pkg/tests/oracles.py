"""Straight-line reference implementations used only by the tests."""

import math


def brute_first_neighbors(points):
    n = len(points)
    out = []
    for i in range(n):
        best_j, best = None, -math.inf
        for j in range(n):
            if j == i:
                continue
            dot = sum(a * b for a, b in zip(points[i], points[j]))
            ni = math.sqrt(sum(a * a for a in points[i]))
            nj = math.sqrt(sum(b * b for b in points[j]))
            s = dot / (ni * nj)
            if s > best:
                best, best_j = s, j
        out.append(best_j)
    return out


class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def brute_link_partition(points):
    """Components of the graph with i~j iff k(i)=j, k(j)=i or k(i)=k(j)."""
    kappa = brute_first_neighbors(points)
    n = len(points)
    uf = UnionFind(n)
    for i in range(n):
        for j in range(n):
            if kappa[i] == j or kappa[j] == i or kappa[i] == kappa[j]:
                uf.union(i, j)
    return [uf.find(i) for i in range(n)]


def same_partition(a, b):
    """Label arrays describe the same partition up to renaming."""
    if len(a) != len(b):
        return False
    fwd, bwd = {}, {}
    for x, y in zip(a, b):
        x, y = int(x), int(y)
        if fwd.setdefault(x, y) != y or bwd.setdefault(y, x) != x:
            return False
    return True


def is_coarsening(fine, coarse):
    mapping = {}
    for f, c in zip(fine, coarse):
        if mapping.setdefault(int(f), int(c)) != int(c):
            return False
    return True


def loop_head_forward(w1, b1, w2, b2, w3, b3, x):
    hidden = [max(0.0, sum(w1[h][i] * x[i] for i in range(len(x))) + b1[h]) for h in range(len(b1))]
    z = [sum(w2[e][h] * hidden[h] for h in range(len(hidden))) + b2[e] for e in range(len(b2))]
    logits = [sum(w3[k][e] * z[e] for e in range(len(z))) + b3[k] for k in range(len(b3))]
    return z, logits


def oracle_hinge_terms(z, zp, labels, alpha):
    """Per-sample triplet hinge terms, mean over negatives, as plain loops."""
    terms = []
    for i in range(len(z)):
        negs = [j for j in range(len(z)) if labels[j] != labels[i]]
        if not negs:
            terms.append(0.0)
            continue
        pos = sum((a - b) ** 2 for a, b in zip(z[i], zp[i]))
        neg = sum(sum((a - b) ** 2 for a, b in zip(z[i], zp[j])) for j in negs) / len(negs)
        terms.append(max(0.0, pos - neg + alpha))
    return terms
