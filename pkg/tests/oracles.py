"""Independent reference implementations used by the tests.

Plain loops over Python lists; nothing here imports the package.
"""

import math


def row_norm(row):
    return math.sqrt(sum(v * v for v in row))


def brute_force_neighbors(W, m, k):
    """For each A row, the k B rows closest in unit-normalised space, ties to the lower index."""
    unit = [[v / row_norm(r) for v in r] for r in [list(map(float, row)) for row in W]]
    out = []
    for j in range(m, len(unit)):
        pairs = []
        for i in range(m):
            dist = math.sqrt(sum((a - b) ** 2 for a, b in zip(unit[j], unit[i])))
            pairs.append((dist, i))
        pairs.sort()
        out.append([i for _, i in pairs[:k]])
    return out


def literal_transfer(Wc, bc, dW, db, m, k, adapt_bias=True):
    """W_j + (1/k) * sum of the deltas of the k nearest B rows, written out term by term."""
    neighbors = brute_force_neighbors(Wc, m, k)
    W = [list(map(float, row)) for row in Wc]
    b = [float(v) for v in bc]
    for i in range(m):
        for c in range(len(W[i])):
            W[i][c] = W[i][c] + float(dW[i][c])
        b[i] = b[i] + float(db[i])
    for r, j in enumerate(range(m, len(W))):
        for c in range(len(W[j])):
            total = 0.0
            for i in neighbors[r]:
                total += float(dW[i][c])
            W[j][c] = W[j][c] + total / k
        if adapt_bias:
            total = 0.0
            for i in neighbors[r]:
                total += float(db[i])
            b[j] = b[j] + total / k
    return W, b
