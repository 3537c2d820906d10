"""Pure-Python/numpy fallbacks with the same contracts as the compiled kernels."""
import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree


def label_components(mask):
    labels, n = ndimage.label(np.asarray(mask) != 0, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        return labels.astype(np.int32), np.zeros(0, dtype=np.int64)
    flat = labels.ravel()
    # renumber by first voxel in raster order so both backends agree
    uniq, first = np.unique(flat, return_index=True)
    keep = uniq > 0
    order = np.argsort(first[keep], kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[uniq[keep][order]] = np.arange(1, n + 1, dtype=np.int32)
    relabelled = remap[labels]
    sizes = np.bincount(relabelled.ravel(), minlength=n + 1)[1:].astype(np.int64)
    return relabelled, sizes


def nearest_distances(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(b) == 0:
        raise ValueError("reference point set is empty")
    if len(a) == 0:
        return np.zeros(0)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    dist, _ = cKDTree(b).query(a, k=1)
    return np.asarray(dist, dtype=np.float64)


def perplexity_bisection(sqdist, perplexity, tol=1e-5, max_iter=200):
    sqdist = np.asarray(sqdist, dtype=np.float64)
    n = len(sqdist)
    target = np.log(perplexity)
    tol_nats = tol * np.log(2.0)
    P = np.zeros((n, n))
    beta = np.ones(n)
    ent = np.zeros(n)
    for i in range(n):
        d = np.delete(sqdist[i], i)
        d = d - d.min()
        b, lo, hi = 1.0, -np.inf, np.inf
        for _ in range(max_iter):
            e = np.exp(-b * d)
            s = e.sum()
            h = np.log(s) + b * np.dot(e, d) / s
            if abs(h - target) <= tol_nats:
                break
            if h > target:
                lo = b
                b = b * 2.0 if hi == np.inf else 0.5 * (b + hi)
            else:
                hi = b
                b = b * 0.5 if lo == -np.inf else 0.5 * (b + lo)
        e = np.exp(-b * d)
        s = e.sum()
        p = e / s
        P[i, np.arange(n) != i] = p
        beta[i] = b
        ent[i] = (np.log(s) + b * np.dot(p, d)) / np.log(2.0)
    return P, beta, ent
