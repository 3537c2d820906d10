# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: component labelling, surface distances, perplexity bisection."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, fabs, INFINITY

cnp.import_array()


def label_components(const unsigned char[:, :, ::1] mask):
    """26-connected labelling; labels are numbered 1..n in raster order of their first voxel.

    Returns ``(labels int32, sizes int64)`` with ``sizes[k - 1]`` the voxel count of label k.
    """
    cdef Py_ssize_t nz = mask.shape[0], ny = mask.shape[1], nx = mask.shape[2]
    cdef Py_ssize_t n = nz * ny * nx
    labels_arr = np.zeros((nz, ny, nx), dtype=np.int32)
    cdef int[:, :, ::1] labels = labels_arr
    stack_arr = np.empty(max(n, 1), dtype=np.intp)
    cdef Py_ssize_t[::1] stack = stack_arr
    sizes = []
    cdef Py_ssize_t z, y, x, top, flat, cz, cy, cx, qz, qy, qx
    cdef int dz, dy, dx
    cdef int current = 0
    cdef long count
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if mask[z, y, x] == 0 or labels[z, y, x] != 0:
                    continue
                current += 1
                count = 0
                labels[z, y, x] = current
                stack[0] = (z * ny + y) * nx + x
                top = 1
                while top > 0:
                    top -= 1
                    flat = stack[top]
                    cx = flat % nx
                    cy = (flat // nx) % ny
                    cz = flat // (nx * ny)
                    count += 1
                    for dz in range(-1, 2):
                        qz = cz + dz
                        if qz < 0 or qz >= nz:
                            continue
                        for dy in range(-1, 2):
                            qy = cy + dy
                            if qy < 0 or qy >= ny:
                                continue
                            for dx in range(-1, 2):
                                qx = cx + dx
                                if qx < 0 or qx >= nx:
                                    continue
                                if mask[qz, qy, qx] != 0 and labels[qz, qy, qx] == 0:
                                    labels[qz, qy, qx] = current
                                    stack[top] = (qz * ny + qy) * nx + qx
                                    top += 1
                sizes.append(count)
    return labels_arr, np.asarray(sizes, dtype=np.int64)


def nearest_distances(const double[:, ::1] a, const double[:, ::1] b):
    """For each row of ``a``, the Euclidean distance to the closest row of ``b`` (brute force)."""
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0], dim = a.shape[1], i, j, k
    if nb == 0:
        raise ValueError("reference point set is empty")
    if na and b.shape[1] != dim:
        raise ValueError(f"dimension mismatch: {dim} vs {b.shape[1]}")
    out_arr = np.empty(na, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double best, d, t
    for i in range(na):
        best = INFINITY
        for j in range(nb):
            d = 0.0
            for k in range(dim):
                t = a[i, k] - b[j, k]
                d += t * t
                if d >= best:  # partial sums only grow
                    break
            if d < best:
                best = d
        out[i] = sqrt(best)
    return out_arr


def perplexity_bisection(const double[:, ::1] sqdist, double perplexity, double tol=1e-5,
                         int max_iter=200):
    """Row-wise Gaussian bandwidth search.

    Finds ``beta_i`` so the conditional distribution
    ``p_j|i ∝ exp(-beta_i * sqdist[i, j])`` (j != i) has entropy ``log2(perplexity)``
    bits within ``tol``. Returns ``(P, beta, entropy_bits)``.
    """
    cdef Py_ssize_t n = sqdist.shape[0], i, j
    cdef int it
    cdef double target = log(perplexity), tol_nats = tol * log(2.0)
    P_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] P = P_arr
    beta_arr = np.ones(n, dtype=np.float64)
    cdef double[::1] beta = beta_arr
    ent_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] ent = ent_arr
    cdef double b, lo, hi, dmin, s, sd, h, e
    for i in range(n):
        dmin = INFINITY
        for j in range(n):
            if j != i and sqdist[i, j] < dmin:
                dmin = sqdist[i, j]
        b = 1.0
        lo = -INFINITY
        hi = INFINITY
        for it in range(max_iter):
            s = 0.0
            sd = 0.0
            for j in range(n):
                if j == i:
                    continue
                e = exp(-b * (sqdist[i, j] - dmin))
                s += e
                sd += e * (sqdist[i, j] - dmin)
            h = log(s) + b * sd / s
            if fabs(h - target) <= tol_nats:
                break
            if h > target:
                lo = b
                b = b * 2.0 if hi == INFINITY else 0.5 * (b + hi)
            else:
                hi = b
                b = b * 0.5 if lo == -INFINITY else 0.5 * (b + lo)
        s = 0.0
        for j in range(n):
            if j == i:
                continue
            e = exp(-b * (sqdist[i, j] - dmin))
            P[i, j] = e
            s += e
        sd = 0.0
        for j in range(n):
            if j != i:
                P[i, j] /= s
                sd += P[i, j] * (sqdist[i, j] - dmin)
        beta[i] = b
        ent[i] = (log(s) + b * sd) / log(2.0)
    return P_arr, beta_arr, ent_arr
