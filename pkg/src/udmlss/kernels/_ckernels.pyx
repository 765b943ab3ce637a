# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the routines in ``_pykernels``.

Accumulation order matches the numpy versions exactly.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col3x3(real[:, :, :, ::1] xp, Py_ssize_t stride, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t b, ch, oh, ow, ki, kj, col
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, out_h, out_w, c * 9), dtype=dtype)
    cdef real[:, :, :, ::1] cols = out
    with nogil:
        for b in range(n):
            for oh in range(out_h):
                for ow in range(out_w):
                    col = 0
                    for ch in range(c):
                        for ki in range(3):
                            for kj in range(3):
                                cols[b, oh, ow, col] = xp[b, ch, oh * stride + ki, ow * stride + kj]
                                col += 1
    return out


def col2im3x3(real[:, :, :, ::1] dcols, Py_ssize_t c, Py_ssize_t hp, Py_ssize_t wp, Py_ssize_t stride):
    cdef Py_ssize_t n = dcols.shape[0], out_h = dcols.shape[1], out_w = dcols.shape[2]
    cdef Py_ssize_t b, ch, oh, ow, ki, kj
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    with nogil:
        for ki in range(3):
            for kj in range(3):
                for b in range(n):
                    for ch in range(c):
                        for oh in range(out_h):
                            for ow in range(out_w):
                                dx[b, ch, oh * stride + ki, ow * stride + kj] += dcols[b, oh, ow, ch * 9 + ki * 3 + kj]
    return out


def sq_distances(double[:, ::1] points, double[:, ::1] centroids):
    cdef Py_ssize_t n = points.shape[0], d = points.shape[1], k = centroids.shape[0]
    cdef Py_ssize_t i, j, m
    cdef double diff, acc
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] dist = out
    with nogil:
        for i in range(n):
            for m in range(k):
                acc = 0.0
                for j in range(d):
                    diff = points[i, j] - centroids[m, j]
                    acc = acc + diff * diff
                dist[i, m] = acc
    return out


def assign_nearest(double[:, ::1] points, double[:, ::1] centroids):
    cdef Py_ssize_t n = points.shape[0], k = centroids.shape[0]
    cdef Py_ssize_t i, m, best
    cdef double bestd
    cdef double[:, ::1] dist = sq_distances(points, centroids)
    labels_arr = np.empty(n, dtype=np.int64)
    mind_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] labels = labels_arr
    cdef double[::1] mind = mind_arr
    with nogil:
        for i in range(n):
            best = 0
            bestd = dist[i, 0]
            for m in range(1, k):
                if dist[i, m] < bestd:
                    bestd = dist[i, m]
                    best = m
            labels[i] = best
            mind[i] = bestd
    return labels_arr, mind_arr


def mine_masks(double[:, ::1] S, cnp.int64_t[::1] labels, double eps):
    cdef Py_ssize_t n = S.shape[0]
    cdef Py_ssize_t i, j
    cdef double min_pos, max_neg, pos_thr, neg_thr
    cdef bint any_pos, any_neg
    pos_arr = np.zeros((n, n), dtype=bool)
    neg_arr = np.zeros((n, n), dtype=bool)
    cdef cnp.npy_bool[:, ::1] pos = pos_arr
    cdef cnp.npy_bool[:, ::1] neg = neg_arr
    with nogil:
        for i in range(n):
            min_pos = INFINITY
            max_neg = -INFINITY
            any_pos = False
            any_neg = False
            for j in range(n):
                if j == i:
                    continue
                if labels[j] == labels[i]:
                    any_pos = True
                    if S[i, j] < min_pos:
                        min_pos = S[i, j]
                else:
                    any_neg = True
                    if S[i, j] > max_neg:
                        max_neg = S[i, j]
            if not (any_pos and any_neg):
                continue
            pos_thr = max_neg + eps
            neg_thr = min_pos - eps
            for j in range(n):
                if j == i:
                    continue
                if labels[j] == labels[i]:
                    if S[i, j] < pos_thr:
                        pos[i, j] = True
                elif S[i, j] > neg_thr:
                    neg[i, j] = True
    return pos_arr, neg_arr
