# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Results match ``_kernels_py`` bit for bit."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def window_stats(img):
    cdef cnp.float64_t[:, :, ::1] src = np.ascontiguousarray(img, dtype=np.float64)
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1], k = src.shape[2]
    mean_arr = np.empty((h, w, k), dtype=np.float64)
    std_arr = np.empty((h, w, k), dtype=np.float64)
    cdef cnp.float64_t[:, :, ::1] mean = mean_arr
    cdef cnp.float64_t[:, :, ::1] std = std_arr
    cdef Py_ssize_t y, x, c, yy, xx
    cdef int dy, dx
    cdef double total, count, m, dev, sq
    for y in range(h):
        for x in range(w):
            for c in range(k):
                total = 0.0
                count = 0.0
                for dy in range(-1, 2):
                    yy = y + dy
                    if yy < 0 or yy >= h:
                        continue
                    for dx in range(-1, 2):
                        xx = x + dx
                        if xx < 0 or xx >= w:
                            continue
                        total = total + src[yy, xx, c]
                        count = count + 1.0
                m = total / count
                sq = 0.0
                for dy in range(-1, 2):
                    yy = y + dy
                    if yy < 0 or yy >= h:
                        continue
                    for dx in range(-1, 2):
                        xx = x + dx
                        if xx < 0 or xx >= w:
                            continue
                        dev = src[yy, xx, c] - m
                        sq = sq + dev * dev
                mean[y, x, c] = m
                std[y, x, c] = sqrt(sq / count)
    return mean_arr, std_arr


def mask_runs(flat):
    cdef cnp.uint8_t[::1] bits = np.ascontiguousarray(np.asarray(flat, dtype=bool).ravel()).view(np.uint8)
    cdef Py_ssize_t n = bits.shape[0], i, nruns = 0, start = 0
    cdef bint inside = False
    for i in range(n):
        if bits[i] and not inside:
            nruns += 1
            inside = True
        elif not bits[i]:
            inside = False
    out_arr = np.empty((nruns, 2), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef Py_ssize_t r = 0
    inside = False
    for i in range(n):
        if bits[i] and not inside:
            start = i
            inside = True
        elif not bits[i] and inside:
            out[r, 0] = start
            out[r, 1] = i - start
            r += 1
            inside = False
    if inside:
        out[r, 0] = start
        out[r, 1] = n - start
    return out_arr


def vote_refine(labels, probs, mask_indices, long ignore):
    cdef cnp.int64_t[::1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    cdef cnp.float64_t[:, ::1] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef Py_ssize_t num_classes = p.shape[1]
    out_arr = np.array(lab, dtype=np.int64, copy=True)
    cdef cnp.int64_t[::1] out = out_arr
    counts_arr = np.zeros(num_classes, dtype=np.int64)
    mass_arr = np.zeros(num_classes, dtype=np.float64)
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef cnp.float64_t[::1] mass = mass_arr
    cdef cnp.int64_t[::1] idx
    cdef Py_ssize_t i, j, c, n
    cdef long v, best, nbest, winner, seen
    cdef double best_mass
    for mask in mask_indices:
        idx = np.ascontiguousarray(mask, dtype=np.int64)
        n = idx.shape[0]
        for c in range(num_classes):
            counts[c] = 0
            mass[c] = 0.0
        seen = 0
        for i in range(n):
            v = lab[idx[i]]
            if v != ignore:
                counts[v] += 1
                seen += 1
        if seen == 0:
            continue
        best = 0
        nbest = 0
        winner = -1
        for c in range(num_classes):
            if counts[c] > best:
                best = counts[c]
                nbest = 1
                winner = c
            elif counts[c] == best:
                nbest += 1
        if nbest > 1:
            for i in range(n):
                j = idx[i]
                if lab[j] != ignore:
                    for c in range(num_classes):
                        mass[c] = mass[c] + p[j, c]
            winner = -1
            for c in range(num_classes):
                if counts[c] == best and (winner < 0 or mass[c] > best_mass):
                    winner = c
                    best_mass = mass[c]
        for i in range(n):
            j = idx[i]
            if lab[j] != ignore:
                out[j] = winner
    return out_arr
