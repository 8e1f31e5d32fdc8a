# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the per-example loops in :mod:`mtplm._fallback`."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t i64


def apply_spans(i64[::1] ids, i64[::1] starts, i64[::1] lengths,
                i64 prefix, i64 eos, i64 sentinel_offset):
    cdef Py_ssize_t n = ids.shape[0], n_spans = starts.shape[0]
    cdef Py_ssize_t masked = 0, s, i, e = 0, t = 0, pos = 0
    for s in range(n_spans):
        masked += lengths[s]
    enc_arr = np.empty(n - masked + n_spans + 2, dtype=np.int64)
    tgt_arr = np.empty(masked + n_spans + 1, dtype=np.int64)
    cdef i64[::1] enc = enc_arr
    cdef i64[::1] tgt = tgt_arr
    enc[e] = prefix
    e += 1
    for s in range(n_spans):
        for i in range(pos, starts[s]):
            enc[e] = ids[i]
            e += 1
        enc[e] = sentinel_offset + s
        e += 1
        tgt[t] = sentinel_offset + s
        t += 1
        for i in range(starts[s], starts[s] + lengths[s]):
            tgt[t] = ids[i]
            t += 1
        pos = starts[s] + lengths[s]
    for i in range(pos, n):
        enc[e] = ids[i]
        e += 1
    enc[e] = eos
    tgt[t] = eos
    return enc_arr, tgt_arr


def splice_spans(i64[::1] enc, i64[::1] tgt, i64 sentinel_offset, i64 num_sentinels):
    """Return the spliced ids, or None when sentinel streams disagree."""
    cdef Py_ssize_t ne = enc.shape[0], nt = tgt.shape[0]
    cdef Py_ssize_t i, j = 0, o = 0
    cdef i64 tok, last = -1, k
    out_arr = np.empty(ne + nt, dtype=np.int64)
    cdef i64[::1] out = out_arr
    for i in range(ne):
        tok = enc[i]
        k = tok - sentinel_offset
        if 0 <= k < num_sentinels:
            if k <= last or j >= nt or tgt[j] != tok:
                return None
            last = k
            j += 1
            while j < nt and not (0 <= tgt[j] - sentinel_offset < num_sentinels):
                out[o] = tgt[j]
                o += 1
                j += 1
        else:
            out[o] = tok
            o += 1
    if j != nt:
        return None
    return out_arr[:o].copy()


def average_ranks(double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i = 0, j, m
    cdef double r
    order_arr = np.argsort(np.asarray(x), kind="mergesort")
    cdef cnp.intp_t[::1] order = order_arr
    ranks_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] ranks = ranks_arr
    while i < n:
        j = i
        while j + 1 < n and x[order[j + 1]] == x[order[i]]:
            j += 1
        r = 0.5 * (i + j) + 1.0
        for m in range(i, j + 1):
            ranks[order[m]] = r
        i = j + 1
    return ranks_arr
