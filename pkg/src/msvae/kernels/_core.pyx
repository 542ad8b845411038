# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for the state-enumeration kernels.

When the state matrix is the canonical little-endian enumeration of all
2^K subsets, the per-state mixtures are updated incrementally along a Gray
code walk (one source added or removed per step) instead of being rebuilt
from scratch, which drops the cost from O(S*K*D) to O(S*D) per (b, m).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


cdef inline double _sgn(double v) noexcept nogil:
    if v > 0.0:
        return 1.0
    if v < 0.0:
        return -1.0
    return 0.0


cdef inline int _bit_index(unsigned long v) noexcept nogil:
    cdef int k = 0
    while not (v & 1UL):
        v >>= 1
        k += 1
    return k


def _is_canonical(states):
    cdef Py_ssize_t s_count = states.shape[0]
    cdef Py_ssize_t k_count = states.shape[1]
    if k_count >= 63 or s_count != (1 << k_count):
        return False
    idx = np.arange(s_count, dtype=np.uint64)[:, None]
    bits = ((idx >> np.arange(k_count, dtype=np.uint64)[None, :]) & 1).astype(np.uint8)
    return bool(np.array_equal(bits, states))


def state_l1_residuals(x, mu, states):
    """L1 distance between x and every state's source combination."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    states = np.ascontiguousarray(states, dtype=np.uint8)

    cdef double[:, ::1] xv = x
    cdef double[:, :, :, ::1] muv = mu
    cdef cnp.uint8_t[:, ::1] sv = states
    cdef Py_ssize_t nb = muv.shape[0], nm = muv.shape[1], nk = muv.shape[2], nd = muv.shape[3]
    cdef Py_ssize_t ns = sv.shape[0]
    cdef bint canonical = _is_canonical(states)

    out = np.empty((nb, nm, ns), dtype=np.float64)
    scratch = np.zeros(nd, dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef double[::1] mix = scratch
    cdef Py_ssize_t b, m, s, k, d
    cdef unsigned long gray, diff
    cdef double acc

    with nogil:
        for b in range(nb):
            for m in range(nm):
                if canonical:
                    for d in range(nd):
                        mix[d] = 0.0
                    acc = 0.0
                    for d in range(nd):
                        acc += fabs(xv[b, d])
                    ov[b, m, 0] = acc
                    for s in range(1, ns):
                        gray = (<unsigned long> s) ^ ((<unsigned long> s) >> 1)
                        diff = gray ^ (((<unsigned long> (s - 1))) ^ ((<unsigned long> (s - 1)) >> 1))
                        k = _bit_index(diff)
                        if gray & diff:
                            for d in range(nd):
                                mix[d] += muv[b, m, k, d]
                        else:
                            for d in range(nd):
                                mix[d] -= muv[b, m, k, d]
                        acc = 0.0
                        for d in range(nd):
                            acc += fabs(xv[b, d] - mix[d])
                        ov[b, m, gray] = acc
                else:
                    for s in range(ns):
                        for d in range(nd):
                            mix[d] = 0.0
                        for k in range(nk):
                            if sv[s, k]:
                                for d in range(nd):
                                    mix[d] += muv[b, m, k, d]
                        acc = 0.0
                        for d in range(nd):
                            acc += fabs(xv[b, d] - mix[d])
                        ov[b, m, s] = acc
    return out


def state_l1_residuals_grad(x, mu, states, upstream):
    """Gradient of sum(upstream * state_l1_residuals) with respect to mu."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    states = np.ascontiguousarray(states, dtype=np.uint8)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)

    cdef double[:, ::1] xv = x
    cdef double[:, :, :, ::1] muv = mu
    cdef cnp.uint8_t[:, ::1] sv = states
    cdef double[:, :, ::1] uv = upstream
    cdef Py_ssize_t nb = muv.shape[0], nm = muv.shape[1], nk = muv.shape[2], nd = muv.shape[3]
    cdef Py_ssize_t ns = sv.shape[0]
    cdef bint canonical = _is_canonical(states)

    out = np.zeros((nb, nm, nk, nd), dtype=np.float64)
    scratch = np.zeros(nd, dtype=np.float64)
    cdef double[:, :, :, ::1] gv = out
    cdef double[::1] mix = scratch
    cdef Py_ssize_t b, m, s, k, d
    cdef unsigned long gray, diff, sbits
    cdef double w

    with nogil:
        for b in range(nb):
            for m in range(nm):
                for d in range(nd):
                    mix[d] = 0.0
                for s in range(ns):
                    if canonical:
                        if s > 0:
                            gray = (<unsigned long> s) ^ ((<unsigned long> s) >> 1)
                            diff = gray ^ (((<unsigned long> (s - 1))) ^ ((<unsigned long> (s - 1)) >> 1))
                            k = _bit_index(diff)
                            if gray & diff:
                                for d in range(nd):
                                    mix[d] += muv[b, m, k, d]
                            else:
                                for d in range(nd):
                                    mix[d] -= muv[b, m, k, d]
                        else:
                            gray = 0
                        sbits = gray
                        w = uv[b, m, <Py_ssize_t> gray]
                    else:
                        for d in range(nd):
                            mix[d] = 0.0
                        sbits = 0
                        for k in range(nk):
                            if sv[s, k]:
                                sbits |= (1UL << k)
                                for d in range(nd):
                                    mix[d] += muv[b, m, k, d]
                        w = uv[b, m, s]
                    if w == 0.0:
                        continue
                    for k in range(nk):
                        if sbits & (1UL << k):
                            for d in range(nd):
                                gv[b, m, k, d] -= w * _sgn(xv[b, d] - mix[d])
    return out
