# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: event-driven spike convolution and fused neuron updates.

Semantics are identical to ``_pycore``; see that module for the contract.
"""
import numpy as np
from libc.stdint cimport int64_t

NAME = "cython"

ctypedef fused acc_t:
    double
    int64_t


cdef void _conv(const unsigned char[:, :, :, ::1] s, const acc_t[:, :, :, ::1] w,
                acc_t[:, :, :, ::1] out, int stride, int pad) noexcept nogil:
    cdef Py_ssize_t N = s.shape[0], C = s.shape[1], H = s.shape[2], W = s.shape[3]
    cdef Py_ssize_t O = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = out.shape[2], OW = out.shape[3]
    cdef Py_ssize_t n, c, iy, ix, ky, kx, o, ty, tx, oy, ox
    for n in range(N):
        for c in range(C):
            for iy in range(H):
                for ix in range(W):
                    if s[n, c, iy, ix] == 0:
                        continue
                    for ky in range(KH):
                        ty = iy + pad - ky
                        if ty < 0:
                            break
                        if ty % stride:
                            continue
                        oy = ty // stride
                        if oy >= OH:
                            continue
                        for kx in range(KW):
                            tx = ix + pad - kx
                            if tx < 0:
                                break
                            if tx % stride:
                                continue
                            ox = tx // stride
                            if ox >= OW:
                                continue
                            for o in range(O):
                                out[n, o, oy, ox] += w[o, c, ky, kx]


cdef void _tconv(const unsigned char[:, :, :, ::1] s, const acc_t[:, :, :, ::1] w,
                 acc_t[:, :, :, ::1] out, int stride, int pad) noexcept nogil:
    cdef Py_ssize_t N = s.shape[0], C = s.shape[1], H = s.shape[2], W = s.shape[3]
    cdef Py_ssize_t O = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = out.shape[2], OW = out.shape[3]
    cdef Py_ssize_t n, c, iy, ix, ky, kx, o, oy, ox
    for n in range(N):
        for c in range(C):
            for iy in range(H):
                for ix in range(W):
                    if s[n, c, iy, ix] == 0:
                        continue
                    for ky in range(KH):
                        oy = iy * stride + ky - pad
                        if oy < 0 or oy >= OH:
                            continue
                        for kx in range(KW):
                            ox = ix * stride + kx - pad
                            if ox < 0 or ox >= OW:
                                continue
                            for o in range(O):
                                out[n, o, oy, ox] += w[o, c, ky, kx]


def spike_conv2d(spikes, weight, int stride, int pad, bint transpose, out_hw):
    spikes = np.ascontiguousarray(spikes, dtype=np.uint8)
    weight = np.ascontiguousarray(weight)
    out = np.zeros((spikes.shape[0], weight.shape[0], out_hw[0], out_hw[1]), dtype=weight.dtype)
    if weight.dtype == np.float64:
        if transpose:
            _tconv[double](spikes, weight, out, stride, pad)
        else:
            _conv[double](spikes, weight, out, stride, pad)
    elif weight.dtype == np.int64:
        if transpose:
            _tconv[int64_t](spikes, weight, out, stride, pad)
        else:
            _conv[int64_t](spikes, weight, out, stride, pad)
    else:
        raise TypeError(f"weights must be float64 or int64, got {weight.dtype}")
    return out


def if_update_real(double[::1] vhi, double[::1] vlo, const double[::1] u, double th,
                   double lo_b, double hi_b, bint clamp, unsigned char[::1] spikes):
    cdef Py_ssize_t i, n = vhi.shape[0]
    cdef double a, b, s, bp, e, h, l, r, nth = -th, nhi = -hi_b, nlo = -lo_b
    with nogil:
        for i in range(n):
            a = vhi[i]
            b = u[i]
            s = a + b
            bp = s - a
            e = (a - (s - bp)) + (b - bp)
            e = vlo[i] + e
            h = s + e
            bp = h - s
            l = (s - (h - bp)) + (e - bp)

            r = h + nth
            bp = r - h
            e = (h - (r - bp)) + (nth - bp)
            e = e + l
            if (r + e) >= 0.0:
                spikes[i] = 1
                h = r + e
                bp = h - r
                l = (r - (h - bp)) + (e - bp)
            else:
                spikes[i] = 0

            if clamp:
                r = h + nhi
                bp = r - h
                e = (h - (r - bp)) + (nhi - bp)
                e = e + l
                if (r + e) > 0.0:
                    h = hi_b
                    l = 0.0
                r = h + nlo
                bp = r - h
                e = (h - (r - bp)) + (nlo - bp)
                e = e + l
                if (r + e) < 0.0:
                    h = lo_b
                    l = 0.0
            vhi[i] = h
            vlo[i] = l


def if_update_int(int64_t[::1] v, const int64_t[::1] u, int64_t th, int64_t lo_b, int64_t hi_b,
                  bint clamp, unsigned char[::1] spikes):
    cdef Py_ssize_t i, n = v.shape[0]
    cdef int64_t x
    cdef Py_ssize_t bad = 0
    with nogil:
        for i in range(n):
            x = v[i] + u[i]
            if x < -2147483648 or x > 2147483647:
                bad += 1
            if x >= th:
                spikes[i] = 1
                x -= th
            else:
                spikes[i] = 0
            if clamp:
                if x > hi_b:
                    x = hi_b
                elif x < lo_b:
                    x = lo_b
            v[i] = x
    return bad
