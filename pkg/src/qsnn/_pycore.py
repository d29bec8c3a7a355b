"""Pure-numpy kernels; the reference the compiled ``_core`` must match bit-for-bit.

Membrane potentials on the real datapath are double-double pairs
``(hi, lo)`` updated with error-free TwoSum steps, so threshold comparisons
see the exact running sum of the float64 inputs. The operation sequence
below is mirrored one-for-one in ``_core.pyx``.
"""
import numpy as np

from .tensor import correlate, scatter

NAME = "python"

_I32_MIN = -(2**31)
_I32_MAX = 2**31 - 1


def spike_conv2d(spikes, weight, stride, pad, transpose, out_hw):
    x = spikes.astype(weight.dtype)
    if transpose:
        return scatter(x, weight, stride, pad, out_hw)
    return correlate(x, weight, stride, pad)


def _two_sum(a, b):
    s = a + b
    bp = s - a
    return s, (a - (s - bp)) + (b - bp)


def if_update_real(vhi, vlo, u, th, lo_b, hi_b, clamp, spikes):
    s, e = _two_sum(vhi, u)
    e = vlo + e
    h, l = _two_sum(s, e)
    r, e = _two_sum(h, -th)
    e = e + l
    fire = (r + e) >= 0.0
    rh, rl = _two_sum(r, e)
    h = np.where(fire, rh, h)
    l = np.where(fire, rl, l)
    if clamp:
        r, e = _two_sum(h, -hi_b)
        e = e + l
        over = (r + e) > 0.0
        h = np.where(over, hi_b, h)
        l = np.where(over, 0.0, l)
        r, e = _two_sum(h, -lo_b)
        e = e + l
        under = (r + e) < 0.0
        h = np.where(under, lo_b, h)
        l = np.where(under, 0.0, l)
    vhi[...] = h
    vlo[...] = l
    spikes[...] = fire


def if_update_int(v, u, th, lo_b, hi_b, clamp, spikes):
    x = v + u
    bad = int(np.count_nonzero((x < _I32_MIN) | (x > _I32_MAX)))
    fire = x >= th
    x = np.where(fire, x - th, x)
    if clamp:
        x = np.clip(x, lo_b, hi_b)
    v[...] = x
    spikes[...] = fire
    return bad
