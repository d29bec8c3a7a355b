"""Symmetric per-tensor quantization, QReLU and batch-norm folding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConvSpec

MIN_BITS, MAX_BITS = 2, 8


def round_half_away(x):
    """Round to nearest integer, ties away from zero (sign-symmetric)."""
    x = np.asarray(x, dtype=np.float64)
    t = np.trunc(x)
    frac = x - t  # exact for binary floats
    return t + np.where(np.abs(frac) >= 0.5, np.sign(x), 0.0)


def _check_bits(bit_width: int) -> int:
    if not MIN_BITS <= int(bit_width) <= MAX_BITS:
        raise ValueError(f"bit_width must be in [{MIN_BITS}, {MAX_BITS}], got {bit_width}")
    return int(bit_width)


@dataclass(frozen=True)
class QuantParams:
    """Signed symmetric quantizer; zero-point is 0 and code -2^(b-1) is unused."""

    bit_width: int
    scale: float

    def __post_init__(self):
        _check_bits(self.bit_width)
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bit_width - 1) - 1

    @property
    def qmin(self) -> int:
        return -self.qmax

    @property
    def max_value(self) -> float:
        return self.qmax * self.scale


@dataclass
class BatchNormSpec:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        n = len(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"batch-norm field {name} has {len(getattr(self, name))} channels, expected {n}")
        if np.any(np.asarray(self.running_var) + self.eps <= 0):
            raise ValueError("running_var + eps must be positive in every channel")

    @property
    def channels(self) -> int:
        return len(self.gamma)


def calibrate_qparams(values, bit_width: int) -> QuantParams:
    """Scale so the largest magnitude maps onto the top code (scale 1 if all zero)."""
    bit_width = _check_bits(bit_width)
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot calibrate on an empty tensor")
    peak = float(np.max(np.abs(values)))
    qmax = 2 ** (bit_width - 1) - 1
    return QuantParams(bit_width, peak / qmax if peak > 0 else 1.0)


def quantize(x, qp: QuantParams):
    """Map reals to saturating integer codes. Scalars give ``int``, arrays give int32."""
    codes = np.clip(round_half_away(np.asarray(x, dtype=np.float64) / qp.scale), qp.qmin, qp.qmax)
    if codes.ndim == 0:
        return int(codes)
    return codes.astype(np.int32)


def dequantize(code, qp: QuantParams):
    out = np.asarray(code, dtype=np.float64) * qp.scale
    return float(out) if out.ndim == 0 else out


def fake_quant(x, qp: QuantParams):
    return dequantize(quantize(x, qp), qp)


def qrelu(x, qp: QuantParams, ceiling: float):
    if not ceiling > 0:
        raise ValueError(f"ceiling must be positive, got {ceiling}")
    return fake_quant(np.clip(x, 0.0, ceiling), qp)


def activation_qparams(bit_width: int, ceiling: float) -> QuantParams:
    """Activation grid spanning ``[0, ceiling]`` so the ceiling is the top code."""
    bit_width = _check_bits(bit_width)
    return QuantParams(bit_width, ceiling / (2 ** (bit_width - 1) - 1))


def batchnorm(x: np.ndarray, bn: BatchNormSpec) -> np.ndarray:
    """Inference-mode batch norm over the channel axis of an NCHW tensor."""
    shape = (1, -1, 1, 1)
    inv = np.asarray(bn.gamma) / np.sqrt(np.asarray(bn.running_var) + bn.eps)
    return (x - np.reshape(bn.running_mean, shape)) * np.reshape(inv, shape) + np.reshape(bn.beta, shape)


def fold_batchnorm(conv: ConvSpec, bn: BatchNormSpec) -> ConvSpec:
    """Absorb an inference-mode batch norm into the preceding conv's weights and bias."""
    if bn.channels != conv.out_channels:
        raise ValueError(
            f"batch norm has {bn.channels} channels but conv {conv.name or ''} has {conv.out_channels} outputs"
        )
    inv = np.asarray(bn.gamma, dtype=np.float64) / np.sqrt(np.asarray(bn.running_var, dtype=np.float64) + bn.eps)
    kernel = conv.kernel * inv[:, None, None, None]
    bias = (conv.bias - np.asarray(bn.running_mean)) * inv + np.asarray(bn.beta)
    return conv.replace(kernel=kernel, bias=bias.astype(np.float64))
