"""Dense tensor primitives: conv, strided conv, transpose conv, relu.

Tensors are plain numpy arrays in NCHW layout. Two element domains exist:
``float64`` (real) and ``int32`` (integer). Integer convolutions accumulate
in int64 and raise ``OverflowError`` if a result leaves the int32 range.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CONV_KINDS = ("conv", "strided_conv", "transpose_conv")

INT32_MIN = np.iinfo(np.int32).min
INT32_MAX = np.iinfo(np.int32).max


class DomainError(TypeError):
    """Real and integer tensors were mixed, or an unsupported dtype was given."""


def domain(t: np.ndarray) -> str:
    """Return ``"real"`` or ``"int"`` for a tensor, raising on other dtypes."""
    if t.dtype == np.float64:
        return "real"
    if t.dtype == np.int32:
        return "int"
    raise DomainError(f"unsupported element type {t.dtype}; expected float64 or int32")


def check_int32(values: np.ndarray, what: str = "value") -> np.ndarray:
    """Narrow an int64 array to int32, raising ``OverflowError`` if it does not fit."""
    if values.size and (values.min() < INT32_MIN or values.max() > INT32_MAX):
        raise OverflowError(f"{what} exceeds the 32-bit signed range")
    return values.astype(np.int32)


@dataclass
class ConvSpec:
    """One convolution layer: kernel ``(out_ch, in_ch, kh, kw)``, bias ``(out_ch,)``.

    ``strided_conv`` is an ordinary convolution whose stride replaces a
    pooling layer; it exists as a separate kind so layer graphs read the
    way the network was designed.
    """

    kind: str
    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.kind not in CONV_KINDS:
            raise ValueError(f"unknown conv kind {self.kind!r}; expected one of {CONV_KINDS}")
        if self.kernel.ndim != 4:
            raise ValueError(f"kernel must be 4-D (out, in, kh, kw), got shape {self.kernel.shape}")
        if self.bias.ndim != 1 or self.bias.shape[0] != self.kernel.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape} does not match out-channel count {self.kernel.shape[0]}"
            )
        if int(self.stride) < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if int(self.padding) < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        self.stride = int(self.stride)
        self.padding = int(self.padding)

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return conv_output_hw(self.kind, (h, w), self.kernel.shape[2:], self.stride, self.padding)

    def replace(self, **changes) -> "ConvSpec":
        fields = dict(
            kind=self.kind, kernel=self.kernel, bias=self.bias,
            stride=self.stride, padding=self.padding, name=self.name,
        )
        fields.update(changes)
        return ConvSpec(**fields)


def conv_output_hw(kind, in_hw, k_hw, stride, padding):
    (h, w), (kh, kw) = in_hw, k_hw
    if kind == "transpose_conv":
        oh = (h - 1) * stride - 2 * padding + kh
        ow = (w - 1) * stride - 2 * padding + kw
    else:
        oh = (h + 2 * padding - kh) // stride + 1
        ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"{kind} with kernel {tuple(k_hw)}, stride {stride}, padding {padding} "
            f"produces an empty output from input {h}x{w}"
        )
    return oh, ow


def _check_operands(x: np.ndarray, spec: ConvSpec) -> str:
    if x.ndim != 4:
        raise ValueError(f"input must be 4-D (batch, channels, height, width), got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"input channel dimension is {x.shape[1]} but the kernel expects {spec.in_channels}"
        )
    dx, dk = domain(x), domain(spec.kernel)
    if dx != dk:
        raise DomainError(f"input is {dx}-domain but kernel is {dk}-domain")
    if domain(spec.bias) != dk:
        raise DomainError(f"bias domain does not match kernel domain ({dk})")
    return dx


def _acc_dtype(dom: str):
    return np.float64 if dom == "real" else np.int64


def correlate(x: np.ndarray, kernel: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Bias-free cross-correlation in whatever dtype the operands carry."""
    kh, kw = kernel.shape[2:]
    oh, ow = conv_output_hw("conv", x.shape[2:], (kh, kw), stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))  # (N, oh, ow, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def scatter(x: np.ndarray, kernel: np.ndarray, stride: int, padding: int, out_hw) -> np.ndarray:
    """Bias-free transposed correlation: each input pixel paints a kernel-sized patch.

    ``kernel`` is ``(out_ch, in_ch, kh, kw)``; the result has ``out_ch``
    channels and spatial size ``out_hw`` (the region beyond ``out_hw`` after
    removing ``padding`` is discarded).
    """
    n, _, h, w = x.shape
    o, _, kh, kw = kernel.shape
    oh, ow = out_hw
    full = np.zeros(
        (n, o, max((h - 1) * stride + kh, oh + 2 * padding), max((w - 1) * stride + kw, ow + 2 * padding)),
        dtype=np.result_type(x, kernel),
    )
    for ky in range(kh):
        for kx in range(kw):
            patch = np.tensordot(x, kernel[:, :, ky, kx], axes=([1], [1]))  # (N, h, w, O)
            full[:, :, ky : ky + (h - 1) * stride + 1 : stride, kx : kx + (w - 1) * stride + 1 : stride] += (
                patch.transpose(0, 3, 1, 2)
            )
    return np.ascontiguousarray(full[:, :, padding : padding + oh, padding : padding + ow])


def conv2d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Cross-correlation plus per-channel bias.

    Output spatial size is ``floor((H + 2*pad - kH) / stride) + 1``. A
    ``transpose_conv`` spec is dispatched to :func:`transpose_conv2d`.
    """
    if spec.kind == "transpose_conv":
        return transpose_conv2d(x, spec)
    dom = _check_operands(x, spec)
    acc = _acc_dtype(dom)
    out = correlate(x.astype(acc, copy=False), spec.kernel.astype(acc, copy=False), spec.stride, spec.padding)
    out += spec.bias.astype(acc)[None, :, None, None]
    if dom == "int":
        return check_int32(out, "conv2d output")
    return out


def transpose_conv2d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Fractionally-strided convolution; output size ``(H - 1)*stride - 2*pad + kH``."""
    if spec.kind != "transpose_conv":
        raise ValueError(f"transpose_conv2d needs a transpose_conv spec, got {spec.kind!r}")
    dom = _check_operands(x, spec)
    acc = _acc_dtype(dom)
    oh, ow = spec.output_hw(*x.shape[2:])
    out = scatter(x.astype(acc, copy=False), spec.kernel.astype(acc, copy=False), spec.stride, spec.padding, (oh, ow))
    out += spec.bias.astype(acc)[None, :, None, None]
    if dom == "int":
        return check_int32(out, "transpose_conv2d output")
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)
