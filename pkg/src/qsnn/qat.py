"""Toy-scale quantization-aware training with straight-through gradients.

Forward passes fake-quantize every kernel and every QReLU output. Backward
passes treat fake-quantization as the identity wherever the value is inside
the representable range (straight-through estimator), so the gradient of
the quantized loss equals the exact gradient of a surrogate in which each
quantizer is ``v + r`` with the rounding residual ``r`` held fixed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import quant
from .graph import ConvLayer, LayerGraph
from .quant import QuantParams
from .synthetic import blob_dataset
from .tensor import ConvSpec, conv2d, correlate, scatter


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    steps: int = 500
    batch_size: int = 32
    seed: int = 0
    weight_bits: int = 8
    activation_bits: int = 8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        for bits in (self.weight_bits, self.activation_bits):
            if not 2 <= bits <= 8:
                raise ValueError(f"bit widths must lie in [2, 8], got {bits}")

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            raw = json.load(f)
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in raw.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)


def ste_grad_fake_quant(x, qp: QuantParams, upstream):
    """Pass ``upstream`` where ``x`` quantizes without saturating, else 0."""
    x = np.asarray(x, dtype=np.float64)
    inside = np.abs(x / qp.scale) < qp.qmax + 0.5
    out = np.where(inside, upstream, 0.0)
    return float(out) if out.ndim == 0 else out


def _windows(x, k_hw, stride, padding, out_hw):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, k_hw, axis=(2, 3))
    return win[:, :, : (out_hw[0] - 1) * stride + 1 : stride, : (out_hw[1] - 1) * stride + 1 : stride]


def conv_backward(dz, x, kernel, kind, stride, padding):
    """Gradients ``(dx, dkernel, dbias)`` of a conv of any kind given ``dz``."""
    db = dz.sum(axis=(0, 2, 3))
    k_hw = kernel.shape[2:]
    flipped = kernel.transpose(1, 0, 2, 3)
    if kind == "transpose_conv":
        win = _windows(dz, k_hw, stride, padding, x.shape[2:])  # (N, O, H, W, kh, kw)
        dk = np.tensordot(win, x, axes=([0, 2, 3], [0, 2, 3])).transpose(0, 3, 1, 2)
        dx = correlate(dz, flipped, stride, padding)
    else:
        win = _windows(x, k_hw, stride, padding, dz.shape[2:])  # (N, C, oh, ow, kh, kw)
        dk = np.tensordot(dz, win, axes=([0, 2, 3], [0, 2, 3]))
        dx = scatter(dz, flipped, stride, padding, x.shape[2:])
    return dx, dk, db


def _check_trainable(graph: LayerGraph) -> None:
    graph.validate()
    for i, layer in enumerate(graph.layers):
        if layer.batchnorm is not None:
            raise ValueError(f"layer {i}: fold batch norm (fold_batchnorm) before training")


def _forward(graph, x, quantize, residuals=None):
    """Forward pass keeping what backward needs.

    ``residuals`` (from a previous call) freezes each quantizer's rounding
    residual; otherwise they are computed and returned.
    """
    caches, fresh = [], []
    for i, layer in enumerate(graph.layers):
        spec = layer.spec
        w = spec.kernel
        w_mask = None
        if quantize and layer.weight_bits is not None:
            qp = layer.weight_qparams()
            r_w = quant.fake_quant(w, qp) - w if residuals is None else residuals[i][0]
            w_mask = ste_grad_fake_quant(w, qp, 1.0)
        else:
            r_w = 0.0
        wq = w + r_w
        z = conv2d(x, ConvSpec(spec.kind, wq, spec.bias, spec.stride, spec.padding))
        if layer.activation == "relu":
            y, mask, r_a = np.maximum(z, 0.0), z > 0, 0.0
        else:
            c = np.clip(z, 0.0, layer.ceiling)
            mask = (z > 0) & (z < layer.ceiling)
            if quantize:
                qp = layer.activation_qparams()
                r_a = quant.fake_quant(c, qp) - c if residuals is None else residuals[i][1]
                mask = mask & (ste_grad_fake_quant(c, qp, 1.0) > 0)
            else:
                r_a = 0.0
            y = c + r_a
        caches.append((x, wq, mask, w_mask))
        fresh.append((r_w, r_a))
        x = y
    return x, caches, fresh


def loss_and_grads(graph: LayerGraph, x, y, quantize: bool = True, residuals=None):
    """Mean-squared error and per-layer ``(dkernel, dbias)`` gradients."""
    out, caches, _ = _forward(graph, np.asarray(x, dtype=np.float64), quantize, residuals)
    diff = out - y
    loss = float(np.mean(diff**2))
    grad = 2.0 * diff / diff.size
    grads = [None] * len(graph.layers)
    for i in reversed(range(len(graph.layers))):
        layer = graph.layers[i]
        x_in, wq, mask, w_mask = caches[i]
        dz = grad * mask
        spec = layer.spec
        grad, dk, db = conv_backward(dz, x_in, wq, spec.kind, spec.stride, spec.padding)
        if w_mask is not None:
            dk = dk * w_mask
        grads[i] = (dk, db)
    return loss, grads


def quantizer_residuals(graph: LayerGraph, x):
    """Rounding residuals at the current weights, for surrogate-loss checks."""
    return _forward(graph, np.asarray(x, dtype=np.float64), True)[2]


def evaluate_loss(graph: LayerGraph, x, y, quantize: bool = True, residuals=None) -> float:
    out = _forward(graph, np.asarray(x, dtype=np.float64), quantize, residuals)[0]
    return float(np.mean((out - y) ** 2))


def apply_bits(graph: LayerGraph, cfg: TrainConfig) -> LayerGraph:
    """Copy of ``graph`` using ``cfg``'s weight and QReLU bit widths."""
    g = graph.copy()
    for layer in g.layers:
        layer.weight_bits = cfg.weight_bits
        if layer.activation == "qrelu":
            layer.activation_bits = cfg.activation_bits
    return g


def train_toy(graph: LayerGraph, dataset, cfg: TrainConfig) -> LayerGraph:
    """Plain SGD with fake quantization in the loop; returns the trained copy.

    ``dataset`` is ``(inputs, targets)``; minibatches are drawn from a
    generator seeded with ``cfg.seed``.
    """
    _check_trainable(graph)
    g = apply_bits(graph, cfg)
    xs, ys = (np.asarray(a, dtype=np.float64) for a in dataset)
    rng = np.random.default_rng(cfg.seed)
    batch = min(cfg.batch_size, len(xs))
    for _ in range(cfg.steps):
        idx = rng.choice(len(xs), size=batch, replace=False)
        _, grads = loss_and_grads(g, xs[idx], ys[idx], quantize=True)
        if cfg.learning_rate == 0:
            continue
        for layer, (dk, db) in zip(g.layers, grads):
            layer.spec = layer.spec.replace(kernel=layer.spec.kernel - cfg.learning_rate * dk,
                                            bias=layer.spec.bias - cfg.learning_rate * db)
    return g


def toy_graph(seed: int = 0, hidden: int = 8, size: int = 8) -> LayerGraph:
    """Two-layer net for blob-centre regression: strided conv + QReLU, then a full-field conv."""
    rng = np.random.default_rng(seed)
    half = size // 2
    k1 = rng.normal(0.0, 1.0 / 3.0, (hidden, 1, 3, 3))
    k2 = rng.normal(0.0, 1.0 / np.sqrt(hidden * half * half), (2, hidden, half, half))
    return LayerGraph([
        ConvLayer(ConvSpec("strided_conv", k1, np.zeros(hidden), 2, 1, name="down"), activation="qrelu"),
        ConvLayer(ConvSpec("conv", k2, np.full(2, 0.5), 1, 0, name="head"), activation="relu"),
    ], input_shape=(1, size, size))


def toy_dataset(seed: int = 0, n: int = 256, size: int = 8):
    return blob_dataset(seed, n, size)
