"""Quantized ANN -> low-bit SNN conversion.

Pipeline per layer: fold batch norm, quantize weights, normalize by the
calibrated activation maxima so target firing rates lie in [0, 1], then
divide by the smallest gap between distinct weight values (``s_l``) and
round. The threshold is scaled by the same factor ``S_l = 1 / s_l`` so the
integer network fires exactly like the real one it was rounded from.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from . import quant
from .graph import ConvLayer, LayerGraph
from .quant import QuantParams
from .tensor import INT32_MAX, ConvSpec, conv2d

NEURON_KINDS = ("if", "fewdif")


@dataclass
class LayerStats:
    max_in: float
    max_out: float


def _as_batches(calib) -> list[np.ndarray]:
    if isinstance(calib, np.ndarray):
        calib = [calib]
    batches = []
    for x in calib:
        x = np.asarray(x, dtype=np.float64)
        batches.append(x[None] if x.ndim == 3 else x)
    return batches


def collect_stats(graph: LayerGraph, calib, percentile: float | None = None) -> list[LayerStats]:
    """Per-layer maxima of the input and post-activation output over a calibration set.

    ``percentile`` (off by default) swaps the exact maximum for a robust
    percentile. A layer whose statistic is 0 falls back to 1 so the
    normalization stays finite.
    """
    batches = _as_batches(calib)
    if not batches:
        raise ValueError("calibration set is empty")
    n = len(graph.layers)
    seen_in: list[list[np.ndarray]] = [[] for _ in range(n)]
    seen_out: list[list[np.ndarray]] = [[] for _ in range(n)]
    peak_in = np.zeros(n)
    peak_out = np.zeros(n)
    for x in batches:
        _, records = graph.forward(x, trace=True)
        for i, rec in enumerate(records):
            if percentile is None:
                peak_in[i] = max(peak_in[i], float(rec["input"].max()))
                peak_out[i] = max(peak_out[i], float(rec["output"].max()))
            else:
                seen_in[i].append(rec["input"].ravel())
                seen_out[i].append(rec["output"].ravel())
    if percentile is not None:
        for i in range(n):
            peak_in[i] = np.percentile(np.concatenate(seen_in[i]), percentile)
            peak_out[i] = np.percentile(np.concatenate(seen_out[i]), percentile)
    return [LayerStats(float(a) if a > 0 else 1.0, float(b) if b > 0 else 1.0) for a, b in zip(peak_in, peak_out)]


def layernorm_convert(w, b, max_prev: float, max_cur: float):
    """Rescale so a layer maps inputs in ``[0, 1]`` to outputs in ``[0, 1]``."""
    if not (max_prev > 0 and max_cur > 0):
        raise ValueError(f"activation maxima must be positive, got prev={max_prev}, cur={max_cur}")
    return np.asarray(w, dtype=np.float64) * (max_prev / max_cur), np.asarray(b, dtype=np.float64) / max_cur


def quantized_layernorm_convert(qw, w_qp: QuantParams, qm_prev: int, prev_qp: QuantParams,
                                qm_cur: int, cur_qp: QuantParams, qb=None, b_qp: QuantParams | None = None):
    """Normalization on quantized codes, with every scale carried explicitly.

    All normalized weights share the factor ``w_scale * M_prev / M_cur``,
    so ratios between them equal ratios between the integer codes.
    Returns ``(w_hat, b_hat)``; ``b_hat`` is ``None`` when no bias codes
    are given.
    """
    if qm_prev <= 0 or qm_cur <= 0:
        raise ValueError(f"quantized maxima must be positive, got prev={qm_prev}, cur={qm_cur}")
    m_prev = quant.dequantize(qm_prev, prev_qp)
    m_cur = quant.dequantize(qm_cur, cur_qp)
    w_hat = quant.dequantize(qw, w_qp) * m_prev / m_cur
    b_hat = None if qb is None else quant.dequantize(qb, b_qp) / m_cur
    return w_hat, b_hat


def min_gap(values) -> float:
    """Smallest nonzero difference between distinct values.

    One distinct nonzero value ``v`` gives ``|v|``; an all-zero layer gives 1.
    """
    distinct = np.unique(np.asarray(values, dtype=np.float64).ravel())
    if distinct.size == 0:
        raise ValueError("layer has no weights")
    if distinct.size == 1:
        v = abs(float(distinct[0]))
        return v if v > 0 else 1.0
    return _snap_gap(distinct, float(np.diff(distinct).min()))


def _snap_gap(distinct: np.ndarray, gap: float) -> float:
    """Pick the float step that reproduces every value exactly, if the values form a lattice.

    Values built as ``codes * f`` have float gaps that only approximate
    ``f``; a step ``value / code`` within 1e-9 of the measured gap that
    regenerates all values bit-exactly is preferred. Candidates are tried
    in a fixed order (smallest code first), so the result does not depend
    on weight order.
    """
    k = quant.round_half_away(distinct / gap)
    if np.abs(distinct / gap - k).max() > 1e-6:
        return gap
    order = sorted((abs(c), v, c) for v, c in zip(distinct.tolist(), k.tolist()) if c != 0)
    for _, v, c in order[:16]:
        s = v / c
        if abs(s - gap) <= 1e-9 * gap and np.array_equal(k * s, distinct):
            return s
    return gap


def round_to_grid(values, step: float) -> np.ndarray:
    """``round_half_away(values / step)`` decided in exact arithmetic.

    Float division can land a value on the wrong side of a half-way point;
    near-ties are re-decided with rationals so the rounding error never
    exceeds ``step / 2``.
    """
    values = np.asarray(values, dtype=np.float64)
    q = values / step
    k = quant.round_half_away(q)
    near = np.abs(np.abs(q - np.trunc(q)) - 0.5) < 1e-6
    if np.any(near):
        fs = Fraction(step)
        for idx in zip(*np.nonzero(near)):
            exact = Fraction(float(values[idx])) / fs
            whole = math.floor(abs(exact))
            mag = whole + (1 if abs(exact) - whole >= Fraction(1, 2) else 0)
            k[idx] = math.copysign(mag, exact) if exact else 0.0
    if k.size and np.abs(k).max() > INT32_MAX:
        raise OverflowError(
            f"value range / minimum gap ratio {np.abs(k).max():.3g} does not fit a 32-bit integer"
        )
    return k.astype(np.int64)


def bits_needed(codes) -> int:
    """Symmetric signed width holding every code (at least 2 bits)."""
    peak = int(np.abs(np.asarray(codes, dtype=np.int64)).max(initial=0))
    return max(2, peak.bit_length() + 1)


@dataclass(eq=False)
class SnnLayer:
    """One converted layer.

    ``int_weights * min_gap_s`` is the normalized real weight the integers
    stand for; ``bias`` keeps the normalized real bias at full precision
    and ``int_bias`` is its 32-bit scaled rounding.
    """

    kind: str
    stride: int
    padding: int
    int_weights: np.ndarray
    int_bias: np.ndarray
    bias: np.ndarray
    min_gap_s: float
    scale_S: float
    int_threshold: int
    weight_bits: int
    neuron: str = "if"
    n_max: float = 2.0
    n_min: float = -1.0
    max_in: float = 1.0
    max_out: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.neuron not in NEURON_KINDS:
            raise ValueError(f"neuron kind must be one of {NEURON_KINDS}, got {self.neuron!r}")
        if not self.n_max > self.n_min:
            raise ValueError(f"FewdIF bounds need n_max > n_min, got {self.n_max} <= {self.n_min}")
        if self.int_threshold < 1:
            raise ValueError("int_threshold must be >= 1")
        self.int_weights = np.asarray(self.int_weights, dtype=np.int32)
        self.int_bias = np.asarray(self.int_bias, dtype=np.int32)
        self.bias = np.asarray(self.bias, dtype=np.float64)

    @property
    def in_channels(self) -> int:
        return self.int_weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.int_weights.shape[0]

    @property
    def bits_used(self) -> int:
        return bits_needed(self.int_weights)

    def real_weights(self) -> np.ndarray:
        return self.int_weights * self.min_gap_s

    def int_bounds(self) -> tuple[int, int]:
        """Membrane clamp ``[N_min*th, N_max*th]`` rounded inward to integers."""
        return math.ceil(self.n_min * self.int_threshold), math.floor(self.n_max * self.int_threshold)

    def __eq__(self, other):
        if not isinstance(other, SnnLayer):
            return NotImplemented
        arrays = ("int_weights", "int_bias", "bias")
        scalars = ("kind", "stride", "padding", "min_gap_s", "scale_S", "int_threshold", "weight_bits",
                   "neuron", "n_max", "n_min", "max_in", "max_out", "name")
        return all(getattr(self, a) == getattr(other, a) for a in scalars) and all(
            getattr(self, a).dtype == getattr(other, a).dtype
            and np.array_equal(getattr(self, a), getattr(other, a))
            for a in arrays
        )


@dataclass(eq=False)
class SnnModel:
    layers: list[SnnLayer] = field(default_factory=list)
    v_th: float = 1.0
    weight_bits: int | None = None
    input_shape: tuple | None = None

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ValueError(
                    f"layer {nxt.name or ''} expects {nxt.in_channels} input channels, "
                    f"previous layer emits {prev.out_channels}"
                )
        if self.input_shape is not None:
            self.input_shape = tuple(int(d) for d in self.input_shape)

    @property
    def neurons(self) -> list[str]:
        return [layer.neuron for layer in self.layers]

    def __eq__(self, other):
        if not isinstance(other, SnnModel):
            return NotImplemented
        return (self.v_th == other.v_th and self.weight_bits == other.weight_bits
                and self.input_shape == other.input_shape and self.layers == other.layers)


def scale_aware_map(w_hat, b_hat, v_th: float = 1.0, *, kind: str = "conv", stride: int = 1,
                    padding: int = 0, weight_bits: int | None = None, neuron: str = "if",
                    n_max: float = 2.0, n_min: float = -1.0, name: str = "") -> SnnLayer:
    """Map normalized real weights onto integers via the layer's minimum weight gap."""
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if w_hat.size == 0:
        raise ValueError("cannot map an empty layer")
    if w_hat.ndim == 1:
        w_hat = w_hat.reshape(-1, 1, 1, 1)
    b_hat = np.zeros(w_hat.shape[0]) if b_hat is None else np.asarray(b_hat, dtype=np.float64)
    s = min_gap(w_hat)
    int_w = round_to_grid(w_hat, s)
    int_b = round_to_grid(b_hat, s)
    int_th = max(1, int(round_to_grid(np.array([v_th]), s)[0]))
    used = bits_needed(int_w)
    return SnnLayer(
        kind=kind, stride=stride, padding=padding,
        int_weights=int_w, int_bias=int_b, bias=b_hat,
        min_gap_s=s, scale_S=1.0 / s, int_threshold=int_th,
        weight_bits=max(used, weight_bits or 0),
        neuron=neuron, n_max=n_max, n_min=n_min, name=name,
    )


@dataclass
class LayerReport:
    index: int
    s_l: float
    S_l: float
    bits_used: int
    weight_bits: int
    int_threshold: int
    max_round_err: float


@dataclass
class ConversionReport:
    layers: list[LayerReport] = field(default_factory=list)

    def to_records(self) -> list[str]:
        return [
            f"index={r.index} s_l={r.s_l!r} S_l={r.S_l!r} bits_used={r.bits_used} "
            f"weight_bits={r.weight_bits} int_threshold={r.int_threshold} max_round_err={r.max_round_err!r}"
            for r in self.layers
        ]

    def to_table(self) -> str:
        head = f"{'layer':>5} {'s_l':>12} {'S_l':>12} {'bits':>4} {'store':>5} {'int_th':>7} {'max_round_err':>13}"
        rows = [
            f"{r.index:>5} {r.s_l:>12.6g} {r.S_l:>12.6g} {r.bits_used:>4} {r.weight_bits:>5} "
            f"{r.int_threshold:>7} {r.max_round_err:>13.3g}"
            for r in self.layers
        ]
        return "\n".join([head, *rows])


def _per_layer(value, n: int, what: str) -> list:
    if isinstance(value, (list, tuple)):
        if len(value) != n:
            raise ValueError(f"{what} has {len(value)} entries for {n} layers")
        return list(value)
    return [value] * n


def normalized_layer_params(layer: ConvLayer, index: int, max_prev: float, max_cur: float,
                            weight_bits: int | None, prev_act_qp: QuantParams | None):
    """Normalized ``(w_hat, b_hat, max_cur)`` for one layer.

    Layers whose weights and surrounding activations are all quantized go
    through the code-level route; the rest use real-valued rescaling.
    """
    spec = layer.folded()
    bits = weight_bits or layer.weight_bits
    if bits is None:
        w_hat, b_hat = layernorm_convert(spec.kernel, spec.bias, max_prev, max_cur)
        return w_hat, b_hat, max_cur
    w_qp = quant.calibrate_qparams(spec.kernel, bits)
    qw = quant.quantize(spec.kernel, w_qp)
    cur_qp = layer.activation_qparams()
    if cur_qp is not None and (index == 0 or prev_act_qp is not None):
        # network input lives on [0, 1]: one unit code stands for its maximum
        prev_qp = prev_act_qp if index else QuantParams(2, 1.0)
        qm_prev = quant.quantize(max_prev, prev_qp) if index else 1
        qm_cur = quant.quantize(max_cur, cur_qp)
        if qm_cur > 0 and qm_prev > 0:
            w_hat, _ = quantized_layernorm_convert(qw, w_qp, qm_prev, prev_qp, qm_cur, cur_qp)
            m_cur = quant.dequantize(qm_cur, cur_qp)
            return w_hat, spec.bias / m_cur, m_cur
    w_hat, b_hat = layernorm_convert(quant.dequantize(qw, w_qp), spec.bias, max_prev, max_cur)
    return w_hat, b_hat, max_cur


def convert_model(graph: LayerGraph, calib=None, *, stats: Sequence[LayerStats] | None = None,
                  v_th: float = 1.0, neuron="if", n_max=2.0, n_min=-1.0,
                  weight_bits: int | None = None, percentile: float | None = None):
    """Convert a QANN into an :class:`SnnModel`; returns ``(model, report)``.

    ``neuron``, ``n_max`` and ``n_min`` may be scalars or per-layer lists.
    ``weight_bits`` overrides the graph's own weight quantization width.
    """
    graph.validate()
    n = len(graph.layers)
    if stats is None:
        if calib is None:
            raise ValueError("need a calibration set or precomputed stats")
        stats = collect_stats(graph, calib, percentile)
    if len(stats) != n:
        raise ValueError(f"got stats for {len(stats)} layers, graph has {n}")
    neurons = _per_layer(neuron, n, "neuron")
    upper = _per_layer(n_max, n, "n_max")
    lower = _per_layer(n_min, n, "n_min")
    input_shape = graph.input_shape
    if input_shape is None and calib is not None:
        input_shape = _as_batches(calib)[0].shape[1:]

    layers, report = [], ConversionReport()
    max_prev, prev_qp = 1.0, None
    for i, layer in enumerate(graph.layers):
        w_hat, b_hat, max_cur = normalized_layer_params(
            layer, i, max_prev, stats[i].max_out, weight_bits, prev_qp
        )
        spec = layer.spec
        snn = scale_aware_map(
            w_hat, b_hat, v_th, kind=spec.kind, stride=spec.stride, padding=spec.padding,
            weight_bits=weight_bits or layer.weight_bits, neuron=neurons[i],
            n_max=float(upper[i]), n_min=float(lower[i]), name=spec.name,
        )
        snn.max_in, snn.max_out = float(stats[i].max_in), float(max_cur)
        layers.append(snn)
        report.layers.append(LayerReport(
            index=i, s_l=snn.min_gap_s, S_l=snn.scale_S, bits_used=snn.bits_used,
            weight_bits=snn.weight_bits, int_threshold=snn.int_threshold,
            max_round_err=float(np.abs(snn.real_weights() - w_hat).max()),
        ))
        max_prev, prev_qp = max_cur, layer.activation_qparams()
    model = SnnModel(layers=layers, v_th=v_th, weight_bits=weight_bits, input_shape=input_shape)
    return model, report


def normalized_activations(graph: LayerGraph, maxima: Iterable[float], x,
                           weight_bits: int | None = None) -> list[np.ndarray]:
    """Activations of the normalized ANN, each clipped to ``[0, 1]``.

    This is what the SNN's per-layer firing rates approximate; it is built
    from the graph and the activation maxima only, never from the integer
    weights.
    """
    maxima = list(maxima)
    x = np.asarray(x, dtype=np.float64)
    x = x[None] if x.ndim == 3 else x
    acts, max_prev, prev_qp = [], 1.0, None
    for i, layer in enumerate(graph.layers):
        w_hat, b_hat, max_cur = normalized_layer_params(layer, i, max_prev, maxima[i], weight_bits, prev_qp)
        spec = ConvSpec(layer.spec.kind, w_hat, b_hat, layer.spec.stride, layer.spec.padding)
        x = np.clip(conv2d(x, spec), 0.0, 1.0)
        acts.append(x)
        max_prev, prev_qp = max_cur, layer.activation_qparams()
    return acts
