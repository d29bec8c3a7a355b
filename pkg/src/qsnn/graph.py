"""Feed-forward conv networks on the ANN side of the conversion."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import quant
from .quant import BatchNormSpec, QuantParams
from .tensor import ConvSpec, conv2d

ACTIVATIONS = ("relu", "qrelu")


class UnsupportedLayerError(ValueError):
    """A layer the SNN datapath cannot express; the message names the substitution."""


@dataclass
class ConvLayer:
    """Conv (any kind) followed by ReLU or QReLU.

    ``weight_bits`` enables per-tensor weight fake-quantization;
    ``activation_bits`` sets the QReLU grid over ``[0, ceiling]``.
    """

    spec: ConvSpec
    activation: str = "relu"
    ceiling: float = 1.0
    activation_bits: int | None = None
    weight_bits: int | None = None
    batchnorm: BatchNormSpec | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.activation == "qrelu" and self.activation_bits is None:
            self.activation_bits = 8

    @property
    def name(self) -> str:
        return self.spec.name

    def folded(self) -> ConvSpec:
        if self.batchnorm is None:
            return self.spec
        return quant.fold_batchnorm(self.spec, self.batchnorm)

    def weight_qparams(self) -> QuantParams | None:
        if self.weight_bits is None:
            return None
        return quant.calibrate_qparams(self.folded().kernel, self.weight_bits)

    def activation_qparams(self) -> QuantParams | None:
        if self.activation != "qrelu":
            return None
        return quant.activation_qparams(self.activation_bits, self.ceiling)

    def effective_spec(self, quantize_weights: bool = True) -> ConvSpec:
        """Folded spec with fake-quantized kernel (bias stays real, it is stored at 32 bits)."""
        spec = self.folded()
        qp = self.weight_qparams()
        if quantize_weights and qp is not None:
            spec = spec.replace(kernel=quant.fake_quant(spec.kernel, qp))
        return spec

    def activate(self, z: np.ndarray, quantize_activations: bool = True) -> np.ndarray:
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        if quantize_activations:
            return quant.qrelu(z, self.activation_qparams(), self.ceiling)
        return np.clip(z, 0.0, self.ceiling)


@dataclass
class MaxPool2d:
    """Placeholder for pooling in imported graphs; conversion rejects it."""

    size: int = 2
    name: str = ""


@dataclass
class Upsample2d:
    """Placeholder for nearest-neighbour upsampling; conversion rejects it."""

    factor: int = 2
    name: str = ""


_SUBSTITUTIONS = {
    MaxPool2d: ("maxpool", "max-pool must be replaced by strided conv"),
    Upsample2d: ("upsample", "upsample must be replaced by transpose conv"),
}


def layer_label(index: int, layer) -> str:
    kind = "conv" if isinstance(layer, ConvLayer) else _SUBSTITUTIONS.get(type(layer), (type(layer).__name__,))[0]
    name = getattr(layer, "name", "")
    return f"layer {index} ({kind}{': ' + name if name else ''})"


@dataclass
class LayerGraph:
    layers: list = field(default_factory=list)
    input_shape: tuple | None = None  # (C, H, W)

    def validate(self) -> None:
        """Raise ``UnsupportedLayerError`` naming the first layer conversion cannot handle."""
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ConvLayer):
                continue
            hint = _SUBSTITUTIONS.get(type(layer), (None, "only conv layers with ReLU/QReLU are supported"))[1]
            raise UnsupportedLayerError(f"{layer_label(i, layer)}: {hint}")
        if not self.layers:
            raise UnsupportedLayerError("graph has no layers")

    def forward(self, x, *, quantize_weights=True, quantize_activations=True, trace=False):
        """Run the network on an NCHW batch.

        With ``trace=True`` returns ``(output, records)`` where each record
        holds the layer's ``input``, pre-activation ``z`` and ``output``.
        """
        self.validate()
        x = np.asarray(x, dtype=np.float64)
        records = []
        for layer in self.layers:
            z = conv2d(x, layer.effective_spec(quantize_weights))
            y = layer.activate(z, quantize_activations)
            if trace:
                records.append({"input": x, "z": z, "output": y})
            x = y
        return (x, records) if trace else x

    def copy(self) -> "LayerGraph":
        return copy.deepcopy(self)
