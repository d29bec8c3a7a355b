"""Seeded synthetic data and random networks, so the pipeline runs without datasets."""
from __future__ import annotations

import os

import numpy as np

from .graph import ConvLayer, LayerGraph
from .tensor import ConvSpec

# (kind, kernel, stride, padding) for each layer flavour random_qann can draw
GEOMETRY = {
    "conv": ("conv", 3, 1, 1),
    "strided_conv": ("strided_conv", 3, 2, 1),
    "transpose_conv": ("transpose_conv", 2, 2, 0),
}


def blob_image(rng: np.random.Generator, size: int = 8, sigma: float = 1.0):
    """One bright Gaussian blob on a dark background, and its centre in ``[0, 1]^2``."""
    cy, cx = rng.uniform(1.0, size - 2.0, 2)
    yy, xx = np.mgrid[0:size, 0:size]
    img = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return img[None], np.array([cy, cx]) / (size - 1)


def blob_dataset(seed: int, n: int = 256, size: int = 8, sigma: float = 1.0):
    """Blob coordinate regression: inputs ``(n, 1, size, size)``, targets ``(n, 2, 1, 1)``."""
    rng = np.random.default_rng(seed)
    xs, ys = zip(*(blob_image(rng, size, sigma) for _ in range(n)))
    return np.stack(xs), np.stack(ys)[:, :, None, None]


def random_images(seed: int, n: int, shape) -> np.ndarray:
    """Uniform ``[0, 1]`` images of shape ``(n, *shape)``."""
    return np.random.default_rng(seed).random((n, *shape))


def parse_seed(source: str) -> int | None:
    """``"synthetic:<seed>"`` -> seed; anything else -> ``None``."""
    if not source.startswith("synthetic:"):
        return None
    try:
        return int(source.split(":", 1)[1])
    except ValueError:
        raise ValueError(f"bad synthetic data source {source!r}; expected synthetic:<integer seed>") from None


def load_images(source: str, shape, n: int = 32) -> np.ndarray:
    """Images from ``synthetic:<seed>`` or from every ``.npy`` file in a directory."""
    seed = parse_seed(source)
    if seed is not None:
        return random_images(seed, n, shape)
    if not os.path.isdir(source):
        raise FileNotFoundError(f"data directory not found: {source}")
    files = sorted(f for f in os.listdir(source) if f.endswith(".npy"))
    if not files:
        raise FileNotFoundError(f"no .npy files in {source}")
    arrays = []
    for f in files:
        a = np.load(os.path.join(source, f)).astype(np.float64)
        arrays.append(a[None] if a.ndim == 3 else a)
    return np.concatenate(arrays)


def random_codes(rng: np.random.Generator, shape, bits: int) -> np.ndarray:
    """Random symmetric codes with at least one at full scale, so calibration recovers the scale."""
    qmax = 2 ** (bits - 1) - 1
    codes = rng.integers(-qmax, qmax + 1, size=shape)
    codes.flat[rng.integers(codes.size)] = qmax
    return codes


def random_qann(seed: int, channels=(3, 8, 8, 4), kinds=None, input_hw: int = 16,
                weight_bits: int = 4, activation: str = "relu", bias_scale: float = 0.1) -> LayerGraph:
    """Random quantized conv net whose kernels sit exactly on a ``weight_bits`` grid.

    ``kinds`` picks a layer flavour per layer (default: all plain convs).
    """
    rng = np.random.default_rng(seed)
    n = len(channels) - 1
    kinds = list(kinds) if kinds is not None else ["conv"] * n
    if len(kinds) != n:
        raise ValueError(f"{len(kinds)} layer kinds for {n} layers")
    layers = []
    for i, kind in enumerate(kinds):
        kind, k, stride, pad = GEOMETRY[kind]
        cin, cout = channels[i], channels[i + 1]
        scale = 2.0 / (np.sqrt(cin * k * k) * (2 ** (weight_bits - 1) - 1))
        kernel = random_codes(rng, (cout, cin, k, k), weight_bits) * scale
        bias = rng.normal(0.0, bias_scale, cout)
        layers.append(ConvLayer(ConvSpec(kind, kernel, bias, stride, pad, name=f"{kind}{i}"),
                                activation=activation, weight_bits=weight_bits))
    return LayerGraph(layers, input_shape=(channels[0], input_hw, input_hw))
