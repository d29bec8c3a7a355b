"""Quantized-ANN to low-bit spiking network conversion and inference."""
from .backend import name as backend_name
from .convert import (
    ConversionReport,
    LayerStats,
    SnnLayer,
    SnnModel,
    collect_stats,
    convert_model,
    layernorm_convert,
    normalized_activations,
    quantized_layernorm_convert,
    scale_aware_map,
)
from .engine import (
    NeuronState,
    RateAccumulator,
    Session,
    encode_input,
    fewdif_step,
    if_step,
    run_continuous,
    run_integer,
    run_windowed,
)
from .graph import ConvLayer, LayerGraph, MaxPool2d, UnsupportedLayerError, Upsample2d
from .modelio import load_model, model_size_report, save_model
from .quant import BatchNormSpec, QuantParams, calibrate_qparams, dequantize, fake_quant, fold_batchnorm, qrelu, quantize
from .tensor import ConvSpec, conv2d, relu, transpose_conv2d

__version__ = "0.1.0"
