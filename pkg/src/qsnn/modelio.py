"""Model files and spike streams.

A model is two files: ``<path>``, a JSON manifest (sorted keys, so equal
models give equal bytes), and ``<path>.bin``, the binary blob every array
lives in. The manifest records each array's offset, length and encoding
plus the blob's SHA-256.

Blob encodings (all little-endian):

``int4``
    two codes per byte, earlier element in the low nibble, two's
    complement per nibble; an odd count leaves the last high nibble 0.
``int8`` / ``int16`` / ``int32``
    one signed code per 1, 2 or 4 bytes.
``float32`` / ``float64``
    IEEE reals.

SPKS spike streams: magic ``b"SPKS"``, ``u16`` version, frame shape as four
``u32``, ``u64`` frame count, then each frame bit-packed row-major, LSB
first within a byte, padded to whole bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .convert import SnnLayer, SnnModel
from .graph import ConvLayer, LayerGraph, MaxPool2d, Upsample2d
from .quant import BatchNormSpec
from .tensor import ConvSpec

FORMAT = "qsnn-model"
FORMAT_VERSION = 1
SPKS_MAGIC = b"SPKS"
SPKS_VERSION = 1
_SPKS_HEADER = struct.Struct("<4sH4IQ")


class ModelFormatError(ValueError):
    """A model file could not be read."""


class ChecksumError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class TruncatedBlobError(ModelFormatError):
    pass


def blob_path(path) -> str:
    return os.fspath(path) + ".bin"


# --- packing -----------------------------------------------------------------

def pack_int4(codes) -> bytes:
    codes = np.asarray(codes, dtype=np.int64).ravel()
    if codes.size and (codes.min() < -8 or codes.max() > 7):
        raise ValueError("int4 codes must lie in [-8, 7]")
    nib = (codes & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).tobytes()


def unpack_int4(data: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    nib = np.empty(raw.size * 2, dtype=np.int8)
    nib[0::2] = raw & 0xF
    nib[1::2] = raw >> 4
    nib = nib[:count]
    return np.where(nib > 7, nib - 16, nib).astype(np.int32)


_NUMERIC = {"int8": "<i1", "int16": "<i2", "int32": "<i4", "float32": "<f4", "float64": "<f8"}


def encode_array(values, encoding: str) -> bytes:
    if encoding == "int4":
        return pack_int4(values)
    dtype = np.dtype(_NUMERIC[encoding])
    values = np.asarray(values)
    if dtype.kind == "i":
        info = np.iinfo(dtype)
        if values.size and (values.min() < info.min or values.max() > info.max):
            raise ValueError(f"values do not fit {encoding}")
    return values.astype(dtype).tobytes()


def decode_array(data: bytes, encoding: str, shape) -> np.ndarray:
    count = int(np.prod(shape, dtype=np.int64))
    if encoding == "int4":
        return unpack_int4(data, count).reshape(shape)
    out = np.frombuffer(data, dtype=_NUMERIC[encoding], count=count)
    return out.astype(np.int32 if out.dtype.kind == "i" else np.float64).reshape(shape)


def encoded_size(encoding: str, count: int) -> int:
    if encoding == "int4":
        return (count + 1) // 2
    return count * np.dtype(_NUMERIC[encoding]).itemsize


def weight_encoding(bits: int) -> str:
    for width in (4, 8, 16, 32):
        if bits <= width:
            return f"int{width}"
    raise ValueError(f"weights need {bits} bits, more than 32")


class _BlobWriter:
    def __init__(self):
        self.parts = []
        self.offset = 0
        self.sections: dict[str, int] = {}

    def add(self, values, encoding: str, section: str) -> dict:
        values = np.asarray(values)
        data = encode_array(values, encoding)
        record = {"offset": self.offset, "length": len(data), "encoding": encoding, "shape": list(values.shape)}
        self.parts.append(data)
        self.offset += len(data)
        self.sections[section] = self.sections.get(section, 0) + len(data)
        return record

    def blob(self) -> bytes:
        return b"".join(self.parts)


class _BlobReader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.spans = []

    def get(self, record: dict) -> np.ndarray:
        off, length, enc = record["offset"], record["length"], record["encoding"]
        shape = tuple(record["shape"])
        if off < 0 or off + length > len(self.blob):
            raise ModelFormatError(f"array at offset {off} (+{length}) lies outside the {len(self.blob)}-byte blob")
        if length != encoded_size(enc, int(np.prod(shape, dtype=np.int64))):
            raise ModelFormatError(f"array at offset {off}: length {length} does not match shape {list(shape)}")
        self.spans.append((off, off + length))
        return decode_array(self.blob[off : off + length], enc, shape)

    def check_disjoint(self) -> None:
        spans = sorted(s for s in self.spans if s[1] > s[0])
        for (_, end), (start, _) in zip(spans, spans[1:]):
            if start < end:
                raise ModelFormatError("overlapping arrays in blob")


# --- model encoding ----------------------------------------------------------

def _snn_records(model: SnnModel, w: _BlobWriter) -> dict:
    layers = []
    for layer in model.layers:
        layers.append({
            "kind": layer.kind, "stride": layer.stride, "padding": layer.padding, "name": layer.name,
            "neuron": layer.neuron, "n_max": layer.n_max, "n_min": layer.n_min,
            "s_l": layer.min_gap_s, "S_l": layer.scale_S, "int_threshold": layer.int_threshold,
            "weight_bits": layer.weight_bits, "max_in": layer.max_in, "max_out": layer.max_out,
            "weights": w.add(layer.int_weights, weight_encoding(layer.weight_bits), "weights"),
            "int_bias": w.add(layer.int_bias, "int32", "int_bias"),
            "bias": w.add(layer.bias, "float64", "real_bias"),
        })
    return {"v_th": model.v_th, "weight_bits": model.weight_bits,
            "input_shape": list(model.input_shape) if model.input_shape else None, "layers": layers}


def _snn_from_records(doc: dict, r: _BlobReader) -> SnnModel:
    layers = []
    for rec in doc["layers"]:
        layers.append(SnnLayer(
            kind=rec["kind"], stride=rec["stride"], padding=rec["padding"],
            int_weights=r.get(rec["weights"]), int_bias=r.get(rec["int_bias"]), bias=r.get(rec["bias"]),
            min_gap_s=rec["s_l"], scale_S=rec["S_l"], int_threshold=rec["int_threshold"],
            weight_bits=rec["weight_bits"], neuron=rec["neuron"], n_max=rec["n_max"], n_min=rec["n_min"],
            max_in=rec["max_in"], max_out=rec["max_out"], name=rec["name"],
        ))
    shape = doc.get("input_shape")
    return SnnModel(layers, v_th=doc["v_th"], weight_bits=doc["weight_bits"], input_shape=tuple(shape) if shape else None)


def _qann_records(graph: LayerGraph, w: _BlobWriter, real: str) -> dict:
    layers = []
    for layer in graph.layers:
        if isinstance(layer, MaxPool2d):
            layers.append({"type": "maxpool", "size": layer.size, "name": layer.name})
            continue
        if isinstance(layer, Upsample2d):
            layers.append({"type": "upsample", "factor": layer.factor, "name": layer.name})
            continue
        spec = layer.spec
        rec = {
            "type": "conv", "kind": spec.kind, "stride": spec.stride, "padding": spec.padding, "name": spec.name,
            "activation": layer.activation, "ceiling": layer.ceiling,
            "activation_bits": layer.activation_bits, "weight_bits": layer.weight_bits,
            "weights": w.add(spec.kernel, real, "weights"),
            "bias": w.add(spec.bias, real, "real_bias"),
            "batchnorm": None,
        }
        if layer.batchnorm is not None:
            bn = layer.batchnorm
            rec["batchnorm"] = {"eps": bn.eps, **{
                name: w.add(getattr(bn, name), real, "batchnorm")
                for name in ("gamma", "beta", "running_mean", "running_var")
            }}
        layers.append(rec)
    return {"input_shape": list(graph.input_shape) if graph.input_shape else None, "layers": layers}


def _qann_from_records(doc: dict, r: _BlobReader) -> LayerGraph:
    layers = []
    for rec in doc["layers"]:
        if rec["type"] == "maxpool":
            layers.append(MaxPool2d(rec["size"], rec["name"]))
        elif rec["type"] == "upsample":
            layers.append(Upsample2d(rec["factor"], rec["name"]))
        elif rec["type"] == "conv":
            bn = rec["batchnorm"]
            if bn is not None:
                bn = BatchNormSpec(*(r.get(bn[k]) for k in ("gamma", "beta", "running_mean", "running_var")), eps=bn["eps"])
            spec = ConvSpec(rec["kind"], r.get(rec["weights"]), r.get(rec["bias"]), rec["stride"], rec["padding"], rec["name"])
            layers.append(ConvLayer(spec, rec["activation"], rec["ceiling"], rec["activation_bits"], rec["weight_bits"], bn))
        else:
            raise ModelFormatError(f"unknown layer type {rec['type']!r}")
    shape = doc.get("input_shape")
    return LayerGraph(layers, input_shape=tuple(shape) if shape else None)


@dataclass
class Encoded:
    manifest: bytes
    blob: bytes
    sections: dict

    @property
    def total(self) -> int:
        return len(self.manifest) + len(self.blob)


def encode_model(model, real_bits: int = 64) -> Encoded:
    """Serialize to ``(manifest, blob)`` bytes.

    ``real_bits`` (32 or 64) sets how a QANN's real arrays are stored; 64
    round-trips exactly, 32 is the usual full-precision ANN format.
    """
    w = _BlobWriter()
    if isinstance(model, SnnModel):
        kind, doc = "snn", _snn_records(model, w)
    elif isinstance(model, LayerGraph):
        if real_bits not in (32, 64):
            raise ValueError(f"real_bits must be 32 or 64, got {real_bits}")
        kind, doc = "qann", _qann_records(model, w, f"float{real_bits}")
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    blob = w.blob()
    doc.update({
        "format": FORMAT, "format_version": FORMAT_VERSION, "model_kind": kind,
        "blob_size": len(blob), "checksum": {"sha256": hashlib.sha256(blob).hexdigest()},
    })
    manifest = (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode()
    sections = {"manifest": len(manifest), **w.sections}
    return Encoded(manifest, blob, sections)


def decode_model(manifest: bytes, blob: bytes):
    try:
        doc = json.loads(manifest)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ModelFormatError("not a qsnn model manifest")
    if doc.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format_version {doc.get('format_version')!r}; this build reads {FORMAT_VERSION}")
    if len(blob) < doc["blob_size"]:
        raise TruncatedBlobError(f"blob has {len(blob)} bytes, manifest expects {doc['blob_size']}")
    if len(blob) != doc["blob_size"] or hashlib.sha256(blob).hexdigest() != doc["checksum"]["sha256"]:
        raise ChecksumError("blob checksum does not match the manifest")
    reader = _BlobReader(blob)
    try:
        if doc["model_kind"] == "snn":
            model = _snn_from_records(doc, reader)
        elif doc["model_kind"] == "qann":
            model = _qann_from_records(doc, reader)
        else:
            raise ModelFormatError(f"unknown model_kind {doc['model_kind']!r}")
    except KeyError as exc:
        raise ModelFormatError(f"manifest is missing field {exc}") from None
    reader.check_disjoint()
    return model


def save_model(model, path, real_bits: int = 64) -> Encoded:
    enc = encode_model(model, real_bits)
    with open(path, "wb") as f:
        f.write(enc.manifest)
    with open(blob_path(path), "wb") as f:
        f.write(enc.blob)
    return enc


def load_model(path):
    """Load an :class:`SnnModel` or a QANN :class:`LayerGraph`."""
    with open(path, "rb") as f:
        manifest = f.read()
    bp = blob_path(path)
    if not os.path.exists(bp):
        raise FileNotFoundError(f"model blob not found: {bp}")
    with open(bp, "rb") as f:
        blob = f.read()
    return decode_model(manifest, blob)


def model_size_report(model, real_bits: int = 64) -> dict:
    """Bytes per section (manifest, weights, biases, ...) plus ``total``; total equals the on-disk size."""
    enc = encode_model(model, real_bits)
    return {**enc.sections, "total": enc.total}


# --- spike streams -------------------------------------------------------------

def write_spikes(path, frames) -> int:
    """Write binary frames of one shape (up to 4-D, left-padded with 1s); returns the count."""
    frames = np.asarray(frames)
    if frames.size and not np.isin(frames, (0, 1)).all():
        raise ValueError("spike frames must be binary")
    shape = frames.shape[1:]
    if len(shape) > 4:
        raise ValueError(f"frames have {len(shape)} dims, at most 4 allowed")
    shape = (1,) * (4 - len(shape)) + tuple(shape)
    with open(path, "wb") as f:
        f.write(_SPKS_HEADER.pack(SPKS_MAGIC, SPKS_VERSION, *shape, len(frames)))
        for frame in frames:
            f.write(np.packbits(frame.astype(np.uint8).ravel(), bitorder="little").tobytes())
    return len(frames)


def spikes_header(path):
    with open(path, "rb") as f:
        return _read_spks_header(f, path)


def _read_spks_header(f, path):
    raw = f.read(_SPKS_HEADER.size)
    if len(raw) < _SPKS_HEADER.size:
        raise ModelFormatError(f"{path}: truncated SPKS header")
    magic, version, *rest = _SPKS_HEADER.unpack(raw)
    if magic != SPKS_MAGIC:
        raise ModelFormatError(f"{path}: not an SPKS spike stream")
    if version != SPKS_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported SPKS version {version}")
    return tuple(rest[:4]), rest[4]


def iter_spikes(path):
    """Yield frames of shape ``(N, C, H, W)`` as uint8 without loading the whole file."""
    with open(path, "rb") as f:
        shape, count = _read_spks_header(f, path)
        size = int(np.prod(shape))
        nbytes = (size + 7) // 8
        for i in range(count):
            raw = f.read(nbytes)
            if len(raw) < nbytes:
                raise TruncatedBlobError(f"{path}: frame {i} of {count} is truncated")
            bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=size, bitorder="little")
            yield bits.reshape(shape)


def read_spikes(path) -> np.ndarray:
    shape, _ = spikes_header(path)
    frames = list(iter_spikes(path))
    return np.stack(frames) if frames else np.zeros((0, *shape), dtype=np.uint8)
