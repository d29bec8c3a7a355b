"""Spiking inference: IF/FewdIF neurons, input encoding, windowed and continuous runs.

Three datapaths execute a converted :class:`~qsnn.convert.SnnModel`:

``real``
    float64, scaled domain: integer weights, bias ``b_hat * S_l`` and
    threshold ``V_th * S_l``.
``rounded``
    float64 running the rounded model (integer bias and threshold). This is
    the reference the integer datapath must match spike-for-spike.
``int``
    32-bit integer accumulation with overflow detection. With an analog
    input the first layer acts as the encoder and runs on the ``rounded``
    path; everything past its spikes is integer-only.

Layers update synchronously: layer ``l`` consumes the spikes layer ``l-1``
emitted in the same global step.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .convert import SnnLayer, SnnModel
from .tensor import INT32_MAX, INT32_MIN, conv_output_hw, correlate, scatter

log = logging.getLogger(__name__)

ENCODINGS = ("analog", "bernoulli")
DATAPATHS = ("real", "rounded", "int")


class InputEncoder:
    """Per-step layer-1 input for a static image.

    ``analog`` injects the pixel values as current every step;
    ``bernoulli`` emits a spike with probability equal to the pixel value,
    from a generator seeded with ``seed``.
    """

    def __init__(self, image, mode: str = "analog", seed: int | None = None):
        if mode not in ENCODINGS:
            raise ValueError(f"encoding must be one of {ENCODINGS}, got {mode!r}")
        image = np.asarray(image, dtype=np.float64)
        if image.size and (image.min() < 0.0 or image.max() > 1.0 or not np.all(np.isfinite(image))):
            raise ValueError("input values must lie in [0, 1]; normalize the image first")
        self.image = image[None] if image.ndim == 3 else image
        self.mode = mode
        self.rng = np.random.default_rng(seed)

    @property
    def analog(self) -> bool:
        return self.mode == "analog"

    def frame(self) -> np.ndarray:
        if self.analog:
            return self.image
        return (self.rng.random(self.image.shape) < self.image).astype(np.uint8)

    def __iter__(self):
        while True:
            yield self.frame()


def encode_input(image, mode: str = "analog", seed: int | None = None) -> InputEncoder:
    return InputEncoder(image, mode, seed)


@dataclass
class NeuronState:
    """Membrane potentials of one layer.

    Real potentials are stored as ``v + v_lo`` (double-double), integer
    ones in int64 with a 32-bit range check on every update. ``bounds`` is
    the absolute FewdIF clamp interval.
    """

    v: np.ndarray
    threshold: float
    kind: str = "if"
    bounds: tuple | None = None
    v_lo: np.ndarray | None = None

    @classmethod
    def zeros(cls, shape, threshold, kind="if", n_max=2.0, n_min=-1.0, integer=False):
        if integer:
            bounds = (int(np.ceil(n_min * threshold)), int(np.floor(n_max * threshold)))
            return cls(np.zeros(shape, dtype=np.int64), int(threshold), kind, bounds if kind == "fewdif" else None)
        bounds = (n_min * threshold, n_max * threshold) if kind == "fewdif" else None
        return cls(np.zeros(shape), float(threshold), kind, bounds, np.zeros(shape))

    @property
    def integer(self) -> bool:
        return self.v_lo is None

    def potential(self) -> np.ndarray:
        return self.v.copy() if self.integer else self.v + self.v_lo

    def reset(self) -> None:
        self.v[...] = 0
        if self.v_lo is not None:
            self.v_lo[...] = 0.0


def _advance(state: NeuronState, u: np.ndarray, clamp: bool) -> np.ndarray:
    kern = backend.get()
    spikes = np.empty(state.v.size, dtype=np.uint8)
    lo, hi = state.bounds if clamp else (0, 0)
    if state.integer:
        u = np.ascontiguousarray(u, dtype=np.int64).ravel()
        bad = kern.if_update_int(state.v.reshape(-1), u, state.threshold, lo, hi, clamp, spikes)
        if bad:
            raise OverflowError(f"membrane potential left the 32-bit range in {bad} neurons")
    else:
        u = np.ascontiguousarray(u, dtype=np.float64).ravel()
        kern.if_update_real(state.v.reshape(-1), state.v_lo.reshape(-1), u,
                            float(state.threshold), float(lo), float(hi), clamp, spikes)
    return spikes.reshape(state.v.shape)


def if_step(state: NeuronState, u) -> np.ndarray:
    """Integrate ``u``; where ``V >= threshold`` spike and subtract the threshold."""
    return _advance(state, np.asarray(u), clamp=False)


def fewdif_step(state: NeuronState, u) -> np.ndarray:
    """IF step, then clamp V into ``[N_min*th, N_max*th]``."""
    if state.kind != "fewdif" or state.bounds is None:
        raise ValueError("fewdif_step needs a FewdIF neuron state with bounds")
    return _advance(state, np.asarray(u), clamp=True)


def neuron_step(state: NeuronState, u) -> np.ndarray:
    return fewdif_step(state, u) if state.kind == "fewdif" else if_step(state, u)


def simulate_neuron(inputs, threshold: float = 1.0, scale: float = 1.0, kind: str = "if",
                    n_max: float = 2.0, n_min: float = -1.0) -> np.ndarray:
    """Spike train of neurons driven by ``inputs[t]``, everything multiplied by ``scale``.

    Scaling the input current and the threshold (and with it the clamp
    bounds) by the same ``scale > 0`` leaves the spike train unchanged.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    inputs = np.asarray(inputs, dtype=np.float64)
    state = NeuronState.zeros(inputs.shape[1:], threshold * scale, kind, n_max, n_min)
    out = np.empty(inputs.shape, dtype=np.uint8)
    for t in range(inputs.shape[0]):
        out[t] = neuron_step(state, inputs[t] * scale)
    return out


class RateAccumulator:
    """Spike counts over all steps, plus an optional sliding window of recent frames."""

    def __init__(self, window: int | None = None):
        self.counts = None
        self.steps = 0
        self.window = window
        self._recent = deque()
        self._window_sum = None

    def add(self, spikes: np.ndarray) -> None:
        if self.counts is None:
            self.counts = np.zeros(spikes.shape, dtype=np.int64)
            self._window_sum = np.zeros(spikes.shape, dtype=np.int64)
        self.counts += spikes
        self.steps += 1
        if self.window:
            self._recent.append(spikes)
            self._window_sum += spikes
            if len(self._recent) > self.window:
                self._window_sum -= self._recent.popleft()

    def rate(self) -> np.ndarray:
        return self.counts / self.steps

    def window_rate(self) -> np.ndarray:
        return self._window_sum / len(self._recent)


class _LayerPlan:
    """Per-layer constants for one datapath."""

    def __init__(self, layer: SnnLayer, v_th: float, datapath: str):
        self.layer = layer
        self.transpose = layer.kind == "transpose_conv"
        self.clamp = layer.neuron == "fewdif"
        self.integer = datapath == "int"
        if datapath == "int":
            self.weight = layer.int_weights.astype(np.int64)
            self.bias = layer.int_bias.astype(np.int64)
            self.threshold = layer.int_threshold
            self.bounds = layer.int_bounds()
        elif datapath == "rounded":
            self.weight = layer.int_weights.astype(np.float64)
            self.bias = layer.int_bias.astype(np.float64)
            self.threshold = float(layer.int_threshold)
            self.bounds = tuple(float(b) for b in layer.int_bounds())
        else:
            self.weight = layer.int_weights.astype(np.float64)
            self.bias = layer.bias * layer.scale_S
            self.threshold = v_th * layer.scale_S
            self.bounds = (layer.n_min * self.threshold, layer.n_max * self.threshold)
        self.bias = self.bias.reshape(1, -1, 1, 1)

    def out_hw(self, in_hw):
        return conv_output_hw(self.layer.kind, in_hw, self.weight.shape[2:], self.layer.stride, self.layer.padding)

    def new_state(self, shape) -> NeuronState:
        kind = self.layer.neuron
        if self.integer:
            state = NeuronState(np.zeros(shape, dtype=np.int64), self.threshold, kind)
        else:
            state = NeuronState(np.zeros(shape), self.threshold, kind, v_lo=np.zeros(shape))
        state.bounds = self.bounds if self.clamp else None
        return state

    def drive(self, x: np.ndarray) -> np.ndarray:
        """Input current from analog values or a binary spike frame."""
        layer = self.layer
        hw = self.out_hw(x.shape[2:])
        if x.dtype == np.uint8:
            u = backend.get().spike_conv2d(x, self.weight, layer.stride, layer.padding, self.transpose, hw)
        elif self.transpose:
            u = scatter(x, self.weight, layer.stride, layer.padding, hw)
        else:
            u = correlate(x, self.weight, layer.stride, layer.padding)
        return u + self.bias


class Session:
    """Mutable inference state for one model on one datapath.

    The model is only read, so many sessions may share it.
    """

    def __init__(self, model: SnnModel, datapath: str = "real"):
        if datapath not in DATAPATHS:
            raise ValueError(f"datapath must be one of {DATAPATHS}, got {datapath!r}")
        if not model.layers:
            raise ValueError("model has no layers")
        self.model = model
        self.datapath = datapath
        self.plans = [_LayerPlan(layer, model.v_th, datapath) for layer in model.layers]
        self._encoder_plan = _LayerPlan(model.layers[0], model.v_th, "rounded") if datapath == "int" else None
        self.states: list[NeuronState] | None = None
        self.steps = 0
        self._analog_key = None
        self._analog_drive = None

    def reset(self) -> None:
        """Zero every membrane potential (the windowed-inference reset)."""
        if self.states is not None:
            for s in self.states:
                s.reset()
        self.steps = 0

    def _first_plan(self, analog: bool) -> _LayerPlan:
        return self._encoder_plan if analog and self._encoder_plan is not None else self.plans[0]

    def _first_drive(self, frame: np.ndarray) -> np.ndarray:
        analog = frame.dtype != np.uint8
        plan = self._first_plan(analog)
        if not analog:
            return plan.drive(frame)
        if self._analog_key is not frame:
            self._analog_key = frame
            self._analog_drive = plan.drive(frame)
        return self._analog_drive

    def _init_states(self, frame: np.ndarray) -> None:
        analog = frame.dtype != np.uint8
        shape = frame.shape
        self.states = []
        for i, plan in enumerate(self.plans):
            if i == 0:
                plan = self._first_plan(analog)
            shape = (shape[0], plan.layer.out_channels, *plan.out_hw(shape[2:]))
            self.states.append(plan.new_state(shape))
        self._analog_input = analog

    def step(self, frame: np.ndarray) -> list[np.ndarray]:
        """Advance every layer one step; returns each layer's spike frame."""
        frame = _as_frame(frame)
        if self.states is None:
            self._init_states(frame)
        elif (frame.dtype != np.uint8) != self._analog_input:
            raise ValueError("cannot mix analog and spike frames within one session")
        out = []
        x = None
        for i, (plan, state) in enumerate(zip(self.plans, self.states)):
            u = self._first_drive(frame) if i == 0 else plan.drive(x)
            if state.integer and u.size and (u.min() < INT32_MIN or u.max() > INT32_MAX):
                raise OverflowError(f"layer {i}: input current exceeds the 32-bit range")
            try:
                x = neuron_step(state, u)
            except OverflowError as exc:
                raise OverflowError(f"layer {i}: {exc}") from None
            out.append(x)
        self.steps += 1
        return out


def _as_frame(frame) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.dtype == np.bool_:
        frame = frame.astype(np.uint8)
    elif frame.dtype != np.uint8:
        frame = frame.astype(np.float64, copy=False)
    if frame.ndim == 3:
        frame = frame[None]
    if frame.ndim != 4:
        raise ValueError(f"frames must be (C, H, W) or (N, C, H, W), got shape {frame.shape}")
    if frame.dtype == np.uint8:
        if frame.size and frame.max() > 1:
            raise ValueError("spike frames must be binary")
        return np.ascontiguousarray(frame)
    return frame


@dataclass
class SimResult:
    rates: list[np.ndarray]
    steps: int
    spikes: list[np.ndarray] | None = None  # per layer, (steps, N, C, H, W)

    @property
    def output(self) -> np.ndarray:
        return self.rates[-1]

    @property
    def steps_per_output(self) -> float:
        return float(self.steps)


def run_windowed(model: SnnModel, image, steps: int, *, encoding: str = "analog", seed: int | None = None,
                 datapath: str = "real", record: bool = False) -> SimResult:
    """Reset, run ``steps`` steps on one input, decode rates ``N / T`` for every layer."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    enc = encode_input(image, encoding, seed)
    session = Session(model, datapath)
    accs = [RateAccumulator() for _ in model.layers]
    trace = [[] for _ in model.layers] if record else None
    for _ in range(steps):
        for i, spikes in enumerate(session.step(enc.frame())):
            accs[i].add(spikes)
            if record:
                trace[i].append(spikes)
    return SimResult(
        rates=[a.rate() for a in accs],
        steps=steps,
        spikes=[np.stack(t) for t in trace] if record else None,
    )


def run_integer(model: SnnModel, image, steps: int, *, encoding: str = "analog", seed: int | None = None,
                record: bool = False) -> SimResult:
    """Windowed run on the 32-bit integer datapath."""
    return run_windowed(model, image, steps, encoding=encoding, seed=seed, datapath="int", record=record)


@dataclass
class ContinuousResult:
    outputs: list[np.ndarray] = field(default_factory=list)
    network_steps: int = 0
    warmup: int = 0
    if_layers: list[int] = field(default_factory=list)

    @property
    def steps_per_output(self) -> float:
        """Network steps per output once the first output has been produced."""
        if not self.outputs:
            return float("nan")
        return (self.network_steps - (self.warmup - 1)) / len(self.outputs)


def run_continuous(model: SnnModel, stream, warmup: int, window: int | None = None, *,
                   datapath: str = "real", on_step=None) -> ContinuousResult:
    """One network step per incoming frame and no resets.

    From frame ``warmup`` on, every frame yields the output layer's rate
    over the last ``window`` frames (default ``warmup``). ``on_step`` is
    called with the session after each step.
    """
    if warmup < 1:
        raise ValueError(f"warmup must be >= 1, got {warmup}")
    window = window or warmup
    if_layers = [i for i, layer in enumerate(model.layers) if layer.neuron == "if"]
    if if_layers:
        log.warning("continuous inference with plain IF neurons in layers %s; FewdIF is recommended", if_layers)
    session = Session(model, datapath)
    acc = RateAccumulator(window=window)
    result = ContinuousResult(warmup=warmup, if_layers=if_layers)
    for t, frame in enumerate(stream, start=1):
        acc.add(session.step(frame)[-1])
        result.network_steps += 1
        if on_step is not None:
            on_step(session)
        if t >= warmup:
            result.outputs.append(acc.window_rate())
    return result
