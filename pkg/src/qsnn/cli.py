"""Command-line front end: qat-train, calibrate, convert, simulate, stream, bench, verify.

Failures print one line to stderr, ``qsnn-error category=<c> message=<json string>``;
usage problems (bad flags, missing files, wrong model kind, unsupported
layers) exit 2, runtime failures exit 1.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time

import numpy as np

from . import backend, convert, engine, modelio, qat, synthetic
from .convert import LayerStats, SnnModel
from .graph import UnsupportedLayerError

BENCH_COLUMNS = ("mode", "backend", "steps", "frames", "outputs", "network_steps",
                 "steps_per_output", "seconds", "steps_per_sec")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load(path, want: str):
    try:
        model = modelio.load_model(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    have = "snn" if isinstance(model, SnnModel) else "qann"
    if have != want:
        raise UsageError(f"{path} holds a {have} model, this command needs a {want} model")
    return model


def _input_shape(model, what="model"):
    if model.input_shape is None:
        raise UsageError(f"{what} does not record an input shape; pass --input with an image file")
    return tuple(model.input_shape)


def _read_image(source: str, shape):
    seed = synthetic.parse_seed(source)
    if seed is not None:
        return synthetic.random_images(seed, 1, shape)[0]
    try:
        return np.load(source).astype(np.float64)
    except FileNotFoundError:
        raise UsageError(f"input not found: {source}") from None


def _write_stats(path, stats, samples, percentile):
    doc = {"format": "qsnn-stats", "samples": samples, "percentile": percentile,
           "layers": [{"max_in": s.max_in, "max_out": s.max_out} for s in stats]}
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")


def _read_stats(path):
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise UsageError(f"stats file not found: {path}") from None
    return [LayerStats(r["max_in"], r["max_out"]) for r in doc["layers"]]


# --- commands ---------------------------------------------------------------

def cmd_qat_train(args):
    try:
        with open(args.config) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise UsageError(f"config not found: {args.config}") from None
    cfg = qat.TrainConfig(**{k: v for k, v in raw.items() if k in qat.TrainConfig.__dataclass_fields__})
    size = raw.get("size", 8)
    graph = qat.toy_graph(raw.get("init_seed", cfg.seed), raw.get("hidden", 8), size)
    data = qat.toy_dataset(raw.get("data_seed", cfg.seed), raw.get("samples", 256), size)
    start = qat.evaluate_loss(qat.apply_bits(graph, cfg), *data)
    trained = qat.train_toy(graph, data, cfg)
    end = qat.evaluate_loss(trained, *data)
    modelio.save_model(trained, args.out)
    print(f"initial_loss={start!r} final_loss={end!r} ratio={start / end!r}")


def cmd_calibrate(args):
    graph = _load(args.model, "qann")
    images = synthetic.load_images(args.data, _input_shape(graph), args.samples) \
        if synthetic.parse_seed(args.data) is not None else _load_dir(args.data)
    stats = convert.collect_stats(graph, images, args.percentile)
    _write_stats(args.out, stats, len(images), args.percentile)
    for i, s in enumerate(stats):
        print(f"index={i} max_in={s.max_in!r} max_out={s.max_out!r}")


def _load_dir(path):
    try:
        return synthetic.load_images(path, None)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def cmd_convert(args):
    graph = _load(args.model, "qann")
    stats = _read_stats(args.stats)
    try:
        model, report = convert.convert_model(graph, stats=stats, v_th=args.vth, neuron=args.neuron,
                                              n_max=args.nmax, n_min=args.nmin, weight_bits=args.bits)
    except UnsupportedLayerError as exc:
        raise UsageError(str(exc)) from None
    modelio.save_model(model, args.out)
    print(report.to_table())
    for line in report.to_records():
        print(line)


def cmd_simulate(args):
    model = _load(args.model, "snn")
    if args.input.endswith(".spks"):
        frames = modelio.iter_spikes(args.input)
        session = engine.Session(model, args.datapath)
        acc = engine.RateAccumulator()
        for _, frame in zip(range(args.steps), frames):
            acc.add(session.step(frame)[-1])
        if acc.steps == 0:
            raise UsageError(f"{args.input} holds no frames")
        rates = acc.rate()
    else:
        image = _read_image(args.input, _input_shape(model))
        rates = engine.run_windowed(model, image, args.steps, encoding=args.encoding,
                                    seed=args.seed, datapath=args.datapath).output
    np.save(args.out, rates)
    print(f"steps={args.steps} mean_rate={float(rates.mean())!r} out={args.out}")


def cmd_stream(args):
    model = _load(args.model, "snn")
    try:
        modelio.spikes_header(args.input)
    except FileNotFoundError:
        raise UsageError(f"input not found: {args.input}") from None
    result = engine.run_continuous(model, modelio.iter_spikes(args.input), args.warmup, args.window,
                                   datapath=args.datapath)
    out = np.stack(result.outputs) if result.outputs else np.zeros((0,))
    np.save(args.out, out)
    print(f"frames={result.network_steps} outputs={len(result.outputs)} "
          f"steps_per_output={result.steps_per_output!r} out={args.out}")


def cmd_bench(args):
    model = _load(args.model, "snn")
    if args.backend:
        backend.use(args.backend)
    image = _read_image(args.input, _input_shape(model))
    start = time.perf_counter()
    if args.mode == "windowed":
        for _ in range(args.frames):
            engine.run_windowed(model, image, args.steps)
        outputs, steps = args.frames, args.frames * args.steps
        per_output = steps / outputs
    else:
        stream = (image for _ in range(args.steps - 1 + args.frames))
        result = engine.run_continuous(model, stream, args.steps)
        outputs, steps, per_output = len(result.outputs), result.network_steps, result.steps_per_output
    seconds = time.perf_counter() - start
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(BENCH_COLUMNS)
    writer.writerow([args.mode, backend.name(), args.steps, args.frames, outputs, steps,
                     f"{per_output:g}", f"{seconds:.6f}", f"{steps / seconds:.1f}"])


def cmd_verify(args):
    model = _load(args.model, "snn")
    graph = _load(args.against, "qann")
    if len(graph.layers) != len(model.layers):
        raise UsageError(f"{args.against} has {len(graph.layers)} layers, {args.model} has {len(model.layers)}")
    images = synthetic.load_images(args.data, _input_shape(model), args.samples)
    maxima = [layer.max_out for layer in model.layers]
    errs = np.zeros(len(model.layers))
    for image in images:
        acts = convert.normalized_activations(graph, maxima, image, model.weight_bits)
        rates = engine.run_windowed(model, image, args.steps, datapath=args.datapath).rates
        errs += [np.abs(r - a).mean() for r, a in zip(rates, acts)]
    errs /= len(images)
    for i, e in enumerate(errs):
        print(f"layer={i} mae={float(e)!r}")
    print(f"output_mae={float(errs[-1])!r}")


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qsnn", description="Quantized ANN to low-bit SNN toolchain.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("qat-train", help="train the toy QANN from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_qat_train)

    s = sub.add_parser("calibrate", help="collect per-layer activation maxima")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="directory of .npy images or synthetic:<seed>")
    s.add_argument("--samples", type=int, default=32)
    s.add_argument("--percentile", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("convert", help="convert a QANN into an SNN")
    s.add_argument("--model", required=True)
    s.add_argument("--stats", required=True)
    s.add_argument("--bits", type=int, default=None)
    s.add_argument("--vth", type=float, default=1.0)
    s.add_argument("--neuron", choices=convert.NEURON_KINDS, default="if")
    s.add_argument("--nmax", type=float, default=2.0)
    s.add_argument("--nmin", type=float, default=-1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("simulate", help="windowed inference on one input")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True, help=".npy image, synthetic:<seed>, or .spks stream")
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--datapath", choices=engine.DATAPATHS, default="real")
    s.add_argument("--encoding", choices=engine.ENCODINGS, default="analog")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("stream", help="continuous inference over an SPKS stream")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--warmup", type=int, required=True)
    s.add_argument("--window", type=int, default=None)
    s.add_argument("--datapath", choices=engine.DATAPATHS, default="real")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stream)

    s = sub.add_parser("bench", help="steps per output and throughput, as CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--mode", choices=("windowed", "continuous"), required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--input", default="synthetic:0")
    s.add_argument("--backend", choices=backend.available(), default=None)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("verify", help="per-layer firing-rate vs activation MAE")
    s.add_argument("--model", required=True)
    s.add_argument("--against", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--data", default="synthetic:0")
    s.add_argument("--samples", type=int, default=4)
    s.add_argument("--datapath", choices=engine.DATAPATHS, default="real")
    s.set_defaults(func=cmd_verify)
    return p


def _fail(category: str, exc: Exception, code: int) -> int:
    print(f"qsnn-error category={category} message={json.dumps(str(exc))}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except modelio.ModelFormatError as exc:
        return _fail("format", exc, 2)
    except (ValueError, OverflowError, OSError) as exc:
        return _fail("runtime", exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
