"""Compare the compiled and numpy kernel backends on the same workloads.

Usage: python benchmarks/bench_backends.py [--steps 200] [--repeat 3]

Prints a CSV row per (workload, backend) and checks that both backends
produce identical spike trains before timing them.
"""
import argparse
import csv
import sys
import time

import numpy as np

from qsnn import backend, convert, engine, synthetic


def workloads(seed):
    shapes = {
        "small_3layer": ((3, 8, 8, 4), ["conv", "strided_conv", "transpose_conv"], 16),
        "wide_3layer": ((3, 16, 32, 16), ["conv", "strided_conv", "conv"], 32),
    }
    for name, (channels, kinds, hw) in shapes.items():
        graph = synthetic.random_qann(seed, channels=channels, kinds=kinds, input_hw=hw)
        calib = synthetic.random_images(seed + 1, 4, (channels[0], hw, hw))
        model, _ = convert.convert_model(graph, calib, neuron="fewdif")
        yield name, model, calib[0]


def timed(model, image, steps, datapath, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        result = engine.run_windowed(model, image, steps, datapath=datapath, record=True)
        best = min(best, time.perf_counter() - start)
    return best, result


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    names = backend.available()
    if len(names) < 2:
        print("compiled backend not built; only timing the numpy fallback", file=sys.stderr)
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["workload", "datapath", "backend", "steps", "seconds", "steps_per_sec", "speedup_vs_python"])
    previous = backend.name()
    try:
        for name, model, image in workloads(args.seed):
            for datapath in ("real", "int"):
                times, spikes = {}, {}
                for b in names:
                    backend.use(b)
                    times[b], res = timed(model, image, args.steps, datapath, args.repeat)
                    spikes[b] = res.spikes
                ref = spikes["python"]
                for b in names:
                    if not all(np.array_equal(x, y) for x, y in zip(ref, spikes[b])):
                        raise SystemExit(f"{b} backend disagrees with python on {name}/{datapath}")
                    out.writerow([name, datapath, b, args.steps, f"{times[b]:.4f}",
                                  f"{args.steps / times[b]:.1f}", f"{times['python'] / times[b]:.2f}"])
    finally:
        backend.use(previous)


if __name__ == "__main__":
    main()
