"""Compare compiled and pure-Python kernels, then time a micro-model training step.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``.
"""

import argparse
import time

import numpy as np

from evtlab import tensor as T
from evtlab._kernels import BACKEND
from evtlab.bench import format_results, run_benchmarks
from evtlab.config import MICRO
from evtlab.model import EVT


def train_step_seconds(repeat):
    model = EVT(MICRO, seed=0)
    images = np.random.default_rng(0).normal(size=(32, 3, 32, 32))
    labels = np.arange(32) % MICRO.num_classes
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        T.backward(T.cross_entropy(model(images), labels))
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    print(format_results(run_benchmarks(repeat=args.repeat)), end="")
    print(f"micro train step (batch 32, {BACKEND} backend): {train_step_seconds(args.repeat) * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
