"""Timing of the compiled kernels against the pure-Python fallback."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from evtlab._kernels import available_backends, backend_module


@dataclass
class BenchResult:
    kernel: str
    case: str
    backend: str
    best_seconds: float
    same_as_python: bool


def _cases(rng):
    a = rng.normal(size=(8, 64, 32))
    b = rng.normal(size=(8, 32, 64))
    yield "bmm", "8x64x32@8x32x64", lambda m: m.bmm(a, b)
    big_a = rng.normal(size=(4, 196, 64))
    big_b = rng.normal(size=(4, 64, 196))
    yield "bmm", "4x196x64@4x64x196", lambda m: m.bmm(big_a, big_b)
    x = rng.normal(size=(2, 32, 28, 28))
    w = rng.normal(size=(32, 5, 5))
    yield "dwconv2d", "2x32x28x28 k5", lambda m: m.dwconv2d(x, w, 1, 2)
    g = rng.normal(size=(2, 32, 28, 28))
    yield "dwconv2d_grad_input", "2x32x28x28 k5", lambda m: m.dwconv2d_grad_input(g, w, x.shape, 1, 2)
    yield "dwconv2d_grad_weight", "2x32x28x28 k5", lambda m: m.dwconv2d_grad_weight(g, x, w.shape, 1, 2)


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_benchmarks(repeat=5, seed=0):
    rng = np.random.default_rng(seed)
    backends = {name: backend_module(name) for name in available_backends()}
    results = []
    for kernel, case, call in _cases(rng):
        reference = call(backends["python"])
        for name, mod in backends.items():
            out = call(mod)
            results.append(BenchResult(kernel, case, name, _best(lambda: call(mod), repeat),
                                       bool(np.array_equal(out, reference))))
    return results


def format_results(results):
    lines = [f"{'kernel':<22}{'case':<22}{'backend':<9}{'best ms':>10}  {'speedup':>8}  bitwise"]
    base = {(r.kernel, r.case): r.best_seconds for r in results if r.backend == "python"}
    for r in results:
        speedup = base[(r.kernel, r.case)] / r.best_seconds
        lines.append(f"{r.kernel:<22}{r.case:<22}{r.backend:<9}{r.best_seconds * 1e3:>10.3f}  {speedup:>7.2f}x  "
                     f"{'yes' if r.same_as_python else 'no'}")
    return "\n".join(lines) + "\n"
