"""Finite-difference gradient suites shared by the CLI and the tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from evtlab import tensor as T
from evtlab.attention import (RENORMALIZED, AttentionInputs, GroupKind, eusa_full, eusa_grouped,
                              make_group_plan, masa_decomposed)
from evtlab.config import MICRO
from evtlab.decay import DecayKind, DecaySpec, GridCoords, decay_matrix_2d
from evtlab.model import MixerSpec, evt_block, forward, init_params

OP_THRESHOLD = 1e-4
MODEL_THRESHOLD = 1e-3


@dataclass
class GradResult:
    suite: str
    tensor: str
    max_rel_err: float
    threshold: float

    @property
    def ok(self):
        return self.max_rel_err < self.threshold


def gradcheck(fn, inputs, seed=0, max_entries=None, h=1e-3):
    """Compare reverse-mode gradients of ``fn`` with a five-point central stencil.

    The fourth-order stencil keeps truncation error and round-off both near
    small at ``h = 1e-3`` on well-scaled ops, which a plain two-point
    difference cannot do for near-zero gradients. Deep stacks of narrow
    LayerNorms curve sharply and want a smaller ``h``.
    ``fn`` maps ``{name: Tensor}`` to a scalar Tensor. With ``max_entries``,
    only that many seeded random entries of each input are probed.
    Returns ``{name: max relative error}``.
    """
    tensors = {k: T.Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in inputs.items()}
    T.backward(fn(tensors))
    rng = np.random.default_rng(seed)
    out = {}
    for name, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        size = t.data.size
        picks = np.arange(size) if max_entries is None or size <= max_entries else rng.choice(size, max_entries, replace=False)
        base = {k: v.data for k, v in tensors.items()}
        flat = t.data.reshape(-1).copy()
        numeric = np.empty(len(picks))
        for j, i in enumerate(picks):
            vals = []
            for delta in (2 * h, h, -h, -2 * h):
                probe = flat.copy()
                probe[i] += delta
                args = {k: T.Tensor(v) for k, v in base.items()}
                args[name] = T.Tensor(probe.reshape(t.shape))
                vals.append(fn(args).item())
            numeric[j] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
        err = T.relative_error(analytic.reshape(-1)[picks], numeric)
        out[name] = float(err.max()) if err.size else 0.0
    return out


def _weighted_sum(out, weights):
    return T.tsum(T.hadamard_const(out, weights))


def attn_suite(seed=0):
    rng = np.random.default_rng(seed)
    results = []
    heads, d = 2, 3

    grid = GridCoords(3, 3)
    n = grid.n_tokens
    E = np.stack([decay_matrix_2d(grid, DecaySpec(DecayKind.EUCLIDEAN, g)) for g in (0.875, 0.9375)])
    qkv = {k: rng.normal(size=(heads, n, d)) for k in "qkv"}
    w = rng.normal(size=(heads, n, d))
    for label, mode in (("eusa_full", None), ("eusa_full.renorm", RENORMALIZED)):
        def f(t, mode=mode):
            inp = AttentionInputs(t["q"], t["k"], t["v"], grid)
            return _weighted_sum(eusa_full(inp, E, mode) if mode else eusa_full(inp, E), w)
        results += [GradResult(label, k, e, OP_THRESHOLD) for k, e in gradcheck(f, qkv, seed).items()]

    grid = GridCoords(2, 5)
    n = grid.n_tokens
    Eg = decay_matrix_2d(grid, DecaySpec(DecayKind.EUCLIDEAN, 0.875))
    qkv = {k: rng.normal(size=(heads, n, d)) for k in "qkv"}
    w = rng.normal(size=(heads, n, d))
    for kind in GroupKind:
        plan = make_group_plan(n, 4, kind)
        for label, mode in ((f"eusa_grouped.{kind.value}", None), (f"eusa_grouped.{kind.value}.renorm", RENORMALIZED)):
            def f(t, plan=plan, mode=mode):
                inp = AttentionInputs(t["q"], t["k"], t["v"], grid)
                out = eusa_grouped(inp, Eg, plan, mode) if mode else eusa_grouped(inp, Eg, plan)
                return _weighted_sum(out, w)
            results += [GradResult(label, k, e, OP_THRESHOLD) for k, e in gradcheck(f, qkv, seed).items()]

    grid = GridCoords(3, 4)
    n = grid.n_tokens
    qkv = {k: rng.normal(size=(heads, n, d)) for k in "qkv"}
    w = rng.normal(size=(heads, n, d))

    def f(t):
        return _weighted_sum(masa_decomposed(AttentionInputs(t["q"], t["k"], t["v"], grid), [0.875, 0.9375]), w)
    results += [GradResult("masa_decomposed", k, e, OP_THRESHOLD) for k, e in gradcheck(f, qkv, seed).items()]
    return results


def _random_params(shapes_from, rng, scale=0.3):
    # Non-zero everywhere so no branch starts dead; init_params zeroes CPE/LCE.
    return {k: rng.normal(scale=scale, size=v.shape) + (1.0 if k.endswith("norm1.weight") or k.endswith("norm2.weight") else 0.0)
            for k, v in shapes_from.items()}


def block_suite(seed=0, max_entries=8):
    rng = np.random.default_rng(seed)
    c, heads, h, w = 4, 2, 3, 4
    cfg_params = init_params(MICRO, seed)
    prefix = "stage0.block0"
    names = [k for k in cfg_params if k.startswith(prefix + ".")]
    shapes = {k: cfg_params[k].data for k in names}
    # shrink the stage-0 block to c channels so the probe stays cheap
    small = {}
    for k, v in shapes.items():
        shape = tuple(c if s == MICRO.stages[0].dim else (c * MICRO.stages[0].ffn_ratio if s == MICRO.stages[0].dim * MICRO.stages[0].ffn_ratio else s) for s in v.shape)
        small[k] = np.zeros(shape)
    params = _random_params(small, rng)
    x = rng.normal(size=(c, h, w))
    weights = rng.normal(size=(c, h, w))
    spec = DecaySpec(DecayKind.EUCLIDEAN, 0.5)
    results = []
    for mixer, label in ((MixerSpec(), "evt_block.full"), (MixerSpec(GroupKind.CONTIGUOUS, 5), "evt_block.contiguous"),
                         (MixerSpec(GroupKind.DILATED, 5), "evt_block.dilated")):
        def f(t, mixer=mixer):
            ps = {k: t[k] for k in names}
            return _weighted_sum(evt_block(t["x"], ps, prefix, heads, spec, mixer), weights)
        errs = gradcheck(f, {"x": x, **params}, seed, max_entries=max_entries)
        results += [GradResult(label, k, e, OP_THRESHOLD) for k, e in errs.items()]
    return results


def model_suite(seed=0, max_entries=3, h=1e-4):
    rng = np.random.default_rng(seed)
    params = _random_params({k: v.data for k, v in init_params(MICRO, seed).items()}, rng, scale=0.2)
    images = rng.normal(size=(1, 3, 32, 32))
    labels = np.array([seed % MICRO.num_classes])

    def f(t):
        return T.cross_entropy(forward(MICRO, t, images), labels)
    errs = gradcheck(f, params, seed, max_entries=max_entries, h=h)
    return [GradResult("model", k, e, MODEL_THRESHOLD) for k, e in errs.items()]


SUITES = {"attn": attn_suite, "block": block_suite, "model": model_suite}
