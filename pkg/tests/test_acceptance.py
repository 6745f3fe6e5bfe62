"""Acceptance criteria, one test each; the summary line per criterion is printed
by the ``acceptance`` marker hook in conftest."""

import itertools
import math

import numpy as np
import pytest

from evtlab import analysis as A
from evtlab import cli
from evtlab.attention import (POST_SOFTMAX, RENORMALIZED, Decomposed, GroupKind, Grouped, attention_flops, eusa_full,
                              eusa_grouped, make_group_plan, masa_decomposed, standard_attention)
from evtlab.checks import MODEL_THRESHOLD, OP_THRESHOLD, attn_suite, block_suite, model_suite
from evtlab.config import MICRO, get_variant
from evtlab.decay import DecayKind, DecaySpec, GridCoords, decay_matrix_2d, distance_matrix, gamma_schedule, \
    head_decay_stack
from evtlab.model import count_flops, count_params
from evtlab.serialize import dumps_weights, loads_weights
from evtlab.train import OptimSpec, SyntheticSpec, toy_train

from test_analysis import fd_coord, rel_err
from test_attention import literal_masa, rand_inputs

acceptance = pytest.mark.acceptance


@pytest.fixture(scope="module")
def trained():
    return toy_train(SyntheticSpec(), MICRO, OptimSpec(seed=0))


@acceptance(1, "decay invariants, all kinds, grids up to 8x8", "exact", 1)
def test_c01_decay_invariants(record_property):
    checked = 0
    for h, w in itertools.product(range(1, 9), repeat=2):
        grid = GridCoords(h, w)
        eu_cache = {}
        for kind, gamma in itertools.product(DecayKind, (0.5, 0.875, 0.99)):
            E = decay_matrix_2d(grid, DecaySpec(kind, gamma, p=3.0, rbf_scale=1.5))
            assert np.array_equal(E, E.T)
            if kind.is_distance:
                assert np.all(np.diag(E) == 1.0)
            if kind is not DecayKind.NONE:
                d = distance_matrix(grid, kind, 3.0).reshape(-1)
                order = np.argsort(d, kind="stable")
                ds, es = d[order], E.reshape(-1)[order]
                closer = ds[:-1] < ds[1:]
                assert np.all(es[:-1][closer] > es[1:][closer])
                same = ds[:-1] == ds[1:]
                assert np.all(es[:-1][same] == es[1:][same])
            if kind is DecayKind.EUCLIDEAN:
                eu_cache[gamma] = E
            if kind is DecayKind.MANHATTAN:
                assert np.all(eu_cache[gamma] >= E)
            checked += 1
    record_property("matrices", checked)


@acceptance(2, "baseline degenerations", "bitwise", 1)
def test_c02_degenerations():
    for seed, (h, w) in enumerate([(1, 1), (2, 3), (4, 4), (3, 7)]):
        inp = rand_inputs(seed, 2, h, w, 4)
        n = h * w
        assert np.array_equal(eusa_full(inp, np.ones((n, n)), POST_SOFTMAX).data, standard_attention(inp).data)
        E = decay_matrix_2d(inp.grid, DecaySpec("euclidean", 0.875))
        for k, kind, mode in itertools.product((n, n + 3), GroupKind, (POST_SOFTMAX, RENORMALIZED)):
            plan = make_group_plan(n, k, kind)
            assert np.array_equal(eusa_grouped(inp, E, plan, mode).data, eusa_full(inp, E, mode).data)


@acceptance(3, "autodiff vs central differences, seeds 0-4", f"{OP_THRESHOLD:g} ops/blocks, {MODEL_THRESHOLD:g} model",
            30)
def test_c03_autodiff(record_property):
    worst = {"attn": 0.0, "block": 0.0, "model": 0.0}
    failures = []
    for seed in range(5):
        for name, suite in (("attn", attn_suite), ("block", block_suite), ("model", model_suite)):
            for r in suite(seed):
                worst[name] = max(worst[name], r.max_rel_err)
                if not r.ok:
                    failures.append(f"seed {seed} {r.suite}:{r.tensor} {r.max_rel_err:.2e}")
    for k, v in worst.items():
        record_property(f"max_{k}", f"{v:.2e}")
    assert not failures, failures


@acceptance(4, "coordinate-gradient formulas on 3x3", "rel 1e-4, row sum 1e-10", 10)
def test_c04_coordinate_gradients(record_property):
    grid = GridCoords(3, 3)
    worst_l2 = worst_l1 = worst_sum = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        q, k = rng.normal(size=(9, 4)), rng.normal(size=(9, 4))
        jitter = grid.coords() + rng.uniform(-0.3, 0.3, size=(9, 2))
        for n, axis in itertools.product(range(9), (0, 1)):
            g2 = A.coord_grad_l2(q, k, grid, 0.8, n, axis)
            worst_l2 = max(worst_l2, rel_err(g2, fd_coord(q, k, grid.coords(), 0.8, n, axis, "l2", 1e-5)))
            worst_sum = max(worst_sum, abs(g2.sum()))
            gaps = np.abs(np.delete(jitter[:, axis] - jitter[n, axis], n))
            assert gaps.min() > 1e-5
            g1 = A.coord_grad_l1(q, k, grid, 0.8, n, axis, coords=jitter)
            worst_l1 = max(worst_l1, rel_err(g1, fd_coord(q, k, jitter, 0.8, n, axis, "l1", 1e-5)))
    record_property("l2_rel", f"{worst_l2:.2e}")
    record_property("l1_rel", f"{worst_l1:.2e}")
    record_property("row_sum", f"{worst_sum:.1e}")
    assert worst_l2 < 1e-4 and worst_l1 < 1e-4 and worst_sum < 1e-10


@acceptance(5, "decomposed MaSA vs literal oracle", "abs 1e-9", 5)
def test_c05_masa_oracle(record_property):
    worst = 0.0
    for h, w in [(2, 2), (3, 4), (4, 4)]:
        inp = rand_inputs(100 + h * w, 2, h, w, 3)
        gammas = gamma_schedule(2)
        out = masa_decomposed(inp, gammas).data
        for head, g in enumerate(gammas):
            q, k, v = (t.data[head].tolist() for t in (inp.q, inp.k, inp.v))
            worst = max(worst, float(np.abs(out[head] - np.array(literal_masa(q, k, v, h, w, g))).max()))
    record_property("max_abs", f"{worst:.1e}")
    assert worst < 1e-9


@acceptance(6, "attention complexity exponents", "+-0.01", 1)
def test_c06_complexity(record_property):
    ns = np.array([196, 784, 3136])
    grouped = [attention_flops(n, 64, Grouped(98)) for n in ns]
    decomposed = [attention_flops(n, 64, Decomposed(math.isqrt(n), math.isqrt(n))) for n in ns]
    eg = np.polyfit(np.log(ns), np.log(grouped), 1)[0]
    ed = np.polyfit(np.log(ns), np.log(decomposed), 1)[0]
    record_property("grouped", f"{eg:.4f}")
    record_property("decomposed", f"{ed:.4f}")
    assert abs(eg - 1.0) <= 0.01 and abs(ed - 1.5) <= 0.01


@acceptance(7, "receptive-field coverage and bounds", "exact", 10)
def test_c07_receptive_field(record_property):
    configs = 0
    for n in (16, 196, 784):
        root = math.isqrt(n)
        for c in (1, 2):
            k = root * c
            g = -(-n // k)
            plans = [make_group_plan(n, k, GroupKind.CONTIGUOUS), make_group_plan(n, k, GroupKind.DILATED)]
            b = A.rf_bounds(A.RFModel(w=k, g=g, L=2, N=n))
            assert g * k * 2 >= n
            reach = A.rf_bruteforce(plans, n)
            assert reach.all()
            assert reach.sum(axis=1).max() <= b.bound_1d
            assert b.f_1d / b.f_2d == g
            # one layer stays within the single-layer bound
            one = A.rf_bruteforce(plans[:1], n).sum(axis=1)
            assert one.max() <= A.rf_bounds(A.RFModel(w=k, g=g, L=1, N=n)).bound_1d
            configs += 1
    record_property("configs", configs)


@acceptance(8, "params/FLOPs vs published table", "params 5%, FLOPs 10%", 1)
def test_c08_accounting(record_property):
    for name, params, flops in (("evt-t", 15e6, 2.5e9), ("evt-s", 27e6, 4.6e9)):
        cfg = get_variant(name)
        p, f = count_params(cfg), count_flops(cfg, 224)
        record_property(name, f"{p / 1e6:.2f}M {f / 1e9:.3f}G")
        assert abs(p / params - 1) <= 0.05
        assert abs(f / flops - 1) <= 0.10


def _reports(model, n_images=4):
    from evtlab.train import quadrant_blob

    images, _ = quadrant_blob(SyntheticSpec(n_samples=n_images, seed=99))
    out = []
    for image in images:
        captures = []
        model(image, capture=captures)
        out.append(A.AttnReport.from_captures(captures).by_tokens())
    return out


@acceptance(9, "JS protocol", "exact zero, log 2 bound; ordering soft", 60)
def test_c09_js_protocol(trained, record_property):
    rng = np.random.default_rng(0)
    p = rng.random(16)
    p /= p.sum()
    assert A.js_divergence(p, p) == 0.0
    for _ in range(200):
        a, b = rng.dirichlet(np.full(16, 0.3)), rng.dirichlet(np.full(16, 0.3))
        assert 0.0 <= A.js_divergence(a, b) <= math.log(2)
    eu_total = ma_total = 0.0
    for stages in _reports(trained.model):
        for rep in stages.values():
            assert A.attention_js_protocol(rep, rep) == 0.0
            grid = rep.layers[0].grid
            gammas = tuple(gamma_schedule(rep.layers[0].weights.shape[0], MICRO.gamma_base))
            eu = A.attention_js_protocol(rep, head_decay_stack(grid, DecaySpec("euclidean", 0.5), gammas))
            ma = A.attention_js_protocol(rep, head_decay_stack(grid, DecaySpec("manhattan", 0.5), gammas))
            assert 0.0 <= eu <= math.log(2) and 0.0 <= ma <= math.log(2)
            eu_total += eu
            ma_total += ma
    record_property("euclidean", f"{eu_total:.4f}")
    record_property("manhattan", f"{ma_total:.4f}")
    record_property("soft_ordering", "holds" if eu_total <= ma_total else "does not hold")


@acceptance(10, "toy training", "accuracy >= 0.9, bitwise repeat", 300)
def test_c10_toy_training(trained, record_property):
    record_property("accuracy", f"{trained.accuracy:.4f}")
    record_property("final_loss", f"{trained.losses[-1]:.4f}")
    assert not trained.halted and len(trained.losses) == 500
    assert trained.accuracy >= 0.9
    short = OptimSpec(steps=20, batch_size=16)
    assert toy_train(SyntheticSpec(n_samples=64), MICRO, short).losses == \
        toy_train(SyntheticSpec(n_samples=64), MICRO, short).losses
    rbf = toy_train(SyntheticSpec(), MICRO.with_decay("gaussian_rbf"), OptimSpec(seed=0))
    assert all(e.kind in ("spike", "nan") for e in rbf.events)
    assert rbf.halted or len(rbf.losses) == 500
    record_property("rbf", f"steps={len(rbf.losses)} events={len(rbf.events)} halted={rbf.halted} "
                           f"accuracy={rbf.accuracy:.4f}")


@acceptance(11, "padding contract N=10 k=4", "exact", 1)
def test_c11_padding():
    inp = rand_inputs(11, 2, 2, 5, 3)
    E = decay_matrix_2d(inp.grid, DecaySpec("euclidean", 0.875))
    for kind, mode in itertools.product(GroupKind, (POST_SOFTMAX, RENORMALIZED)):
        plan = make_group_plan(10, 4, kind)
        assert plan.pad_count == 2
        base = eusa_grouped(inp, E, plan, mode).data
        for pad in (1e6, -3.5, 1e300, -1e300):
            assert np.array_equal(eusa_grouped(inp, E, plan, mode, pad_value=pad).data, base)


@acceptance(12, "rollout, serialization, CLI determinism", "rows 1e-9, bitwise, byte-identical", 10)
def test_c12_rollout_serialization_cli(tmp_path, record_property):
    rng = np.random.default_rng(12)
    for n in (4, 16, 49):
        layers = []
        for _ in range(3):
            w = rng.random((2, n, n))
            layers.append(A.LayerAttention("l", w / w.sum(-1, keepdims=True), np.ones((n, n), dtype=bool)))
        roll = A.attention_rollout(A.AttnReport(layers))
        assert np.abs(roll.sum(axis=1) - 1).max() <= 1e-9
    from evtlab.model import init_params

    state = {k: v.data for k, v in init_params(MICRO, seed=5).items()}
    back = loads_weights(dumps_weights(state))
    assert all(back[k].tobytes() == state[k].tobytes() for k in state)

    fast = ["--steps", "3", "--samples", "16", "--batch-size", "8"]
    commands = [
        ["decay", "--h", "3", "--w", "3", "--heads", "2"],
        ["gradcheck", "--scope", "attn"],
        ["rf", "--n", "196", "--k", "49"],
        ["flops", "--variant", "evt-t"],
        ["train", *fast],
    ]
    for i, argv in enumerate(commands):
        dirs = [tmp_path / f"{i}{s}" for s in "ab"]
        for d in dirs:
            assert cli.main([*argv, "--out", str(d)]) == 0
        assert {p.name: p.read_bytes() for p in dirs[0].iterdir()} == {p.name: p.read_bytes() for p in dirs[1].iterdir()}
    weights = str(tmp_path / "4a" / "weights.evtw")
    runs = []
    for s in "ab":
        assert cli.main(["analyze", "--weights", weights, "--out", str(tmp_path / f"an{s}")]) == 0
        runs.append({p.name: p.read_bytes() for p in (tmp_path / f"an{s}").iterdir()})
    assert runs[0] == runs[1]
    record_property("commands", len(commands) + 1)
