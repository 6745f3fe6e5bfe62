import math

import numpy as np
import pytest

from evtlab import model as M
from evtlab import tensor as T
from evtlab.config import MICRO, get_variant
from evtlab.train import Adam, OptimSpec, SyntheticSpec, evaluate, quadrant_blob, toy_train

SMALL = SyntheticSpec(n_samples=32)


def test_quadrant_labels_match_blob_position():
    images, labels = quadrant_blob(SyntheticSpec(n_samples=64, noise=0.0))
    assert images.shape == (64, 3, 32, 32) and set(labels.tolist()) <= {0, 1, 2, 3}
    for img, lab in zip(images, labels):
        y, x = np.unravel_index(img[0].argmax(), img[0].shape)
        assert lab == (x >= 16) + 2 * (y >= 16)
    a, _ = quadrant_blob(SyntheticSpec(n_samples=4, seed=5))
    b, _ = quadrant_blob(SyntheticSpec(n_samples=4, seed=5))
    assert np.array_equal(a, b)


def test_adam_first_step_moves_by_lr():
    p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -3.0])
    Adam([p], lr=0.1).step()
    # bias-corrected first step is lr * sign(g) up to eps
    assert np.allclose(p.data, [0.9, -1.9], rtol=0, atol=1e-8)


def test_zero_lr_full_batch_loss_is_constant():
    res = toy_train(SMALL, MICRO, OptimSpec(lr=0.0, steps=4, batch_size=32))
    assert len(res.losses) == 4 and len(set(res.losses)) == 1
    assert not res.events and not res.halted


def test_same_seed_is_bitwise_reproducible():
    spec = OptimSpec(steps=6, batch_size=8)
    a = toy_train(SMALL, MICRO, spec)
    b = toy_train(SMALL, MICRO, spec)
    assert a.losses == b.losses and a.accuracy == b.accuracy
    c = toy_train(SMALL, MICRO, OptimSpec(steps=6, batch_size=8, seed=1))
    assert c.losses != a.losses


def test_loss_decreases_on_short_run():
    res = toy_train(SyntheticSpec(n_samples=64), MICRO, OptimSpec(steps=40, batch_size=16))
    assert np.mean(res.losses[-8:]) < np.mean(res.losses[:8])
    assert 0.0 <= res.accuracy <= 1.0


def _patched_loss(monkeypatch, factor_at):
    real = T.cross_entropy
    calls = []

    def fake(logits, labels):
        loss = real(logits, labels)
        f = factor_at(len(calls))
        calls.append(f)
        return loss if f is None else T.scale(loss, f)

    monkeypatch.setattr(T, "cross_entropy", fake)


def test_nan_loss_halts_with_event(monkeypatch):
    _patched_loss(monkeypatch, lambda i: math.nan if i == 3 else None)
    res = toy_train(SMALL, MICRO, OptimSpec(steps=10, batch_size=8))
    assert res.halted and len(res.losses) == 3
    assert [(e.step, e.kind) for e in res.events] == [(3, "nan")]
    assert math.isnan(res.accuracy)
    assert math.isfinite(res.events[0].trailing_mean)


def test_spike_is_logged_and_training_continues(monkeypatch):
    _patched_loss(monkeypatch, lambda i: 1e3 if i == 7 else None)
    res = toy_train(SMALL, MICRO, OptimSpec(kind="sgd", lr=0.0, steps=10, batch_size=8))
    assert not res.halted and len(res.losses) == 10
    spikes = [e for e in res.events if e.kind == "spike"]
    assert [e.step for e in spikes] == [7]
    assert spikes[0].loss == res.losses[7] and spikes[0].loss > 5 * spikes[0].trailing_mean


def test_no_spike_before_window_fills(monkeypatch):
    _patched_loss(monkeypatch, lambda i: 1e3 if i == 2 else None)
    res = toy_train(SMALL, MICRO, OptimSpec(kind="sgd", lr=0.0, steps=4, batch_size=8))
    assert res.events == []


def test_parameter_budget_and_optimizer_errors():
    with pytest.raises(ValueError, match="parameters"):
        toy_train(SMALL, get_variant("evt-t"), OptimSpec(steps=1))
    with pytest.raises(ValueError, match="optimiser"):
        toy_train(SMALL, MICRO, OptimSpec(kind="lbfgs", steps=1))


def test_model_reexport_and_evaluate():
    res = M.toy_train(SMALL, MICRO, OptimSpec(steps=2, batch_size=8))
    images, labels = quadrant_blob(SMALL)
    assert evaluate(res.model, images, labels, batch_size=5) == res.accuracy
