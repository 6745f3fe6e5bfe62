"""Synthetic quadrant-blob task and a deterministic toy training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from evtlab import tensor as T
from evtlab.model import EVT, count_params


@dataclass(frozen=True)
class SyntheticSpec:
    """Images with one Gaussian blob; the label is the quadrant holding its centre.

    Labels: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    """

    n_samples: int = 512
    size: int = 32
    blob_sigma: float = 2.5
    margin: float = 3.0
    noise: float = 0.1
    seed: int = 0


def quadrant_blob(spec):
    rng = np.random.default_rng(spec.seed)
    half = spec.size / 2
    labels = rng.integers(0, 4, size=spec.n_samples)
    cx = rng.uniform(spec.margin, half - spec.margin, size=spec.n_samples) + half * (labels % 2)
    cy = rng.uniform(spec.margin, half - spec.margin, size=spec.n_samples) + half * (labels // 2)
    grid = np.arange(spec.size) + 0.5
    gx = np.exp(-((grid[None, :] - cx[:, None]) ** 2) / (2 * spec.blob_sigma ** 2))
    gy = np.exp(-((grid[None, :] - cy[:, None]) ** 2) / (2 * spec.blob_sigma ** 2))
    blob = gy[:, :, None] * gx[:, None, :]
    images = np.repeat(blob[:, None], 3, axis=1) + spec.noise * rng.normal(size=(spec.n_samples, 3, spec.size, spec.size))
    return images, labels


@dataclass(frozen=True)
class OptimSpec:
    kind: str = "adam"
    lr: float = 3e-3
    steps: int = 500
    seed: int = 0
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    spike_factor: float = 5.0
    spike_window: int = 20


@dataclass
class TrainEvent:
    step: int
    kind: str  # "spike" or "nan"
    loss: float
    trailing_mean: float


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    accuracy: float = float("nan")
    events: list = field(default_factory=list)
    halted: bool = False
    model: EVT | None = None


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr):
        self.params, self.lr = params, lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


def make_optimizer(params, optim):
    if optim.kind == "adam":
        return Adam(params, optim.lr, optim.beta1, optim.beta2, optim.eps)
    if optim.kind == "sgd":
        return SGD(params, optim.lr)
    raise ValueError(f"unknown optimiser {optim.kind!r}")


def evaluate(model, images, labels, batch_size=128):
    correct = 0
    for i in range(0, len(labels), batch_size):
        logits = model(images[i:i + batch_size]).data
        correct += int((logits.argmax(axis=-1) == labels[i:i + batch_size]).sum())
    return correct / len(labels)


def toy_train(task, cfg, optim, max_params=50_000, on_step=None):
    """Train ``cfg`` on the synthetic task.

    A loss above ``spike_factor`` times the trailing mean is logged as a spike;
    a non-finite loss is logged and stops training, returning partial metrics.
    """
    n_params = count_params(cfg)
    if n_params > max_params:
        raise ValueError(f"toy training is limited to {max_params} parameters, config has {n_params}")
    images, labels = quadrant_blob(task)
    model = EVT(cfg, seed=optim.seed)
    params = list(model.params.values())
    opt = make_optimizer(params, optim)
    rng = np.random.default_rng(optim.seed + 1)
    result = TrainResult(model=model)
    order = np.array([], dtype=np.int64)
    for step in range(optim.steps):
        if len(order) < optim.batch_size:
            order = np.concatenate([order, rng.permutation(len(labels))])
        # sorted so a full batch sees the same sample order every step
        idx, order = np.sort(order[:optim.batch_size]), order[optim.batch_size:]
        loss = T.cross_entropy(model(images[idx]), labels[idx])
        value = loss.item()
        window = result.losses[-optim.spike_window:]
        trailing = float(np.mean(window)) if window else math.nan
        if not math.isfinite(value):
            result.events.append(TrainEvent(step, "nan", value, trailing))
            result.halted = True
            break
        if len(window) >= 5 and value > optim.spike_factor * trailing:
            result.events.append(TrainEvent(step, "spike", value, trailing))
        result.losses.append(value)
        T.backward(loss)
        opt.step()
        if on_step is not None:
            on_step(step, value)
    if not result.halted:
        result.accuracy = evaluate(model, images, labels)
    return result
