"""The hierarchical EVT network: conv stem, stages of CPE / EuSA / FFN blocks,
patch merging and a classifier head.

Parameters live in a flat ``{name: Tensor}`` dict; the functional pieces
(:func:`conv_stem`, :func:`evt_block`, ...) read the names they need.
Feature maps are (B, C, H, W); a single (C, H, W) image is accepted too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from evtlab import tensor as T
from evtlab.attention import (
    POST_SOFTMAX,
    AttentionInputs,
    Full,
    GroupKind,
    Grouped,
    attention_flops,
    eusa_full,
    eusa_grouped,
    lce,
    make_group_plan,
)
from evtlab.config import FULL
from evtlab.decay import GridCoords, gamma_schedule, group_decay, head_decay_stack
from evtlab.errors import ShapeError

STEM_STRIDES = (2, 1, 1, 2)


# ---------------------------------------------------------------------------
# parameters


def _trunc_normal(rng, shape, std=0.02):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def param_shapes(cfg):
    """Ordered ``{name: shape}`` for every trainable array of ``cfg``."""
    shapes = {}
    cin = 3
    for i, cout in enumerate(cfg.stem_channels):
        shapes[f"stem.conv{i}.weight"] = (cout, cin, 3, 3)
        shapes[f"stem.conv{i}.bias"] = (cout,)
        shapes[f"stem.norm{i}.weight"] = (cout,)
        shapes[f"stem.norm{i}.bias"] = (cout,)
        cin = cout
    for s, st in enumerate(cfg.stages):
        c = st.dim
        if s > 0:
            prev = cfg.stages[s - 1].dim
            shapes[f"merge{s}.conv.weight"] = (c, prev, 3, 3)
            shapes[f"merge{s}.conv.bias"] = (c,)
            shapes[f"merge{s}.norm.weight"] = (c,)
            shapes[f"merge{s}.norm.bias"] = (c,)
        hidden = st.ffn_ratio * c
        for b in range(st.depth):
            p = f"stage{s}.block{b}."
            shapes[p + "cpe.weight"] = (c, cfg.cpe_kernel, cfg.cpe_kernel)
            shapes[p + "cpe.bias"] = (c,)
            shapes[p + "norm1.weight"] = (c,)
            shapes[p + "norm1.bias"] = (c,)
            for proj in ("q", "k", "v", "o"):
                shapes[p + f"attn.w{proj}"] = (c, c)
                shapes[p + f"attn.b{proj}"] = (c,)
            shapes[p + "attn.lce.weight"] = (c, cfg.lce_kernel, cfg.lce_kernel)
            shapes[p + "attn.lce.bias"] = (c,)
            shapes[p + "norm2.weight"] = (c,)
            shapes[p + "norm2.bias"] = (c,)
            shapes[p + "ffn.w1"] = (c, hidden)
            shapes[p + "ffn.b1"] = (hidden,)
            shapes[p + "ffn.w2"] = (hidden, c)
            shapes[p + "ffn.b2"] = (c,)
    c = cfg.stages[-1].dim
    shapes["head.norm.weight"] = (c,)
    shapes["head.norm.bias"] = (c,)
    if cfg.head_hidden:
        shapes["head.proj.weight"] = (c, cfg.head_hidden)
        shapes["head.proj.bias"] = (cfg.head_hidden,)
        c = cfg.head_hidden
    shapes["head.fc.weight"] = (c, cfg.num_classes)
    shapes["head.fc.bias"] = (cfg.num_classes,)
    return shapes


def init_params(cfg, seed=0):
    """Truncated-normal (std 0.02) projections and convs; zero biases and CPE/LCE kernels; unit LN scales."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if "norm" in name and leaf == "weight":
            arr = np.ones(shape)
        elif leaf.startswith("b") or "cpe" in name or "lce" in name:
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape)
        params[name] = T.Tensor(arr, requires_grad=True, name=name)
    return params


def count_params(cfg):
    """Exact number of trainable scalars in ``cfg``."""
    return int(sum(math.prod(s) for s in param_shapes(cfg).values()))


# ---------------------------------------------------------------------------
# layers


def _as_batch(x):
    x = T.as_tensor(x)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatch(x, squeeze):
    return T.reshape(x, x.shape[1:]) if squeeze else x


def _to_tokens(x):
    b, c, h, w = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def _to_map(t, h, w):
    b, n, c = t.shape
    return T.transpose(T.reshape(t, (b, h, w, c)), (0, 3, 1, 2))


def channel_norm(x, weight, bias, eps=1e-6):
    """LayerNorm over the channel axis of a (B, C, H, W) map."""
    y = T.layer_norm(T.transpose(x, (0, 2, 3, 1)), weight, bias, eps)
    return T.transpose(y, (0, 3, 1, 2))


def linear(x, weight, bias=None):
    y = T.matmul(x, weight)
    return y if bias is None else y + bias


def conv_stem(image, params, prefix="stem", eps=1e-6):
    """Four 3x3 convs (strides 2, 1, 1, 2), each followed by channel LayerNorm and GELU."""
    x, squeeze = _as_batch(image)
    h, w = x.shape[-2:]
    if h % 4 or w % 4:
        raise ShapeError(f"stem input {h}x{w} is not divisible by 4")
    for i, stride in enumerate(STEM_STRIDES):
        x = T.conv2d(x, params[f"{prefix}.conv{i}.weight"], params[f"{prefix}.conv{i}.bias"], stride=stride, pad=1)
        x = T.gelu(channel_norm(x, params[f"{prefix}.norm{i}.weight"], params[f"{prefix}.norm{i}.bias"], eps))
    return _unbatch(x, squeeze)


def cpe(x, kernel, bias=None):
    """Conditional positional encoding: ``x + dwconv(x)`` with same padding."""
    kernel = T.as_tensor(kernel)
    return x + T.depthwise_conv2d(x, kernel, stride=1, pad=kernel.shape[-1] // 2, bias=bias)


def patch_merge(x, params, prefix, eps=1e-6):
    """3x3 stride-2 conv to the next stage width, then channel LayerNorm and GELU."""
    x, squeeze = _as_batch(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"patch merging needs even sides, got {h}x{w}")
    x = T.conv2d(x, params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"], stride=2, pad=1)
    x = T.gelu(channel_norm(x, params[f"{prefix}.norm.weight"], params[f"{prefix}.norm.bias"], eps))
    return _unbatch(x, squeeze)


@dataclass(frozen=True)
class MixerSpec:
    """How one block mixes tokens: full attention (``plan_kind=None``) or grouped."""

    plan_kind: GroupKind | None = None
    group_size: int = 0


@lru_cache(maxsize=128)
def _block_decay(h, w, spec, gammas, mixer):
    grid = GridCoords(h, w)
    if mixer.plan_kind is None:
        out = head_decay_stack(grid, spec, gammas)
        return out, None
    plan = make_group_plan(h * w, mixer.group_size, mixer.plan_kind)
    out = np.stack([group_decay(grid, spec.with_gamma(g), plan.groups) for g in gammas])
    out.setflags(write=False)
    return out, plan


def evt_block(x, params, prefix, heads, decay_spec, mixer=MixerSpec(), gamma_base=3, mode=None,
              eps=1e-6, capture=None):
    """One block: ``X = CPE(X) + X; Y = EuSA(LN(X)) + LCE(V) + X; Z = FFN(LN(Y)) + Y``.

    The local-context branch is added to the attention output before the output
    projection. Head ``n`` uses decay base ``1 - 2**(-gamma_base - n)``.
    """
    mode = mode or POST_SOFTMAX
    x, squeeze = _as_batch(x)
    b, c, h, w = x.shape
    if c % heads:
        raise ShapeError(f"{c} channels do not split into {heads} heads")
    dh = c // heads
    n = h * w
    p = prefix + "."

    x = cpe(x, params[p + "cpe.weight"], params[p + "cpe.bias"])
    t = _to_tokens(x)
    u = T.layer_norm(t, params[p + "norm1.weight"], params[p + "norm1.bias"], eps)

    def split(z):
        return T.transpose(T.reshape(z, (b, n, heads, dh)), (0, 2, 1, 3))

    q = linear(u, params[p + "attn.wq"], params[p + "attn.bq"])
    k = linear(u, params[p + "attn.wk"], params[p + "attn.bk"])
    v = linear(u, params[p + "attn.wv"], params[p + "attn.bv"])
    gammas = tuple(gamma_schedule(heads, gamma_base))
    decay, plan = _block_decay(h, w, decay_spec, gammas, mixer)
    inp = AttentionInputs(split(q), split(k), split(v), GridCoords(h, w))
    if plan is None:
        att = eusa_full(inp, decay, mode, capture=capture)
    else:
        att = eusa_grouped(inp, plan=plan, mode=mode, E_groups=decay, capture=capture)
    att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (b, n, c))
    local = lce(_to_map(v, h, w), params[p + "attn.lce.weight"], params[p + "attn.lce.bias"])
    att = att + _to_tokens(local)
    y = t + linear(att, params[p + "attn.wo"], params[p + "attn.bo"])

    z = T.layer_norm(y, params[p + "norm2.weight"], params[p + "norm2.bias"], eps)
    z = T.gelu(linear(z, params[p + "ffn.w1"], params[p + "ffn.b1"]))
    z = y + linear(z, params[p + "ffn.w2"], params[p + "ffn.b2"])
    return _unbatch(_to_map(z, h, w), squeeze)


def block_mixers(stage):
    """Per-block mixers of a stage: grouped stages alternate contiguous/dilated starting contiguous."""
    if stage.mixer == FULL:
        return [MixerSpec()] * stage.depth
    kinds = (GroupKind.CONTIGUOUS, GroupKind.DILATED)
    return [MixerSpec(kinds[i % 2], stage.group_size) for i in range(stage.depth)]


def forward_features(cfg, params, images, capture=None, stage_shapes=None):
    x, squeeze = _as_batch(images)
    x = conv_stem(x, params, eps=cfg.ln_eps)
    for s, st in enumerate(cfg.stages):
        if s > 0:
            x = patch_merge(x, params, f"merge{s}", eps=cfg.ln_eps)
        if stage_shapes is not None:
            stage_shapes.append(x.shape[1:])
        for bi, mixer in enumerate(block_mixers(st)):
            layer_capture = [] if capture is not None else None
            x = evt_block(x, params, f"stage{s}.block{bi}", st.heads, cfg.decay_spec(0.5), mixer,
                          cfg.gamma_base, cfg.attn_mode, cfg.ln_eps, layer_capture)
            if capture is not None:
                for rec in layer_capture:
                    rec.label = f"stage{s}.block{bi}"
                    rec.weights = rec.weights[0] if squeeze else rec.weights
                capture.extend(layer_capture)
    return x, squeeze


def forward(cfg, params, images, capture=None, stage_shapes=None):
    """Logits for a (3, H, W) image or a (B, 3, H, W) batch.

    ``capture`` (a list) receives one :class:`~evtlab.attention.AttnCapture`
    per block; ``stage_shapes`` receives each stage's (C, H, W).
    """
    x, squeeze = forward_features(cfg, params, images, capture, stage_shapes)
    pooled = T.mean(T.reshape(x, x.shape[:2] + (-1,)), axis=2)
    z = T.layer_norm(pooled, params["head.norm.weight"], params["head.norm.bias"], cfg.ln_eps)
    if cfg.head_hidden:
        z = T.gelu(linear(z, params["head.proj.weight"], params["head.proj.bias"]))
    logits = linear(z, params["head.fc.weight"], params["head.fc.bias"])
    return _unbatch(logits, squeeze)


class EVT:
    """A configuration bundled with its parameters."""

    def __init__(self, cfg, params=None, seed=0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def __call__(self, images, capture=None, stage_shapes=None):
        return forward(self.cfg, self.params, images, capture, stage_shapes)

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self):
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_state(cls, cfg, state):
        expected = param_shapes(cfg)
        missing = set(expected) - set(state)
        if missing:
            raise KeyError(f"weights are missing {sorted(missing)[0]!r}")
        params = {}
        for name, shape in expected.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ShapeError(f"{name}: stored shape {arr.shape}, config expects {shape}")
            params[name] = T.Tensor(arr.copy(), requires_grad=True, name=name)
        return cls(cfg, params)


# ---------------------------------------------------------------------------
# cost accounting


def flops_breakdown(cfg, resolution):
    """Multiply-accumulate counts per component for a square ``resolution`` input.

    Convolutions, linear layers and the two attention matmuls are counted;
    normalisation, activations, softmax and bias additions are not.
    """
    if resolution % (4 * 2 ** (len(cfg.stages) - 1)):
        raise ShapeError(f"resolution {resolution} does not survive {len(cfg.stages)} stages of downsampling")
    out = {}
    size, cin = resolution, 3
    stem = 0
    for cout, stride in zip(cfg.stem_channels, STEM_STRIDES):
        size = (size + 2 - 3) // stride + 1
        stem += size * size * cout * cin * 9
        cin = cout
    out["stem"] = stem
    for s, st in enumerate(cfg.stages):
        c = st.dim
        if s > 0:
            size = (size + 2 - 3) // 2 + 1
            out[f"merge{s}"] = size * size * c * cfg.stages[s - 1].dim * 9
        n = size * size
        variant = Full() if st.mixer == FULL else Grouped(st.group_size)
        per_block_linear = n * c * c * 4 + 2 * n * c * c * st.ffn_ratio
        per_block_dw = n * c * (cfg.cpe_kernel ** 2 + cfg.lce_kernel ** 2)
        out[f"stage{s}.linear"] = st.depth * per_block_linear
        out[f"stage{s}.dwconv"] = st.depth * per_block_dw
        out[f"stage{s}.attention"] = st.depth * attention_flops(n, c, variant) // 2
        out[f"stage{s}.tokens"] = n
    c = cfg.stages[-1].dim
    head = 0
    if cfg.head_hidden:
        head += c * cfg.head_hidden
        c = cfg.head_hidden
    out["head"] = head + c * cfg.num_classes
    return out


def count_flops(cfg, resolution=224):
    """Total multiply-accumulates (the unit image-classification FLOP tables report)."""
    return int(sum(v for k, v in flops_breakdown(cfg, resolution).items() if not k.endswith(".tokens")))


def toy_train(task, cfg, optim, **kwargs):
    """Train on the synthetic quadrant-blob task; see :func:`evtlab.train.toy_train`."""
    from evtlab.train import toy_train as run

    return run(task, cfg, optim, **kwargs)
