"""Attention variants over a token grid.

All functions take query/key/value tensors shaped ``(..., heads, N, d_head)``
(any leading batch dimensions) and return a tensor of the same shape. Decay
matrices are constants: no gradient flows into them.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from evtlab import tensor as T
from evtlab.decay import PAD, GridCoords, decay_matrix_1d_axis, decay_submatrix
from evtlab.errors import ShapeError


class DecayMode(str, enum.Enum):
    POST_SOFTMAX = "post_softmax"
    RENORMALIZED = "renormalized"


@dataclass(frozen=True)
class AttnMode:
    decay: DecayMode = DecayMode.POST_SOFTMAX
    scale_by_sqrt_d: bool = True

    def __post_init__(self):
        object.__setattr__(self, "decay", DecayMode(self.decay))


POST_SOFTMAX = AttnMode()
RENORMALIZED = AttnMode(DecayMode.RENORMALIZED)


@dataclass
class AttentionInputs:
    q: T.Tensor
    k: T.Tensor
    v: T.Tensor
    grid: GridCoords

    def __post_init__(self):
        self.q, self.k, self.v = (T.as_tensor(t) for t in (self.q, self.k, self.v))
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise ShapeError(f"q, k, v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}")
        if self.q.shape[-2] != self.grid.n_tokens:
            raise ShapeError(f"{self.q.shape[-2]} tokens do not fill a {self.grid.height}x{self.grid.width} grid")

    @property
    def n_tokens(self):
        return self.q.shape[-2]

    @property
    def head_dim(self):
        return self.q.shape[-1]


@dataclass
class AttnCapture:
    """Attention weights of one layer expanded to ``(..., heads, N, N)``.

    ``support[n, m]`` is True where token ``n`` could attend to ``m``.
    """

    weights: np.ndarray
    support: np.ndarray
    grid: GridCoords | None = None
    label: str = ""


def _swap_last(t):
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return T.transpose(t, axes)


def _scores(q, k, scale_by_sqrt_d):
    s = T.matmul(q, _swap_last(k))
    if scale_by_sqrt_d:
        s = T.scale(s, 1.0 / math.sqrt(q.shape[-1]))
    return s


def _apply_decay(p, decay, mode):
    w = T.hadamard_const(p, decay)
    if mode.decay is DecayMode.RENORMALIZED:
        w = _safe_normalize(w)
    return w


def _safe_normalize(w):
    # rows that are entirely zero (PAD queries) stay zero instead of dividing by 0
    s = T._seqsum(w.data)
    zero = s == 0.0
    if not zero.any():
        return T.normalize_rows(w)
    safe = np.where(zero, 1.0, s)
    y = w.data / safe

    def backward(g):
        return ((g - T._seqsum(g * y)) / safe,)

    return T._make(y, (w,), "normalize_rows", backward)


def standard_attention(inp, scale_by_sqrt_d=True):
    """``softmax(Q K^T / sqrt(d)) V`` per head, with no spatial prior."""
    p = T.masked_softmax_rows(_scores(inp.q, inp.k, scale_by_sqrt_d))
    return T.matmul(p, inp.v)


def _check_decay(E, n):
    E = np.asarray(E, dtype=np.float64)
    if E.ndim < 2 or E.shape[-2:] != (n, n):
        raise ShapeError(f"decay matrix shape {E.shape} does not match {n} tokens")
    return E


def eusa_full(inp, E, mode=POST_SOFTMAX, capture=None):
    """Full decayed attention ``(softmax(Q K^T s) * E) V``.

    ``E`` is (N, N) or (heads, N, N). With ``RENORMALIZED`` mode the decayed
    rows are rescaled to sum to 1.
    """
    E = _check_decay(E, inp.n_tokens)
    p = T.masked_softmax_rows(_scores(inp.q, inp.k, mode.scale_by_sqrt_d))
    w = _apply_decay(p, E, mode)
    if capture is not None:
        n = inp.n_tokens
        capture.append(AttnCapture(w.data.copy(), np.ones((n, n), dtype=bool), inp.grid))
    return T.matmul(w, inp.v)


def _per_head(gamma, heads):
    g = np.atleast_1d(np.asarray(gamma, dtype=np.float64))
    if g.size == 1:
        return np.repeat(g, heads)
    if g.size != heads:
        raise ShapeError(f"{g.size} decay bases for {heads} heads")
    return g


def masa_decomposed(inp, gamma, scale_by_sqrt_d=True):
    """Axis-decomposed Manhattan attention ``Attn_H (Attn_W V)^T``.

    Attention along each row (width axis, decay ``gamma**|dx|``) is applied to
    V first; attention along each column (height axis, decay ``gamma**|dy|``)
    is then applied to the transposed result. ``gamma`` is a scalar or one
    value per head.
    """
    h, w = inp.grid.height, inp.grid.width
    lead = inp.q.shape[:-2]
    d = inp.head_dim
    heads = lead[-1] if lead else 1
    gammas = _per_head(gamma, heads)
    dw = np.stack([decay_matrix_1d_axis(w, g) for g in gammas])[:, None]  # (heads, 1, W, W)
    dh = np.stack([decay_matrix_1d_axis(h, g) for g in gammas])[:, None]  # (heads, 1, H, H)
    if not lead:
        dw, dh = dw[0], dh[0]

    def rows(t):
        return T.reshape(t, lead + (h, w, d))

    def cols(t):
        nd = len(lead)
        return T.transpose(t, tuple(range(nd)) + (nd + 1, nd, nd + 2))

    qr, kr, vr = rows(inp.q), rows(inp.k), rows(inp.v)
    attn_w = T.hadamard_const(T.masked_softmax_rows(_scores(qr, kr, scale_by_sqrt_d)), dw)
    u = T.matmul(attn_w, vr)  # (..., H, W, d)
    qc, kc = cols(qr), cols(kr)
    attn_h = T.hadamard_const(T.masked_softmax_rows(_scores(qc, kc, scale_by_sqrt_d)), dh)
    out_t = T.matmul(attn_h, cols(u))  # (..., W, H, d)
    return T.reshape(cols(out_t), lead + (h * w, d))


class GroupKind(str, enum.Enum):
    CONTIGUOUS = "contiguous"
    DILATED = "dilated"


@dataclass(frozen=True)
class GroupPlan:
    """Partition of ``n_tokens`` flattened tokens into ``num_groups`` groups of ``group_size``.

    ``groups[j, a]`` is a token index or :data:`~evtlab.decay.PAD`. PAD slots
    are appended after the last token before grouping.
    """

    kind: GroupKind
    n_tokens: int
    group_size: int
    num_groups: int
    pad_count: int
    groups: np.ndarray = field(repr=False, compare=False)

    @property
    def valid(self):
        return self.groups != PAD

    def inverse(self):
        """Flat slot (``j * k + a``) holding each token."""
        flat = self.groups.reshape(-1)
        inv = np.empty(self.n_tokens, dtype=np.int64)
        real = np.nonzero(flat != PAD)[0]
        inv[flat[real]] = real
        return inv

    def group_of(self):
        inv = self.inverse()
        return inv // self.group_size

    def support(self):
        """Boolean (N, N): True where two tokens share a group."""
        gid = self.group_of()
        return gid[:, None] == gid[None, :]


def make_group_plan(n_tokens, group_size, kind=GroupKind.CONTIGUOUS):
    kind = GroupKind(kind)
    if group_size < 1:
        raise ValueError(f"group size must be >= 1, got {group_size}")
    if n_tokens < 1:
        raise ValueError("need at least one token")
    k = group_size
    pad = (-n_tokens) % k
    g = (n_tokens + pad) // k
    seq = np.concatenate([np.arange(n_tokens), np.full(pad, PAD)]).astype(np.int64)
    if kind is GroupKind.CONTIGUOUS:
        groups = seq.reshape(g, k)
    else:
        groups = seq.reshape(k, g).T.copy()
    groups.setflags(write=False)
    return GroupPlan(kind, n_tokens, k, g, pad, groups)


def expand_groups(weights, plan):
    """Scatter (..., g, k, k) group attention into (..., N, N) with zeros outside groups."""
    n = plan.n_tokens
    lead = weights.shape[:-3]
    full = np.zeros(lead + (n, n))
    valid = plan.valid
    jj, aa = np.nonzero(valid)
    for j in range(plan.num_groups):
        sel = aa[jj == j]
        idx = plan.groups[j, sel]
        full[..., idx[:, None], idx[None, :]] = weights[..., j, sel[:, None], sel[None, :]]
    return full


def eusa_grouped(inp, E=None, plan=None, mode=POST_SOFTMAX, *, E_groups=None, pad_value=0.0, capture=None):
    """Decayed attention computed independently inside each group of ``plan``.

    Pass either the full decay ``E`` ((N, N) or (heads, N, N)) or the already
    sliced ``E_groups`` ((g, k, k) or (heads, g, k, k)). PAD slots are filled
    with ``pad_value``, masked out of every softmax and dropped from the output.
    """
    n = inp.n_tokens
    if plan is None or plan.n_tokens != n:
        raise ShapeError(f"group plan covers {getattr(plan, 'n_tokens', None)} tokens, inputs have {n}")
    if E_groups is None:
        if E is None:
            raise ValueError("either E or E_groups is required")
        E_groups = decay_submatrix(_check_decay(E, n), plan.groups)
    E_groups = np.asarray(E_groups, dtype=np.float64)
    g, k = plan.num_groups, plan.group_size
    if E_groups.shape[-3:] != (g, k, k):
        raise ShapeError(f"group decay shape {E_groups.shape} does not match plan ({g}, {k}, {k})")

    qg = T.take_rows(inp.q, plan.groups, axis=-2, pad_value=pad_value)
    kg = T.take_rows(inp.k, plan.groups, axis=-2, pad_value=pad_value)
    vg = T.take_rows(inp.v, plan.groups, axis=-2, pad_value=pad_value)
    keep = np.broadcast_to(plan.valid[:, None, :], (g, k, k))
    p = T.masked_softmax_rows(_scores(qg, kg, mode.scale_by_sqrt_d), keep)
    w = _apply_decay(p, E_groups, mode)
    if capture is not None:
        capture.append(AttnCapture(expand_groups(w.data, plan), plan.support(), inp.grid, plan.kind.value))
    out = T.matmul(w, vg)
    lead = out.shape[:-3]
    flat = T.reshape(out, lead + (g * k, inp.head_dim))
    return T.take_rows(flat, plan.inverse(), axis=-2)


def lce(v_map, kernel, bias=None):
    """Local context enhancement: depthwise conv (stride 1, same padding) over V laid out as a map."""
    kernel = T.as_tensor(kernel)
    kh, kw = kernel.shape[-2:]
    if kh != kw:
        raise ShapeError(f"LCE kernel must be square, got {kh}x{kw}")
    return T.depthwise_conv2d(v_map, kernel, stride=1, pad=kh // 2, bias=bias)


@dataclass(frozen=True)
class Full:
    pass


@dataclass(frozen=True)
class Decomposed:
    h: int
    w: int


@dataclass(frozen=True)
class Grouped:
    k: int


def attention_flops(n_tokens, d, variant):
    """FLOPs of the two attention matmuls (scores and weighted sum).

    One multiply-add counts as 2 FLOPs; softmax, decay and masking are
    excluded. ``d`` is the total width summed over heads.
    """
    n = n_tokens
    if isinstance(variant, Full):
        return 2 * 2 * n * n * d
    if isinstance(variant, Decomposed):
        if variant.h * variant.w != n:
            raise ValueError(f"decomposed grid {variant.h}x{variant.w} does not hold {n} tokens")
        h, w = variant.h, variant.w
        return 2 * 2 * (h * w * w * d + h * h * w * d)
    if isinstance(variant, Grouped):
        k = variant.k
        n_pad = n + (-n) % k
        return 2 * 2 * n_pad * k * d
    raise TypeError(f"unknown attention variant {variant!r}")
