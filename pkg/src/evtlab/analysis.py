"""Analysis tools: divergences, attention entropy, coordinate gradients of
decayed attention, receptive-field bounds and reachability, graph Laplacian
and attention rollout. Logarithms are natural throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from evtlab.attention import GroupPlan
from evtlab.decay import GridCoords, pairwise_distance

_NORM_TOL = 1e-9


def _distribution(p, name):
    p = np.asarray(p, dtype=np.float64)
    if (p < 0).any() or abs(p.sum() - 1.0) > _NORM_TOL:
        raise ValueError(f"{name} must be a non-negative vector summing to 1")
    return p


def kl_divergence(p, q):
    """``sum_i p_i log(p_i / q_i)``; terms with ``p_i = 0`` vanish, ``q_i = 0 < p_i`` gives inf."""
    p, q = _distribution(p, "p"), _distribution(q, "q")
    support = p > 0
    if (q[support] == 0).any():
        return math.inf
    ps, qs = p[support], q[support]
    return float(np.sum(ps * np.log(ps / qs)))


def js_divergence(p, q):
    p, q = _distribution(p, "p"), _distribution(q, "q")
    return float(_js_rows(p, q))


def _js_rows(P, Q):
    """Row-wise JS divergence of two stacks of distributions (last axis)."""
    # 2P / (P + Q) instead of P / M: halving a subnormal entry can underflow to 0
    S = P + Q
    with np.errstate(divide="ignore", invalid="ignore"):
        tp = np.where(P > 0, P * np.log(2 * P / S), 0.0)
        tq = np.where(Q > 0, Q * np.log(2 * Q / S), 0.0)
    return 0.5 * tp.sum(axis=-1) + 0.5 * tq.sum(axis=-1)


def spatial_entropy(row):
    """Shannon entropy of a normalised attention row (``0 log 0 = 0``)."""
    row = np.asarray(row, dtype=np.float64)
    nz = row[row > 0]
    return float(-np.sum(nz * np.log(nz)))


# ---------------------------------------------------------------------------
# attention reports


@dataclass
class LayerAttention:
    label: str
    weights: np.ndarray  # (heads, N, N), rows sum to 1
    support: np.ndarray  # (N, N) bool
    grid: GridCoords | None = None


@dataclass
class AttnReport:
    """Row-stochastic attention matrices for a sequence of layers."""

    layers: list = field(default_factory=list)

    @classmethod
    def from_captures(cls, captures):
        report = cls()
        for cap in captures:
            w = np.asarray(cap.weights, dtype=np.float64)
            if w.ndim == 2:
                w = w[None]
            if w.ndim != 3:
                raise ValueError(f"expected (heads, N, N) weights, got shape {w.shape}")
            s = w.sum(axis=-1, keepdims=True)
            report.layers.append(LayerAttention(cap.label, w / s, np.asarray(cap.support, dtype=bool), cap.grid))
        return report

    def n_tokens(self):
        sizes = {layer.weights.shape[-1] for layer in self.layers}
        if len(sizes) != 1:
            raise ValueError(f"report mixes token counts {sorted(sizes)}")
        return sizes.pop()

    def by_tokens(self):
        """Split into one report per token count (one per stage)."""
        out = {}
        for layer in self.layers:
            out.setdefault(layer.weights.shape[-1], AttnReport()).layers.append(layer)
        return out


def attention_js_protocol(reference, candidate_decay):
    """Mean JS divergence between candidate rows and the reference attention rows.

    ``candidate_decay`` is a decay matrix, (N, N) or (heads, N, N), or another
    :class:`AttnReport` with matching layers (compared layer by layer). Each
    candidate row is restricted to the tokens the reference layer could attend
    to (its group, for grouped layers) and normalised. The mean runs over rows,
    heads and layers.
    """
    n = reference.n_tokens()
    if isinstance(candidate_decay, AttnReport):
        if len(candidate_decay.layers) != len(reference.layers):
            raise ValueError("reports have different layer counts")
        cands = [layer.weights for layer in candidate_decay.layers]
        renormalize = False  # already row-stochastic
    else:
        cand = np.asarray(candidate_decay, dtype=np.float64)
        cands = [cand] * len(reference.layers)
        renormalize = True
    total, count = 0.0, 0
    for layer, cand in zip(reference.layers, cands):
        if cand.shape[-2:] != (n, n):
            raise ValueError(f"candidate {cand.shape} does not match {n} tokens")
        heads = layer.weights.shape[0]
        c = np.where(layer.support, np.broadcast_to(cand, (heads, n, n)), 0.0)
        if renormalize:
            c = c / c.sum(axis=-1, keepdims=True)
        js = _js_rows(layer.weights, c)
        total += float(js.sum())
        count += js.size
    return total / count


def entropy_table(report):
    """``(layer index, head, row-mean entropy)`` for every layer/head."""
    rows = []
    for li, layer in enumerate(report.layers):
        w = layer.weights
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = -np.where(w > 0, w * np.log(w), 0.0).sum(axis=-1)
        for h in range(w.shape[0]):
            rows.append((li, h, float(ent[h].mean())))
    return rows


# ---------------------------------------------------------------------------
# coordinate gradients of renormalised decayed attention


def renormalized_row(q, k, coords, gamma, n, kind="euclidean", scale=None, neighborhood=None):
    """Row ``n`` of ``exp(q_n k_m / sqrt(d)) * gamma**d_nm`` normalised over ``neighborhood``."""
    q, k = np.asarray(q, dtype=np.float64), np.asarray(k, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    s = (k @ q[n]) * (1.0 / math.sqrt(q.shape[-1]) if scale is None else scale)
    dist = pairwise_distance(coords[n:n + 1], coords, kind)[0]
    dist[n] = 0.0
    logits = s + dist * math.log(gamma)
    mask = np.ones(len(coords), dtype=bool) if neighborhood is None else _mask(neighborhood, len(coords))
    logits = np.where(mask, logits, -np.inf)
    e = np.exp(logits - logits[mask].max())
    return e / e.sum()


def _mask(neighborhood, n):
    m = np.zeros(n, dtype=bool)
    m[np.asarray(neighborhood, dtype=np.int64)] = True
    return m


def _coords(grid, coords):
    return grid.coords() if coords is None else np.asarray(coords, dtype=np.float64)


def coord_grad_l2(q, k, grid, gamma, n, axis=0, coords=None, scale=None, neighborhood=None):
    """Analytic ``dA_nm / dx_n`` (``axis=0``) or ``/ dy_n`` (``axis=1``) for Euclidean decay.

    ``log(gamma) * A_nm * (u_nm - sum_k A_nk u_nk)`` with ``u_nm = (x_n - x_m) / d_nm``
    and the self term ``u_nn = 0``. Returns a length-N vector (0 outside the
    neighbourhood). ``coords`` overrides the grid positions with real values.
    """
    c = _coords(grid, coords)
    if not 0 <= n < len(c):
        raise IndexError(f"token {n} out of range")
    a = renormalized_row(q, k, c, gamma, n, "euclidean", scale, neighborhood)
    diff = c[n, axis] - c[:, axis]
    d = np.sqrt(((c[n] - c) ** 2).sum(axis=1))
    u = np.zeros(len(c))
    off = np.arange(len(c)) != n
    u[off] = diff[off] / d[off]
    return math.log(gamma) * a * (u - np.dot(a, u))


def coord_grad_l1(q, k, grid, gamma, n, axis=0, coords=None, scale=None, neighborhood=None):
    """Analytic L1-decay counterpart: ``log(gamma) * A_nm * (sign_nm - sum_k A_nk sign_nk)``, ``sign(0) = 0``."""
    c = _coords(grid, coords)
    if not 0 <= n < len(c):
        raise IndexError(f"token {n} out of range")
    a = renormalized_row(q, k, c, gamma, n, "manhattan", scale, neighborhood)
    sg = np.sign(c[n, axis] - c[:, axis])
    sg[n] = 0.0
    return math.log(gamma) * a * (sg - np.dot(a, sg))


def second_deriv_l2(grid, gamma, n, m, coords=None):
    """``E_nm (log gamma)^2 (y_n - y_m)^2 / ((x_n - x_m)^2 + (y_n - y_m)^2)^{3/2}``."""
    if n == m:
        raise ValueError("second derivative is undefined at zero distance (n == m)")
    c = _coords(grid, coords)
    dx, dy = c[n, 0] - c[m, 0], c[n, 1] - c[m, 1]
    r2 = dx * dx + dy * dy
    e = gamma ** math.sqrt(r2)
    return e * math.log(gamma) ** 2 * dy * dy / r2 ** 1.5


# ---------------------------------------------------------------------------
# receptive fields


@dataclass(frozen=True)
class RFModel:
    w: int
    g: int
    L: int
    N: int

    def __post_init__(self):
        if self.w < 1 or self.g < 1 or self.N < 1 or self.L < 0:
            raise ValueError("w, g and N must be positive and L non-negative")


@dataclass(frozen=True)
class RFBounds:
    f_1d: int
    f_2d: int
    ratio: float
    full_coverage_layers: int
    bound_1d: int
    bound_2d: int
    single_group_bound: int


def rf_bounds(model):
    """Growth curves and upper bounds on reachable-set size for 1D vs 2D grouping."""
    w, g, L, N = model.w, model.g, model.L, model.N
    f_2d = w * L
    f_1d = g * w * L
    return RFBounds(
        f_1d=f_1d,
        f_2d=f_2d,
        ratio=f_1d / f_2d if f_2d else float(g),
        full_coverage_layers=-(-N // (g * w)),
        bound_1d=min(N, f_1d),
        bound_2d=min(N, f_2d),
        single_group_bound=1 + w * L,
    )


def rf_bruteforce(plans, n_tokens):
    """Exact reachability after applying each plan's within-group mixing in order.

    Row ``n`` of the result marks every token whose information can reach
    token ``n`` (equivalently, by symmetry of each layer, that ``n`` reaches).
    """
    reach = np.eye(n_tokens, dtype=bool)
    for plan in plans:
        if not isinstance(plan, GroupPlan) or plan.n_tokens != n_tokens:
            raise ValueError(f"plan does not cover {n_tokens} tokens")
        gid = plan.group_of()
        member = np.zeros((n_tokens, plan.num_groups), dtype=np.float32)
        member[np.arange(n_tokens), gid] = 1.0
        touched = (reach.astype(np.float32) @ member) > 0
        reach = touched[:, gid]
    return reach


def laplacian(E):
    """Graph Laplacian ``diag(E 1) - E`` of a symmetric weight matrix."""
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] != E.shape[1] or not np.array_equal(E, E.T):
        raise ValueError("Laplacian needs a square symmetric matrix")
    return np.diag(E.sum(axis=1)) - E


def attention_rollout(report):
    """Product of head-averaged, identity-mixed, row-normalised layer attention.

    ``rollout = A_L ... A_1`` with ``A_l = normalize(mean_heads(W_l) + I)``.
    """
    n = report.n_tokens()
    out = np.eye(n)
    for layer in report.layers:
        a = layer.weights.mean(axis=0) + np.eye(n)
        a = a / a.sum(axis=-1, keepdims=True)
        out = a @ out
    return out


def receptive_field(attn_row, eps=None):
    """Indices ``m`` with ``A_nm > eps`` (default ``1 / N``)."""
    row = np.asarray(attn_row, dtype=np.float64)
    eps = 1.0 / row.size if eps is None else eps
    return np.nonzero(row > eps)[0]


# ---------------------------------------------------------------------------
# exports


def heatmap_pgm(values, height, width, maxval=255):
    """Plain PGM (P2) text of ``values`` reshaped to ``height x width``, linearly scaled to 0..maxval."""
    v = np.asarray(values, dtype=np.float64).reshape(height, width)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros(v.shape, dtype=np.int64) if hi == lo else np.rint((v - lo) / (hi - lo) * maxval).astype(np.int64)
    lines = ["P2", f"{width} {height}", str(maxval)]
    lines += [" ".join(str(int(x)) for x in row) for row in scaled]
    return "\n".join(lines) + "\n"


def format_metric(name, layer, head, value):
    return f"{name} {layer} {head} {value:.17g}"
