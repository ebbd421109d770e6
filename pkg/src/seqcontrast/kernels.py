"""Sequential distance kernels with analytic gradients.

Three trainable distances between time-major feature matrices:

* interpolated Euclidean: resample one sequence to the other's length,
  average squared per-element differences;
* soft dynamic time warping: log-sum-exp relaxation of the shortest
  alignment path, temperature ``gamma``;
* entropic Wasserstein: Sinkhorn transport with a squared normalized-time
  position penalty that makes the cost order-sensitive.

All kernels divide the per-frame squared cost by the channel count so
values are comparable across feature widths, and promote inputs to
float64. Hard DTW is provided as an evaluation-time alternative (no
gradient). Gradients are exact reverse-mode except for the Wasserstein,
which freezes the transport plan (envelope rule).
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

V2A = "v2a"
A2V = "a2v"
PRE = "pre"
POST = "post"


@dataclass(frozen=True)
class EuclInterp:
    """Interpolated Euclidean distance.

    ``direction`` picks which role gets resampled (v2a: the video-role
    sequence is resampled to the audio-role length). ``stage`` records
    whether resampling happens on raw features before encoding (pre) or on
    latents inside the kernel (post); the kernel itself always resolves
    ragged lengths at call time, the trainer enacts the pre stage.
    """

    direction: str = V2A
    stage: str = POST

    def __post_init__(self):
        if self.direction not in (V2A, A2V):
            raise ValueError(f"direction must be '{V2A}' or '{A2V}', got {self.direction!r}")
        if self.stage not in (PRE, POST):
            raise ValueError(f"stage must be '{PRE}' or '{POST}', got {self.stage!r}")


@dataclass(frozen=True)
class SoftDTW:
    gamma: float = 0.1

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")


@dataclass(frozen=True)
class HardDTW:
    """Min-plus DTW; evaluation only, no gradient."""


@dataclass(frozen=True)
class Wasserstein:
    epsilon: float = 0.1
    iters: int = 100
    pos_weight: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.pos_weight < 0:
            raise ValueError("pos_weight must be >= 0")


DistanceKind = EuclInterp | SoftDTW | HardDTW | Wasserstein


@dataclass
class KernelGrad:
    """Partial derivatives of a scalar distance w.r.t. both inputs."""

    grad_x: np.ndarray
    grad_y: np.ndarray


@dataclass(frozen=True)
class DistanceMatrix:
    """Q x K pairwise sequential distances for one DistanceKind."""

    values: np.ndarray
    kind: DistanceKind

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError("distance matrix must be 2-D")
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite distance entries")
        object.__setattr__(self, "values", vals)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def as_matrix(seq) -> np.ndarray:
    """Coerce a FeatureSequence or array-like to a float64 T x c matrix."""
    data = getattr(seq, "data", seq)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a T x c matrix, got shape {arr.shape}")
    return arr


def interp_weights(t: int, length: int) -> np.ndarray | None:
    """Endpoint-aligned linear resampling matrix W (length x t), or None
    when length == t (identity)."""
    if t < 1 or length < 1:
        raise ValueError("lengths must be >= 1")
    if length == t:
        return None
    if length == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(length) * ((t - 1) / (length - 1))
    lo = np.minimum(pos.astype(np.int64), t - 1)
    hi = np.minimum(lo + 1, t - 1)
    frac = pos - lo
    w = np.zeros((length, t))
    rows = np.arange(length)
    w[rows, lo] += 1.0 - frac
    w[rows, hi] += frac
    return w


def linear_interp(seq, length: int) -> np.ndarray:
    """Resample a T x c matrix to `length` rows; identity when length == T."""
    x = as_matrix(seq)
    w = interp_weights(x.shape[0], length)
    return x.copy() if w is None else w @ x


def _check_dims(x: np.ndarray, y: np.ndarray) -> int:
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    return x.shape[1]


def eucl_dist(x, y, direction: str = V2A) -> tuple[float, KernelGrad]:
    """Mean squared difference after resampling one sequence to the other.

    v2a resamples x (video role) to y's length; a2v the reverse. The
    gradient flows through the resampling weights.
    """
    xm, ym = as_matrix(x), as_matrix(y)
    c = _check_dims(xm, ym)
    if direction == V2A:
        w = interp_weights(xm.shape[0], ym.shape[0])
        xi = xm if w is None else w @ xm
        diff = xi - ym
        scale = 2.0 / diff.size
        g_int = scale * diff
        grad_x = g_int if w is None else w.T @ g_int
        grad_y = -g_int
    elif direction == A2V:
        w = interp_weights(ym.shape[0], xm.shape[0])
        yi = ym if w is None else w @ ym
        diff = xm - yi
        scale = 2.0 / diff.size
        g_int = scale * diff
        grad_x = g_int
        grad_y = -g_int if w is None else w.T @ -g_int
    else:
        raise ValueError(f"direction must be '{V2A}' or '{A2V}', got {direction!r}")
    value = float(np.mean(diff * diff))
    return value, KernelGrad(np.array(grad_x, copy=True), np.array(grad_y, copy=True))


def _eucl_value(x: np.ndarray, y: np.ndarray, direction: str) -> float:
    c = _check_dims(x, y)
    if direction == V2A:
        w = interp_weights(x.shape[0], y.shape[0])
        diff = (x if w is None else w @ x) - y
    else:
        w = interp_weights(y.shape[0], x.shape[0])
        diff = x - (y if w is None else w @ y)
    return float(np.mean(diff * diff))


def _frame_cost(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean frame cost divided by the channel count."""
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff) / x.shape[1]


def _sdtw_forward(cost: np.ndarray, gamma: float) -> np.ndarray:
    """Soft-min accumulated cost table, vectorized over anti-diagonals."""
    n, m = cost.shape
    r = np.full((n + 1, m + 1), np.inf)
    r[0, 0] = 0.0
    for k in range(2, n + m + 1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        j = k - i
        stack = np.stack((r[i - 1, j - 1], r[i - 1, j], r[i, j - 1]))
        mins = stack.min(axis=0)
        # every interior cell has at least one finite predecessor
        softmin = mins - gamma * np.log(np.exp(-(stack - mins) / gamma).sum(axis=0))
        r[i, j] = cost[i - 1, j - 1] + softmin
    return r


def _sdtw_backward(cost: np.ndarray, r: np.ndarray, gamma: float) -> np.ndarray:
    """Soft alignment weights E[i,j] = d(value)/d(cost[i,j])."""
    n, m = cost.shape
    rb = np.full((n + 2, m + 2), -np.inf)
    rb[1:n + 1, 1:m + 1] = r[1:, 1:]
    rb[n + 1, m + 1] = r[n, m]
    cb = np.zeros((n + 2, m + 2))
    cb[1:n + 1, 1:m + 1] = cost
    e = np.zeros((n + 2, m + 2))
    e[n + 1, m + 1] = 1.0
    for k in range(n + m, 1, -1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        j = k - i
        here = rb[i, j]
        w_down = np.exp((rb[i + 1, j] - cb[i + 1, j] - here) / gamma)
        w_right = np.exp((rb[i, j + 1] - cb[i, j + 1] - here) / gamma)
        w_diag = np.exp((rb[i + 1, j + 1] - cb[i + 1, j + 1] - here) / gamma)
        e[i, j] = w_down * e[i + 1, j] + w_right * e[i, j + 1] + w_diag * e[i + 1, j + 1]
    return e[1:n + 1, 1:m + 1]


def soft_dtw(x, y, gamma: float = 0.1) -> tuple[float, KernelGrad]:
    """Differentiable DTW: soft-min recursion over the alignment lattice.

    value = R(T_x, T_y) / (T_x + T_y), which equals the log-sum-exp
    aggregate of all monotonic alignment path costs at temperature gamma.
    May be <= 0 for near-identical inputs; tends to hard DTW as gamma -> 0.
    """
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    xm, ym = as_matrix(x), as_matrix(y)
    c = _check_dims(xm, ym)
    n, m = xm.shape[0], ym.shape[0]
    cost = _frame_cost(xm, ym)
    with np.errstate(invalid="ignore", over="ignore"):
        r = _sdtw_forward(cost, gamma)
        e = _sdtw_backward(cost, r, gamma)
    norm = n + m
    value = float(r[n, m]) / norm
    e = e / norm
    grad_x = (2.0 / c) * (e.sum(axis=1)[:, None] * xm - e @ ym)
    grad_y = (2.0 / c) * (e.sum(axis=0)[:, None] * ym - e.T @ xm)
    return value, KernelGrad(grad_x, grad_y)


def _soft_dtw_value(x: np.ndarray, y: np.ndarray, gamma: float) -> float:
    cost = _frame_cost(x, y)
    with np.errstate(invalid="ignore", over="ignore"):
        r = _sdtw_forward(cost, gamma)
    return float(r[-1, -1]) / (x.shape[0] + y.shape[0])


def hard_dtw(x, y) -> float:
    """Shortest-alignment-path DTW, same normalization as soft_dtw."""
    xm, ym = as_matrix(x), as_matrix(y)
    _check_dims(xm, ym)
    n, m = xm.shape[0], ym.shape[0]
    cost = _frame_cost(xm, ym)
    r = np.full((n + 1, m + 1), np.inf)
    r[0, 0] = 0.0
    for k in range(2, n + m + 1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        j = k - i
        stack = np.stack((r[i - 1, j - 1], r[i - 1, j], r[i, j - 1]))
        r[i, j] = cost[i - 1, j - 1] + stack.min(axis=0)
    return float(r[n, m]) / (n + m)


def _transport_cost(x: np.ndarray, y: np.ndarray, pos_weight: float) -> np.ndarray:
    cost = _frame_cost(x, y)
    n, m = cost.shape
    if pos_weight > 0.0 and n > 1 and m > 1:
        px = np.arange(n) / (n - 1)
        py = np.arange(m) / (m - 1)
        cost = cost + pos_weight * (px[:, None] - py[None, :]) ** 2
    return cost


def _sinkhorn_log(cost: np.ndarray, epsilon: float, iters: int, tol: float = 1e-6):
    """Log-domain Sinkhorn with uniform marginals.

    Returns (plan, violation, iterations run, potential history); the
    history of (u_t, v_t) iterates drives the exact reverse-mode pass.
    """
    n, m = cost.shape
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    mat = -cost / epsilon
    us = [np.zeros(n)]
    vs = [np.zeros(m)]
    violation = np.inf
    it = 0
    for it in range(1, iters + 1):
        u = log_a - logsumexp(mat + vs[-1][None, :], axis=1)
        v = log_b - logsumexp(mat + u[:, None], axis=0)
        us.append(u)
        vs.append(v)
        row_sums = np.exp(u + logsumexp(mat + v[None, :], axis=1))
        violation = float(np.max(np.abs(row_sums - np.exp(log_a))))
        if violation < tol:
            break
    plan = np.exp(mat + us[-1][:, None] + vs[-1][None, :])
    return plan, violation, it, (mat, us, vs)


def _sinkhorn_cost_grad(cost: np.ndarray, plan: np.ndarray, history) -> np.ndarray:
    """d<P, C>/dC by reverse-mode through the executed Sinkhorn iterations.

    Exact for the truncated iteration actually run (any epsilon, any
    iteration count), unlike the envelope shortcut that freezes P.
    """
    mat, us, vs = history
    g_l = cost * plan
    g_mat = g_l.copy()
    g_u = g_l.sum(axis=1)
    g_v = g_l.sum(axis=0)
    for t in range(len(us) - 1, 0, -1):
        a_t = mat + us[t][:, None]
        s_col = np.exp(a_t - logsumexp(a_t, axis=0, keepdims=True))
        g_a = -s_col * g_v[None, :]
        g_mat += g_a
        g_u = g_u + g_a.sum(axis=1)
        b_t = mat + vs[t - 1][None, :]
        s_row = np.exp(b_t - logsumexp(b_t, axis=1, keepdims=True))
        g_b = -s_row * g_u[:, None]
        g_mat += g_b
        g_v = g_b.sum(axis=0)
        g_u = np.zeros_like(g_u)
    return g_mat


def wasserstein(x, y, epsilon: float = 0.1, iters: int = 100,
                pos_weight: float = 1.0, tol: float = 1e-6) -> tuple[float, KernelGrad]:
    """Entropic optimal transport cost with a time-position penalty.

    Cost entries combine the per-frame squared distance with
    pos_weight * (k/(T_x-1) - l/(T_y-1))^2, dropped when either length is
    1, so reordering frames changes the distance. Returns the sharp cost
    <P, C> (no entropy term). The gradient is exact reverse-mode through
    the Sinkhorn iterations actually run (freezing P instead leaves an
    error comparable to the gradient itself at moderate epsilon).
    Non-convergence is reported via logging, not raised.
    """
    value, grad, _ = wasserstein_with_info(x, y, epsilon, iters, pos_weight, tol)
    return value, grad


def wasserstein_with_info(x, y, epsilon: float = 0.1, iters: int = 100,
                          pos_weight: float = 1.0, tol: float = 1e-6):
    """wasserstein() plus a dict with marginal_violation and iterations."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    xm, ym = as_matrix(x), as_matrix(y)
    c = _check_dims(xm, ym)
    cost = _transport_cost(xm, ym, pos_weight)
    plan, violation, ran, history = _sinkhorn_log(cost, epsilon, iters, tol)
    value = float(np.sum(plan * cost))
    grad_cost = plan - _sinkhorn_cost_grad(cost, plan, history) / epsilon
    grad_x = (2.0 / c) * (grad_cost.sum(axis=1)[:, None] * xm - grad_cost @ ym)
    grad_y = (2.0 / c) * (grad_cost.sum(axis=0)[:, None] * ym - grad_cost.T @ xm)
    if violation >= 1e-6:
        logger.debug("sinkhorn stopped after %d iters with marginal violation %.3e", ran, violation)
    info = {"marginal_violation": violation, "iterations": ran}
    return value, KernelGrad(grad_x, grad_y), info


def _wasserstein_value(x: np.ndarray, y: np.ndarray, kind: Wasserstein) -> float:
    cost = _transport_cost(x, y, kind.pos_weight)
    plan, _, _, _ = _sinkhorn_log(cost, kind.epsilon, kind.iters)
    return float(np.sum(plan * cost))


def distance_with_grad(x, y, kind: DistanceKind) -> tuple[float, KernelGrad]:
    """Dispatch a differentiable kernel by kind."""
    if isinstance(kind, EuclInterp):
        return eucl_dist(x, y, kind.direction)
    if isinstance(kind, SoftDTW):
        return soft_dtw(x, y, kind.gamma)
    if isinstance(kind, Wasserstein):
        return wasserstein(x, y, kind.epsilon, kind.iters, kind.pos_weight)
    if isinstance(kind, HardDTW):
        raise ValueError("hard DTW is evaluation-only and has no gradient")
    raise TypeError(f"unknown distance kind: {kind!r}")


def distance_value(x, y, kind: DistanceKind) -> float:
    """Forward-only distance by kind (cheaper than distance_with_grad)."""
    xm, ym = as_matrix(x), as_matrix(y)
    if isinstance(kind, EuclInterp):
        return _eucl_value(xm, ym, kind.direction)
    if isinstance(kind, SoftDTW):
        return _soft_dtw_value(xm, ym, kind.gamma)
    if isinstance(kind, HardDTW):
        return hard_dtw(xm, ym)
    if isinstance(kind, Wasserstein):
        return _wasserstein_value(xm, ym, kind)
    raise TypeError(f"unknown distance kind: {kind!r}")


def pairwise_matrix(videos, audios, kind: DistanceKind, workers: int | None = None) -> DistanceMatrix:
    """Entry (i, j) = distance(videos[i], audios[j]) under `kind`.

    Entries are independent scalar kernel calls with disjoint writes, so
    the result is bitwise identical for any worker count.
    """
    vids = [as_matrix(v) for v in videos]
    auds = [as_matrix(a) for a in audios]
    out = np.empty((len(vids), len(auds)))
    if workers is None or workers <= 0:
        workers = os.cpu_count() or 1

    def fill_row(i: int) -> None:
        vi = vids[i]
        for j, aj in enumerate(auds):
            out[i, j] = distance_value(vi, aj, kind)

    if workers == 1 or len(vids) == 1:
        for i in range(len(vids)):
            fill_row(i)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill_row, range(len(vids))))
    return DistanceMatrix(out, kind)


# --- batched interpolated-Euclidean paths used by the trainer and retrieval ---

def grouped_eucl_forward(videos, audios, direction: str = V2A):
    """Pairwise interpolated-Euclidean matrix via flattened matmuls.

    Groups the non-interpolated side by length; each group's block is
    computed with one Gram-trick matmul. Returns (values, cache) where the
    cache drives grouped_eucl_backward. Matches the scalar kernel to
    float64 rounding (~1e-12 relative), not bitwise.
    """
    xs = [as_matrix(v) for v in videos]
    ys = [as_matrix(a) for a in audios]
    if direction == V2A:
        cache = _GroupedEuclCache(xs, ys, swap=False)
    elif direction == A2V:
        cache = _GroupedEuclCache(ys, xs, swap=True)
    else:
        raise ValueError(f"direction must be '{V2A}' or '{A2V}', got {direction!r}")
    return cache.values, cache


class _GroupedEuclCache:
    """Forward state for the grouped Euclidean path.

    `movers` are the sequences that get interpolated (video role for v2a);
    `anchors` keep their length. With swap=True the output matrix is
    transposed back so rows always index videos.
    """

    def __init__(self, movers: list[np.ndarray], anchors: list[np.ndarray], swap: bool):
        self.swap = swap
        self.movers = movers
        self.anchors = anchors
        c = movers[0].shape[1]
        for arr in (*movers, *anchors):
            if arr.shape[1] != c:
                raise ValueError("feature dims differ across batch")
        self.c = c
        self.groups = {}
        vals = np.empty((len(movers), len(anchors)))
        lengths = sorted({a.shape[0] for a in anchors})
        for length in lengths:
            idx = np.array([j for j, a in enumerate(anchors) if a.shape[0] == length])
            movers_flat = np.stack([
                (m if m.shape[0] == length else interp_weights(m.shape[0], length) @ m).ravel()
                for m in movers
            ])
            anchors_flat = np.stack([anchors[j].ravel() for j in idx])
            sq_m = np.einsum("ij,ij->i", movers_flat, movers_flat)
            sq_a = np.einsum("ij,ij->i", anchors_flat, anchors_flat)
            block = sq_m[:, None] - 2.0 * movers_flat @ anchors_flat.T + sq_a[None, :]
            vals[:, idx] = block / (length * c)
            self.groups[length] = (idx, movers_flat, anchors_flat)
        self.values = vals.T if swap else vals

    def backward(self, grad_values: np.ndarray):
        """VJP: gradients w.r.t. every video and audio sequence."""
        g = grad_values.T if self.swap else grad_values
        c = self.c
        grad_movers = [np.zeros_like(m) for m in self.movers]
        grad_anchors = [np.zeros_like(a) for a in self.anchors]
        for length, (idx, movers_flat, anchors_flat) in sorted(self.groups.items()):
            gb = g[:, idx]
            scale = 2.0 / (length * c)
            gm_flat = scale * (gb.sum(axis=1)[:, None] * movers_flat - gb @ anchors_flat)
            ga_flat = scale * (gb.sum(axis=0)[:, None] * anchors_flat - gb.T @ movers_flat)
            for i, m in enumerate(self.movers):
                gm = gm_flat[i].reshape(length, c)
                w = interp_weights(m.shape[0], length)
                grad_movers[i] += gm if w is None else w.T @ gm
            for col, j in enumerate(idx):
                grad_anchors[j] += ga_flat[col].reshape(length, c)
        if self.swap:
            return grad_anchors, grad_movers
        return grad_movers, grad_anchors
