"""Independent numerical oracles: finite differences and brute-force distances.

The oracles deliberately share no arithmetic with the kernels they check:
path enumeration and permutation search run on Python floats, and the
gradient checker perturbs flat parameter vectors with central differences.
Every differentiable operation in the package has a registered gradcheck
target; `run_gradcheck` is the one-stop verification entry point.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import encoder as enc_mod
from . import losses as loss_mod
from .kernels import (EuclInterp, SoftDTW, Wasserstein, eucl_dist, soft_dtw,
                      wasserstein)

DEFAULT_H = 1e-5

GRADCHECK_WASS = Wasserstein(epsilon=0.1, iters=100, pos_weight=1.0)


@dataclass
class GradCheckReport:
    target: str
    coords: int
    max_rel_err: float
    max_abs_err: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.target}: max_rel={self.max_rel_err:.3e} "
                f"max_abs={self.max_abs_err:.3e} coords={self.coords} thr={self.threshold:.0e}")


def numeric_gradient(f, point, h: float = DEFAULT_H, coords=None) -> np.ndarray:
    """Central-difference gradient of a scalar function at `point`.

    With `coords` only those flat indices are probed (the returned vector
    has one entry per probed coordinate, in order).
    """
    x = np.array(point, dtype=np.float64).ravel()
    idx = range(x.size) if coords is None else coords
    out = np.empty(len(idx) if coords is not None else x.size)
    for pos, i in enumerate(idx):
        xp = x.copy()
        xp[i] += h
        up = float(f(xp))
        xp[i] -= 2 * h
        down = float(f(xp))
        if not (math.isfinite(up) and math.isfinite(down)):
            raise ValueError(f"non-finite evaluation while probing coordinate {i}")
        out[pos] = (up - down) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


# --- brute-force distance oracles (pure Python arithmetic) ---

def count_alignment_paths(n: int, m: int) -> int:
    """Number of monotone paths from (0,0) to (n-1,m-1) with steps right/down/diag."""
    table = [[0] * m for _ in range(n)]
    table[0][0] = 1
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            total = 0
            if i > 0:
                total += table[i - 1][j]
            if j > 0:
                total += table[i][j - 1]
            if i > 0 and j > 0:
                total += table[i - 1][j - 1]
            table[i][j] = total
    return table[n - 1][m - 1]


def enumerate_alignment_paths(n: int, m: int, limit: int = 10_000) -> list[list[tuple[int, int]]]:
    """All monotone alignment paths as lists of visited cells."""
    if count_alignment_paths(n, m) > limit:
        raise ValueError(f"instance too large: more than {limit} alignment paths")
    paths = []
    stack = [[(0, 0)]]
    while stack:
        path = stack.pop()
        i, j = path[-1]
        if i == n - 1 and j == m - 1:
            paths.append(path)
            continue
        if i + 1 < n:
            stack.append(path + [(i + 1, j)])
        if j + 1 < m:
            stack.append(path + [(i, j + 1)])
        if i + 1 < n and j + 1 < m:
            stack.append(path + [(i + 1, j + 1)])
    return paths


def _cell_cost(x, y, i: int, j: int) -> float:
    c = len(x[0])
    total = 0.0
    for k in range(c):
        d = float(x[i][k]) - float(y[j][k])
        total += d * d
    return total / c


def brute_dtw(x, y, gamma: float | None = None) -> float:
    """Exhaustive-path DTW: min path cost, or soft aggregation when gamma given.

    Same (T_x + T_y) normalization as the kernel; costs are accumulated
    with plain Python floats, independently of the kernel's array math.
    """
    x = [list(map(float, row)) for row in np.atleast_2d(np.asarray(x, dtype=np.float64))]
    y = [list(map(float, row)) for row in np.atleast_2d(np.asarray(y, dtype=np.float64))]
    n, m = len(x), len(y)
    norm = n + m
    costs = []
    for path in enumerate_alignment_paths(n, m):
        total = 0.0
        for i, j in path:
            total += _cell_cost(x, y, i, j)
        costs.append(total)
    if gamma is None:
        return min(costs) / norm
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    low = min(costs)
    acc = 0.0
    for cost in costs:
        acc += math.exp(-(cost - low) / gamma)
    return (low - gamma * math.log(acc)) / norm


def brute_wasserstein(x, y, pos_weight: float = 1.0) -> float:
    """Minimum over permutation plans; valid for equal lengths <= 4.

    With uniform square marginals an optimal transport plan is a
    permutation matrix, so the search is exact in the epsilon -> 0 limit.
    """
    x = [list(map(float, row)) for row in np.atleast_2d(np.asarray(x, dtype=np.float64))]
    y = [list(map(float, row)) for row in np.atleast_2d(np.asarray(y, dtype=np.float64))]
    if len(x) != len(y):
        raise ValueError("brute_wasserstein needs equal lengths")
    t = len(x)
    if t > 4:
        raise ValueError("instance too large: permutation search limited to T <= 4")
    best = math.inf
    for perm in itertools.permutations(range(t)):
        total = 0.0
        for k, l in enumerate(perm):
            cost = _cell_cost(x, y, k, l)
            if pos_weight > 0.0 and t > 1:
                delta = k / (t - 1) - l / (t - 1)
                cost += pos_weight * delta * delta
            total += cost
        best = min(best, total / t)
    return best


# --- gradcheck targets ---

def _unit_rms(rng: np.random.Generator, shape) -> np.ndarray:
    x = rng.standard_normal(shape)
    return x / np.sqrt(np.mean(x * x))


def _sample(rng: np.random.Generator, size: int, k: int = 5) -> list[int]:
    k = min(k, size)
    return sorted(rng.choice(size, size=k, replace=False).tolist())


def _max_errs(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, float]:
    rel = relative_error(analytic, numeric)
    return float(np.max(rel)), float(np.max(np.abs(analytic - numeric)))


def _check_eucl(threshold: float) -> GradCheckReport:
    rng = np.random.default_rng(11)
    x = _unit_rms(rng, (5, 3))
    y = _unit_rms(rng, (4, 3))
    rels, abss, coords = [], [], 0
    for direction in ("v2a", "a2v"):
        _, grad = eucl_dist(x, y, direction)
        for which, arr, g in (("x", x, grad.grad_x), ("y", y, grad.grad_y)):
            idx = _sample(rng, arr.size)
            coords += len(idx)

            def f(vec, which=which, direction=direction):
                if which == "x":
                    return eucl_dist(vec.reshape(x.shape), y, direction)[0]
                return eucl_dist(x, vec.reshape(y.shape), direction)[0]

            num = numeric_gradient(f, arr.ravel(), coords=idx)
            rel, ab = _max_errs(g.ravel()[idx], num)
            rels.append(rel)
            abss.append(ab)
    return GradCheckReport("eucl", coords, max(rels), max(abss), threshold)


def _check_soft_dtw(threshold: float) -> GradCheckReport:
    rng = np.random.default_rng(12)
    x = _unit_rms(rng, (4, 3))
    y = _unit_rms(rng, (5, 3))
    gamma = 0.3
    _, grad = soft_dtw(x, y, gamma)
    rels, abss, coords = [], [], 0
    for which, arr, g in (("x", x, grad.grad_x), ("y", y, grad.grad_y)):
        idx = _sample(rng, arr.size)
        coords += len(idx)

        def f(vec, which=which):
            if which == "x":
                return soft_dtw(vec.reshape(x.shape), y, gamma)[0]
            return soft_dtw(x, vec.reshape(y.shape), gamma)[0]

        num = numeric_gradient(f, arr.ravel(), coords=idx)
        rel, ab = _max_errs(g.ravel()[idx], num)
        rels.append(rel)
        abss.append(ab)
    return GradCheckReport("soft_dtw", coords, max(rels), max(abss), threshold)


def _check_wasserstein(threshold: float) -> GradCheckReport:
    rng = np.random.default_rng(13)
    x = _unit_rms(rng, (4, 3))
    y = _unit_rms(rng, (3, 3))
    kind = GRADCHECK_WASS
    _, grad = wasserstein(x, y, kind.epsilon, kind.iters, kind.pos_weight)
    rels, abss, coords = [], [], 0
    for which, arr, g in (("x", x, grad.grad_x), ("y", y, grad.grad_y)):
        idx = _sample(rng, arr.size)
        coords += len(idx)

        def f(vec, which=which):
            if which == "x":
                return wasserstein(vec.reshape(x.shape), y, kind.epsilon, kind.iters,
                                   kind.pos_weight)[0]
            return wasserstein(x, vec.reshape(y.shape), kind.epsilon, kind.iters,
                               kind.pos_weight)[0]

        num = numeric_gradient(f, arr.ravel(), coords=idx)
        rel, ab = _max_errs(g.ravel()[idx], num)
        rels.append(rel)
        abss.append(ab)
    return GradCheckReport("wasserstein", coords, max(rels), max(abss), threshold)


def _check_zscore(threshold: float) -> GradCheckReport:
    rng = np.random.default_rng(14)
    x = _unit_rms(rng, (4, 4))
    w = rng.standard_normal((4, 4))
    rels, abss, coords = [], [], 0
    for axis in (loss_mod.ROWS, loss_mod.COLS):
        _, vjp = loss_mod.zscore(x, axis)
        analytic = vjp(w)
        idx = _sample(rng, x.size, k=8)
        coords += len(idx)

        def f(vec, axis=axis):
            out, _ = loss_mod.zscore(vec.reshape(x.shape), axis)
            return float((w * out).sum())

        num = numeric_gradient(f, x.ravel(), coords=idx)
        rel, ab = _max_errs(analytic.ravel()[idx], num)
        rels.append(rel)
        abss.append(ab)
    return GradCheckReport("zscore", coords, max(rels), max(abss), threshold)


def _check_scav(threshold: float) -> GradCheckReport:
    rng = np.random.default_rng(15)
    d = np.abs(_unit_rms(rng, (4, 4))) + 0.5
    log_lam = math.log(0.7)
    rels, abss, coords = [], [], 0
    for normalize in (True, False):
        res = loss_mod.scav_loss(d, loss_mod.Temperature(log_lam), normalize=normalize)
        idx = _sample(rng, d.size, k=8)
        coords += len(idx) + 1

        def f(vec, normalize=normalize):
            return loss_mod.scav_loss(vec.reshape(d.shape), loss_mod.Temperature(log_lam),
                                      normalize=normalize).loss

        num = numeric_gradient(f, d.ravel(), coords=idx)
        rel, ab = _max_errs(res.grad_distances.ravel()[idx], num)
        rels.append(rel)
        abss.append(ab)

        def f_lam(vec, normalize=normalize):
            return loss_mod.scav_loss(d, loss_mod.Temperature(float(vec[0])),
                                      normalize=normalize).loss

        num_lam = numeric_gradient(f_lam, np.array([log_lam]))
        rel, ab = _max_errs(np.array([res.grad_log_lambda]), num_lam)
        rels.append(rel)
        abss.append(ab)
    return GradCheckReport("scav_loss", coords, max(rels), max(abss), threshold)


def _flatten(arrays: list[np.ndarray]):
    sizes = [a.size for a in arrays]
    offsets = np.cumsum([0] + sizes)
    flat = np.concatenate([a.ravel() for a in arrays])
    shapes = [a.shape for a in arrays]

    def unflatten(vec: np.ndarray) -> list[np.ndarray]:
        return [vec[offsets[i]:offsets[i + 1]].reshape(shapes[i]) for i in range(len(arrays))]

    return flat, unflatten


def _check_cav(threshold: float) -> GradCheckReport:
    rng = np.random.default_rng(16)
    videos = [_unit_rms(rng, (t, 4)) for t in (3, 5, 4)]
    audios = [_unit_rms(rng, (t, 4)) for t in (4, 3, 5)]
    log_tau = math.log(0.3)
    res = loss_mod.cav_loss(videos, audios, loss_mod.Temperature(log_tau))
    flat, unflatten = _flatten(videos + audios)
    analytic = np.concatenate([g.ravel() for g in res.grad_videos + res.grad_audios])
    idx = _sample(rng, flat.size, k=12)

    def f(vec):
        arrays = unflatten(vec)
        return loss_mod.cav_loss(arrays[:3], arrays[3:], loss_mod.Temperature(log_tau)).loss

    num = numeric_gradient(f, flat, coords=idx)
    rels, abss = [], []
    rel, ab = _max_errs(analytic[idx], num)
    rels.append(rel)
    abss.append(ab)

    def f_tau(vec):
        return loss_mod.cav_loss(videos, audios, loss_mod.Temperature(float(vec[0]))).loss

    num_tau = numeric_gradient(f_tau, np.array([log_tau]))
    rel, ab = _max_errs(np.array([res.grad_log_tau]), num_tau)
    rels.append(rel)
    abss.append(ab)
    return GradCheckReport("cav_loss", len(idx) + 1, max(rels), max(abss), threshold)


def _check_multitask(threshold: float) -> GradCheckReport:
    rng = np.random.default_rng(17)
    b = 3
    videos = [_unit_rms(rng, (4, 3)) for _ in range(b)]
    audios = [_unit_rms(rng, (3, 3)) for _ in range(b)]
    d = np.abs(_unit_rms(rng, (b, b))) + 0.5
    log_lam, log_tau = math.log(0.9), math.log(0.4)
    weight = 0.3

    def combined(d_mat, vids, auds, ll, lt):
        scav = loss_mod.scav_loss(d_mat, loss_mod.Temperature(ll))
        cav = loss_mod.cav_loss(vids, auds, loss_mod.Temperature(lt))
        return loss_mod.multitask_loss(scav, cav, weight)

    res = combined(d, videos, audios, log_lam, log_tau)
    flat, unflatten = _flatten([d] + videos + audios)
    analytic = np.concatenate([res.grad_distances.ravel()]
                              + [g.ravel() for g in res.grad_videos + res.grad_audios]
                              + [np.array([res.grad_log_lambda, res.grad_log_tau])])
    full = np.concatenate([flat, [log_lam, log_tau]])
    idx = _sample(rng, full.size, k=12) + [full.size - 2, full.size - 1]

    def f(vec):
        arrays = unflatten(vec[:-2])
        return combined(arrays[0], arrays[1:1 + b], arrays[1 + b:], vec[-2], vec[-1]).loss

    num = numeric_gradient(f, full, coords=idx)
    rel, ab = _max_errs(analytic[idx], num)
    return GradCheckReport("multitask_loss", len(idx), rel, ab, threshold)


def _check_encoder(threshold: float) -> GradCheckReport:
    rng = np.random.default_rng(18)
    params = enc_mod.init_encoder(dim_v=4, dim_a=3, hidden=5, out_dim=3, max_len=6, seed=3)
    x = _unit_rms(rng, (4, 4))
    upstream = rng.standard_normal((4, 3))
    grads, grad_in = enc_mod.encode_backward(params, x, upstream, "video")
    named = [(n, a) for n, a in enc_mod.named_params(params) if n.startswith("video.")]
    flat, unflatten = _flatten([a for _, a in named] + [x])
    analytic = np.concatenate([grads[n].ravel() for n, _ in named] + [grad_in.ravel()])
    rng2 = np.random.default_rng(19)
    idx: list[int] = []
    offset = 0
    for _, arr in named + [("input", x)]:
        idx.extend(offset + i for i in _sample(rng2, arr.size))
        offset += arr.size

    def f(vec):
        arrays = unflatten(vec)
        mp = enc_mod.ModalityParams(*arrays[:6])
        latent, _ = enc_mod._encode_arrays(mp, arrays[6])
        return float((upstream * latent).sum())

    num = numeric_gradient(f, flat, coords=idx)
    rel, ab = _max_errs(analytic[idx], num)
    return GradCheckReport("encoder", len(idx), rel, ab, threshold)


def _pipeline_case(loss_kind: str, distance) -> tuple[str, "enc_mod.TrainConfig"]:
    # B=3: at B=2 a z-scored length-2 row degenerates to +-1 and the
    # normalized sequence loss is locally flat in the distances
    cfg = enc_mod.TrainConfig(loss_kind=loss_kind, distance=distance, batch_size=3,
                              steps=1, model_dim=3, hidden_dim=5, max_len=6, seed=5)
    return loss_kind, cfg


def _check_pipeline(cfg: "enc_mod.TrainConfig", name: str, threshold: float) -> GradCheckReport:
    rng = np.random.default_rng(20)
    videos = [_unit_rms(rng, (5, 4)), _unit_rms(rng, (4, 4)), _unit_rms(rng, (6, 4))]
    audios = [_unit_rms(rng, (4, 3)), _unit_rms(rng, (3, 3)), _unit_rms(rng, (5, 3))]
    params = enc_mod.init_encoder(dim_v=4, dim_a=3, hidden=cfg.hidden_dim,
                                  out_dim=cfg.model_dim, max_len=cfg.max_len, seed=7)
    named = enc_mod.named_params(params)
    log_lam, log_tau = 0.0, math.log(0.3)

    def loss_and_grads(param_arrays, ll, lt):
        mp_v = enc_mod.ModalityParams(*param_arrays[:6])
        mp_a = enc_mod.ModalityParams(*param_arrays[6:])
        lat_v, caches_v = [], []
        lat_a, caches_a = [], []
        for v in videos:
            out, cache = enc_mod._encode_arrays(mp_v, v)
            lat_v.append(out)
            caches_v.append(cache)
        for a in audios:
            out, cache = enc_mod._encode_arrays(mp_a, a)
            lat_a.append(out)
            caches_a.append(cache)
        result, gv, ga = enc_mod.batch_loss_and_grads(lat_v, lat_a, cfg, ll, lt)
        names = [n for n, _ in enc_mod.named_params(enc_mod.EncoderParams(mp_v, mp_a))]
        grads = {n: np.zeros_like(arr) for n, arr in zip(names, param_arrays)}
        for k in range(len(videos)):
            g_mod, _ = enc_mod._encode_backward_arrays(mp_v, caches_v[k], gv[k])
            for fname, g in g_mod.items():
                grads[f"video.{fname}"] += g
        for k in range(len(audios)):
            g_mod, _ = enc_mod._encode_backward_arrays(mp_a, caches_a[k], ga[k])
            for fname, g in g_mod.items():
                grads[f"audio.{fname}"] += g
        return result, grads

    result, grads = loss_and_grads([arr for _, arr in named], log_lam, log_tau)
    flat, unflatten = _flatten([arr for _, arr in named])
    full = np.concatenate([flat, [log_lam, log_tau]])
    analytic = np.concatenate([grads[n].ravel() for n, _ in named]
                              + [np.array([result.grad_log_lambda, result.grad_log_tau])])
    rng2 = np.random.default_rng(21)
    idx: list[int] = []
    offset = 0
    for _, arr in named:
        idx.extend(offset + i for i in _sample(rng2, arr.size))
        offset += arr.size
    idx.extend([full.size - 2, full.size - 1])

    def f(vec):
        res, _ = loss_and_grads(unflatten(vec[:-2]), float(vec[-2]), float(vec[-1]))
        return res.loss

    num = numeric_gradient(f, full, coords=idx)
    rel, ab = _max_errs(analytic[idx], num)
    return GradCheckReport(name, len(idx), rel, ab, threshold)


def _pipeline_builder(loss_kind: str, distance):
    def build(threshold: float) -> GradCheckReport:
        _, cfg = _pipeline_case(loss_kind, distance)
        name = f"pipeline_{loss_kind}" + ("" if loss_kind == "cav" else f"_{_metric_tag(distance)}")
        return _check_pipeline(cfg, name, threshold)

    return build


def _metric_tag(distance) -> str:
    if isinstance(distance, EuclInterp):
        return "eucl"
    if isinstance(distance, SoftDTW):
        return "sdtw"
    return "wass"


TARGETS: dict[str, tuple] = {
    "eucl": (_check_eucl, 1e-4),
    "soft_dtw": (_check_soft_dtw, 1e-4),
    "wasserstein": (_check_wasserstein, 1e-4),
    "zscore": (_check_zscore, 1e-4),
    "scav_loss": (_check_scav, 1e-4),
    "cav_loss": (_check_cav, 1e-4),
    "multitask_loss": (_check_multitask, 1e-4),
    "encoder": (_check_encoder, 1e-4),
    "pipeline_cav": (_pipeline_builder("cav", EuclInterp()), 1e-3),
    "pipeline_scav_eucl": (_pipeline_builder("scav", EuclInterp()), 1e-3),
    "pipeline_scav_sdtw": (_pipeline_builder("scav", SoftDTW(gamma=0.3)), 1e-3),
    "pipeline_scav_wass": (_pipeline_builder("scav", GRADCHECK_WASS), 1e-3),
    "pipeline_multi_eucl": (_pipeline_builder("multi", EuclInterp()), 1e-3),
    "pipeline_multi_sdtw": (_pipeline_builder("multi", SoftDTW(gamma=0.3)), 1e-3),
    "pipeline_multi_wass": (_pipeline_builder("multi", GRADCHECK_WASS), 1e-3),
}


def run_gradcheck(targets=None, threshold: float | None = None) -> list[GradCheckReport]:
    """Run the registered gradient checks; returns one report per target."""
    if targets is None:
        names = list(TARGETS)
    else:
        names = list(targets)
        unknown = [n for n in names if n not in TARGETS]
        if unknown:
            raise ValueError(f"unknown gradcheck targets: {unknown}; known: {list(TARGETS)}")
    reports = []
    for name in names:
        builder, default_thr = TARGETS[name]
        reports.append(builder(threshold if threshold is not None else default_thr))
    return reports
