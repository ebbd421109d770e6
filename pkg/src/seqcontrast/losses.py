"""Contrastive objectives over pairwise sequential distances.

Two losses share the symmetric InfoNCE shape: the aggregation-based loss
(cosine similarities of mean-pooled embeddings, temperature tau) and the
sequence-based loss (negated pairwise distances, temperature lambda, with
row-/column-wise z-score normalization of the distance matrix). Both are
exact reverse-mode differentiable including the temperature and, for the
sequence loss, the z-score statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import DistanceMatrix, as_matrix

ROWS = "rows"
COLS = "cols"


@dataclass
class Temperature:
    """Learnable positive temperature, parameterized by its log."""

    log_value: float

    @classmethod
    def init(cls, value: float) -> "Temperature":
        if not value > 0:
            raise ValueError("temperature must be > 0")
        return cls(math.log(value))

    @property
    def value(self) -> float:
        return math.exp(self.log_value)


@dataclass
class NormalizedDistances:
    """Row- and column-wise z-scored views of a pairwise distance matrix."""

    d_v2a: np.ndarray
    d_a2v: np.ndarray
    source: np.ndarray


@dataclass
class LossResult:
    """Scalar loss plus the gradients a trainer needs.

    grad_distances is d(loss)/dD for the sequence loss; grad_similarities
    is d(loss)/dS for the aggregation loss. Sequence-level gradients
    (grad_videos/grad_audios) are populated by the aggregation loss, where
    the chain through pooling is internal; the sequence loss leaves them
    None and the caller chains grad_distances through the kernel.
    """

    loss: float
    grad_distances: np.ndarray | None = None
    grad_similarities: np.ndarray | None = None
    grad_log_lambda: float = 0.0
    grad_log_tau: float = 0.0
    grad_videos: list[np.ndarray] | None = None
    grad_audios: list[np.ndarray] | None = None


def zscore(matrix: np.ndarray, axis: str, eps: float = 1e-8):
    """Per-row (or per-column) z-score with population std + eps guard.

    Returns (normalized, vjp) where vjp maps an upstream gradient back
    through both the mean and the std. Constant rows normalize to zeros
    instead of raising.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < 2:
        raise ValueError("z-score needs a 2-D matrix with both dims >= 2")
    if axis == ROWS:
        ax = 1
    elif axis == COLS:
        ax = 0
    else:
        raise ValueError(f"axis must be '{ROWS}' or '{COLS}', got {axis!r}")
    n = x.shape[ax]
    mean = x.mean(axis=ax, keepdims=True)
    centered = x - mean
    std = np.sqrt((centered * centered).mean(axis=ax, keepdims=True))
    denom = std + eps
    out = centered / denom

    def vjp(grad_out: np.ndarray) -> np.ndarray:
        g = np.asarray(grad_out, dtype=np.float64)
        g_centered = (g - g.mean(axis=ax, keepdims=True)) / denom
        # d(std)/dx = centered / (n * std); zero contribution on constant rows
        safe_std = np.where(std > 0.0, std, 1.0)
        coeff = (g * centered).sum(axis=ax, keepdims=True) / (n * safe_std * denom * denom)
        coeff = np.where(std > 0.0, coeff, 0.0)
        return g_centered - coeff * centered

    return out, vjp


def _log_softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _symmetric_infonce(logits_row: np.ndarray, logits_col: np.ndarray):
    """Mean of row-wise and column-wise diagonal InfoNCE terms.

    Returns (loss, grad wrt logits_row, grad wrt logits_col); the two
    logit matrices may be the same object (aggregation loss) or distinct
    views (sequence loss).
    """
    b = logits_row.shape[0]
    lsm_row = _log_softmax(logits_row, axis=1)
    lsm_col = _log_softmax(logits_col, axis=0)
    diag = np.arange(b)
    loss = -(lsm_row[diag, diag].sum() + lsm_col[diag, diag].sum()) / (2.0 * b)
    p_row = np.exp(lsm_row)
    p_col = np.exp(lsm_col)
    eye = np.eye(b)
    grad_row = (p_row - eye) / (2.0 * b)
    grad_col = (p_col - eye) / (2.0 * b)
    return float(loss), grad_row, grad_col


def scav_loss(distances, lam: Temperature, normalize: bool = True) -> LossResult:
    """Sequence-based contrastive loss over a B x B distance matrix.

    With normalize=True the matrix is row-z-scored for the video-to-audio
    softmax and column-z-scored for the audio-to-video softmax; gradients
    flow through the normalization statistics. The returned grad_distances
    is d(loss)/dD; grad_log_lambda is the temperature gradient.
    """
    d = distances.values if isinstance(distances, DistanceMatrix) else np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError("sequence loss needs a square B x B distance matrix")
    if d.shape[0] < 2:
        raise ValueError("batch size must be >= 2")
    if not np.all(np.isfinite(d)):
        raise ValueError("non-finite distance matrix")
    lam_value = lam.value
    if normalize:
        d_v2a, vjp_rows = zscore(d, ROWS)
        d_a2v, vjp_cols = zscore(d, COLS)
    else:
        d_v2a = d_a2v = d
        vjp_rows = vjp_cols = None
    loss, grad_row_logits, grad_col_logits = _symmetric_infonce(-d_v2a / lam_value, -d_a2v / lam_value)
    g_v2a = -grad_row_logits / lam_value
    g_a2v = -grad_col_logits / lam_value
    # d(logits)/d(log lam) = d_bar / lam, applied before the z-score chain
    grad_log_lambda = float((grad_row_logits * d_v2a).sum() + (grad_col_logits * d_a2v).sum()) / lam_value
    if normalize:
        grad_d = vjp_rows(g_v2a) + vjp_cols(g_a2v)
    else:
        grad_d = g_v2a + g_a2v
    return LossResult(loss=loss, grad_distances=grad_d, grad_log_lambda=grad_log_lambda)


def mean_pool(seq) -> np.ndarray:
    return as_matrix(seq).mean(axis=0)


def cav_loss(videos, audios, tau: Temperature) -> LossResult:
    """Aggregation-based contrastive loss on mean-pooled embeddings.

    Cosine similarities between pooled video and audio embeddings feed a
    symmetric InfoNCE with temperature tau. Gradients are returned both at
    the similarity level (grad_similarities) and chained through pooling
    to each input sequence (grad_videos / grad_audios).
    """
    if len(videos) != len(audios):
        raise ValueError("batch sides must have equal size")
    b = len(videos)
    if b < 2:
        raise ValueError("batch size must be >= 2")
    v_seqs = [as_matrix(v) for v in videos]
    a_seqs = [as_matrix(a) for a in audios]
    v_pool = np.stack([s.mean(axis=0) for s in v_seqs])
    a_pool = np.stack([s.mean(axis=0) for s in a_seqs])
    v_norm = np.linalg.norm(v_pool, axis=1)
    a_norm = np.linalg.norm(a_pool, axis=1)
    if np.any(v_norm == 0.0) or np.any(a_norm == 0.0):
        raise ValueError("zero-norm pooled embedding: cosine similarity undefined")
    v_unit = v_pool / v_norm[:, None]
    a_unit = a_pool / a_norm[:, None]
    sims = v_unit @ a_unit.T
    tau_value = tau.value
    loss, grad_row_logits, grad_col_logits = _symmetric_infonce(sims / tau_value, sims / tau_value)
    grad_sims = (grad_row_logits + grad_col_logits) / tau_value
    grad_log_tau = float(-((grad_row_logits + grad_col_logits) * sims).sum()) / tau_value
    # cosine backward: d s_ij / d v_i = (a_unit_j - s_ij * v_unit_i) / |v_i|
    gv_pool = (grad_sims @ a_unit - (grad_sims * sims).sum(axis=1)[:, None] * v_unit) / v_norm[:, None]
    ga_pool = (grad_sims.T @ v_unit - (grad_sims * sims).sum(axis=0)[:, None] * a_unit) / a_norm[:, None]
    grad_videos = [np.repeat(gv_pool[i][None, :] / s.shape[0], s.shape[0], axis=0) for i, s in enumerate(v_seqs)]
    grad_audios = [np.repeat(ga_pool[i][None, :] / s.shape[0], s.shape[0], axis=0) for i, s in enumerate(a_seqs)]
    return LossResult(loss=loss, grad_similarities=grad_sims, grad_log_tau=grad_log_tau,
                      grad_videos=grad_videos, grad_audios=grad_audios)


def multitask_loss(scav: LossResult, cav: LossResult, weight: float = 0.5) -> LossResult:
    """Convex combination weight*scav + (1-weight)*cav, gradients included."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError("weight must be in [0, 1]")
    w = weight
    u = 1.0 - weight

    def scale(arr, s):
        return None if arr is None else s * arr

    def scale_list(lst, s):
        return None if lst is None else [s * g for g in lst]

    def combine_lists(a, b):
        if a is None:
            return b
        if b is None:
            return a
        return [ga + gb for ga, gb in zip(a, b)]

    return LossResult(
        loss=w * scav.loss + u * cav.loss,
        grad_distances=scale(scav.grad_distances, w),
        grad_similarities=scale(cav.grad_similarities, u),
        grad_log_lambda=w * scav.grad_log_lambda,
        grad_log_tau=u * cav.grad_log_tau,
        grad_videos=combine_lists(scale_list(scav.grad_videos, w), scale_list(cav.grad_videos, u)),
        grad_audios=combine_lists(scale_list(scav.grad_audios, w), scale_list(cav.grad_audios, u)),
    )
