"""Aggregation-, sequence-, and hybrid retrieval with recall and timing.

Aggregation-based retrieval ranks candidates by cosine similarity of
mean-pooled embeddings. Sequence-based retrieval ranks by the raw
sequential distance (per-query z-scoring would not change the order, so
none is applied). Hybrid retrieval pre-selects k candidates with the
aggregation scores and re-ranks only that pool with the sequential
distance, trading a little accuracy for a large speedup.

Ties are always broken by ascending candidate id so rankings are
reproducible regardless of parallelism.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .kernels import (A2V, V2A, DistanceKind, EuclInterp, as_matrix, distance_value,
                      interp_weights)

_WARMUP_QUERIES = 2


@dataclass(frozen=True)
class Agg:
    """Cosine ranking on mean-pooled embeddings."""


@dataclass(frozen=True)
class Seq:
    """Ranking by a sequential distance kernel."""

    kind: DistanceKind = field(default_factory=EuclInterp)


@dataclass(frozen=True)
class Hybrid:
    """Aggregation pre-selection of k candidates, sequential re-rank."""

    k: int
    kind: DistanceKind = field(default_factory=EuclInterp)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


RetrievalMode = Agg | Seq | Hybrid


@dataclass
class RetrievalReport:
    mode: str
    direction: str
    query_ids: list[str]
    candidate_ids: list[str]
    rankings: list[list[str]]
    recall: dict[int, float]
    preselect_s: float
    rerank_s: float

    @property
    def total_s(self) -> float:
        return self.preselect_s + self.rerank_s


def _ids(seqs) -> list[str]:
    return [getattr(s, "id", str(i)) for i, s in enumerate(seqs)]


def _pooled_units(seqs) -> np.ndarray:
    pooled = np.stack([as_matrix(s).mean(axis=0) for s in seqs])
    norms = np.linalg.norm(pooled, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm pooled embedding: cosine similarity undefined")
    return pooled / norms[:, None]


class _AggScorer:
    """Cosine similarities of pooled unit embeddings, subset-addressable."""

    def __init__(self, candidates):
        self.units = _pooled_units(candidates)

    def scores(self, query_unit: np.ndarray, idx: np.ndarray | None) -> np.ndarray:
        mat = self.units if idx is None else self.units[idx]
        return mat @ query_unit


class _SeqScorer:
    """Sequential distances from one query to (a subset of) candidates.

    For the interpolated Euclidean the candidates are flattened once per
    target length and each query costs one matrix-vector product; other
    kinds fall back to per-candidate kernel calls.
    """

    def __init__(self, candidates, kind: DistanceKind, query_role: str):
        if query_role not in ("video", "audio"):
            raise ValueError("query_role must be 'video' or 'audio'")
        self.kind = kind
        self.query_role = query_role
        self.arrays = [as_matrix(c) for c in candidates]
        self.c = self.arrays[0].shape[1]
        for a in self.arrays:
            if a.shape[1] != self.c:
                raise ValueError("candidate feature dims differ")
        self.fast = isinstance(kind, EuclInterp)
        if self.fast:
            interp_role = "video" if kind.direction == V2A else "audio"
            self.cand_interpolated = interp_role != query_role
            if self.cand_interpolated:
                self._flat_by_len: dict[int, tuple[np.ndarray, np.ndarray]] = {}
            else:
                groups: dict[int, list[int]] = {}
                for j, a in enumerate(self.arrays):
                    groups.setdefault(a.shape[0], []).append(j)
                self.groups = {}
                self.group_of = np.empty(len(self.arrays), dtype=np.int64)
                self.pos_in_group = np.empty(len(self.arrays), dtype=np.int64)
                for length, members in sorted(groups.items()):
                    members = np.array(members)
                    flat = np.stack([self.arrays[j].ravel() for j in members])
                    sq = np.einsum("ij,ij->i", flat, flat)
                    self.groups[length] = (members, flat, sq)
                    self.group_of[members] = length
                    self.pos_in_group[members] = np.arange(len(members))

    def _cand_flat(self, length: int):
        cached = self._flat_by_len.get(length)
        if cached is None:
            flat = np.stack([
                (a if a.shape[0] == length else interp_weights(a.shape[0], length) @ a).ravel()
                for a in self.arrays
            ])
            sq = np.einsum("ij,ij->i", flat, flat)
            cached = (flat, sq)
            self._flat_by_len[length] = cached
        return cached

    def distances(self, query, idx: np.ndarray | None) -> np.ndarray:
        q = as_matrix(query)
        if not self.fast:
            sel = range(len(self.arrays)) if idx is None else idx
            if self.query_role == "video":
                return np.array([distance_value(q, self.arrays[j], self.kind) for j in sel])
            return np.array([distance_value(self.arrays[j], q, self.kind) for j in sel])
        if self.cand_interpolated:
            length = q.shape[0]
            flat, sq = self._cand_flat(length)
            if idx is not None:
                flat, sq = flat[idx], sq[idx]
            qf = q.ravel()
            return (sq - 2.0 * (flat @ qf) + qf @ qf) / (length * self.c)
        out = np.empty(len(self.arrays) if idx is None else len(idx))
        sel = None if idx is None else np.asarray(idx)
        for length, (members, flat, sq) in self.groups.items():
            if sel is None:
                rows, positions = slice(None), members
            else:
                mask = self.group_of[sel] == length
                positions = np.nonzero(mask)[0]
                if positions.size == 0:
                    continue
                rows = self.pos_in_group[sel[positions]]
            qi = q if q.shape[0] == length else interp_weights(q.shape[0], length) @ q
            qf = qi.ravel()
            block = (sq[rows] - 2.0 * (flat[rows] @ qf) + qf @ qf) / (length * self.c)
            out[positions] = block
        return out

    def distances_batch(self, queries, pools: np.ndarray) -> np.ndarray:
        """Distances from queries[i] to candidates pools[i] as a (Q, k) block.

        Fast path for the candidate-interpolated Euclidean with equal query
        lengths; otherwise defers to per-query scoring.
        """
        lengths = {as_matrix(q).shape[0] for q in queries}
        if not (self.fast and self.cand_interpolated and len(lengths) == 1):
            return np.stack([self.distances(q, pools[i]) for i, q in enumerate(queries)])
        length = lengths.pop()
        flat, sq = self._cand_flat(length)
        out = np.empty(pools.shape)
        q_flat = np.stack([as_matrix(q).ravel() for q in queries])
        q_sq = np.einsum("ij,ij->i", q_flat, q_flat)
        scale = length * self.c
        for i, pool in enumerate(pools):
            out[i] = (sq[pool] - 2.0 * (flat[pool] @ q_flat[i]) + q_sq[i]) / scale
        return out


def _rank(keys: np.ndarray, id_rank: np.ndarray, top_r: int) -> np.ndarray:
    """Indices of the top_r smallest keys, ties broken by ascending id.

    Equivalent to np.lexsort((id_rank, keys))[:top_r]; the fast path
    partitions first and falls back to the full sort whenever key ties
    straddle the cut, so results are identical in all cases.
    """
    n = keys.shape[0]
    if top_r < 1:
        return np.empty(0, dtype=np.int64)
    if top_r >= n or n <= 64:
        return np.lexsort((id_rank, keys))[:top_r]
    part = np.argpartition(keys, top_r - 1)[:top_r]
    cut = keys[part].max()
    below = int((keys < cut).sum())
    at = int((keys == cut).sum())
    if below + at > top_r:
        return np.lexsort((id_rank, keys))[:top_r]
    order = np.lexsort((id_rank[part], keys[part]))
    return part[order]


def _id_ranks(ids: list[str]) -> np.ndarray:
    order = sorted(range(len(ids)), key=lambda j: ids[j])
    rank = np.empty(len(ids), dtype=np.int64)
    for r, j in enumerate(order):
        rank[j] = r
    return rank


def agg_retrieve(queries, candidates, top_r: int = 10) -> list[list[str]]:
    """Rank candidates by descending pooled-cosine similarity per query."""
    scorer = _AggScorer(candidates)
    cand_ids = _ids(candidates)
    id_rank = _id_ranks(cand_ids)
    q_units = _pooled_units(queries)
    out = []
    for q in q_units:
        sims = scorer.scores(q, None)
        top = _rank(-sims, id_rank, top_r)
        out.append([cand_ids[j] for j in top])
    return out


def seq_retrieve(queries, candidates, kind: DistanceKind, direction: str = A2V,
                 top_r: int = 10) -> list[list[str]]:
    """Rank candidates by ascending raw sequential distance per query.

    `direction` names the retrieval task (a2v: audio queries against video
    candidates); the video-role sequence is always the kernel's first
    argument.
    """
    query_role = "audio" if direction == A2V else "video"
    scorer = _SeqScorer(candidates, kind, query_role)
    cand_ids = _ids(candidates)
    id_rank = _id_ranks(cand_ids)
    out = []
    for q in queries:
        dists = scorer.distances(q, None)
        top = _rank(dists, id_rank, top_r)
        out.append([cand_ids[j] for j in top])
    return out


def hybrid_retrieve(queries, candidates, k: int, kind: DistanceKind,
                    direction: str = A2V, top_r: int = 10):
    """Aggregation pre-selection of k candidates, sequential re-rank.

    Returns (rankings, preselect_s, rerank_s). k = 1 reproduces pure
    aggregation retrieval, k = len(candidates) pure sequence retrieval.
    """
    n_cand = len(candidates)
    if not 1 <= k <= n_cand:
        raise ValueError(f"k must be in [1, {n_cand}], got {k}")
    query_role = "audio" if direction == A2V else "video"
    agg_scorer = _AggScorer(candidates)
    seq_scorer = _SeqScorer(candidates, kind, query_role)
    cand_ids = _ids(candidates)
    id_rank = _id_ranks(cand_ids)
    q_units = _pooled_units(queries)
    q_seqs = list(queries)

    pools = []
    t0 = time.perf_counter()
    for q in q_units:
        sims = agg_scorer.scores(q, None)
        pools.append(_rank(-sims, id_rank, k))
    preselect_s = time.perf_counter() - t0

    out = []
    t0 = time.perf_counter()
    pool_block = np.stack(pools)
    dists_block = seq_scorer.distances_batch(q_seqs, pool_block)
    for pool, dists in zip(pools, dists_block):
        top = _rank(dists, id_rank[pool], top_r)
        out.append([cand_ids[pool[j]] for j in top])
    rerank_s = time.perf_counter() - t0
    return out, preselect_s, rerank_s


def recall_at(rankings: list[list[str]], positives: list[str], r: int,
              candidate_ids: list[str] | None = None) -> float:
    """Fraction of queries whose positive id appears in the top r."""
    if len(rankings) != len(positives):
        raise ValueError("one positive per query required")
    if candidate_ids is not None:
        known = set(candidate_ids)
        for pos in positives:
            if pos not in known:
                raise ValueError(f"positive {pos!r} missing from candidate set")
    hits = sum(1 for ranked, pos in zip(rankings, positives) if pos in ranked[:r])
    return hits / len(rankings)


def _split_pairs(pairs, direction: str):
    """(queries, candidates) sides of encoded pairs for one direction."""
    videos = [v for v, _ in pairs]
    audios = [a for _, a in pairs]
    if direction == A2V:
        return audios, videos
    if direction == V2A:
        return videos, audios
    raise ValueError(f"direction must be '{A2V}' or '{V2A}', got {direction!r}")


def retrieve_pairs(query_pairs, candidate_pairs, mode: RetrievalMode, direction: str,
                   top_r: int = 10, warmup: bool = False) -> RetrievalReport:
    """Run one retrieval mode over encoded pairs and score recall@{1,5,10}.

    Queries take one modality of query_pairs and candidates the other
    modality of candidate_pairs; the positive for a query is the candidate
    with the same pair id. With warmup=True a few untimed queries run
    first so timings exclude one-off setup work.
    """
    queries, _ = _split_pairs(query_pairs, direction)
    _, candidates = _split_pairs(candidate_pairs, direction)
    query_ids = _ids(queries)
    cand_ids = _ids(candidates)
    if warmup and len(queries) > _WARMUP_QUERIES:
        _run_mode(queries[:_WARMUP_QUERIES], candidates, mode, direction, top_r)
    rankings, preselect_s, rerank_s = _run_mode(queries, candidates, mode, direction, top_r)
    recall = {r: recall_at(rankings, query_ids, r, cand_ids) for r in (1, 5, 10)}
    return RetrievalReport(mode=mode_label(mode), direction=direction, query_ids=query_ids,
                           candidate_ids=cand_ids, rankings=rankings, recall=recall,
                           preselect_s=preselect_s, rerank_s=rerank_s)


def _run_mode(queries, candidates, mode: RetrievalMode, direction: str, top_r: int):
    if isinstance(mode, Agg):
        t0 = time.perf_counter()
        rankings = agg_retrieve(queries, candidates, top_r)
        return rankings, time.perf_counter() - t0, 0.0
    if isinstance(mode, Seq):
        t0 = time.perf_counter()
        rankings = seq_retrieve(queries, candidates, mode.kind, direction, top_r)
        return rankings, 0.0, time.perf_counter() - t0
    if isinstance(mode, Hybrid):
        return hybrid_retrieve(queries, candidates, mode.k, mode.kind, direction, top_r)
    raise TypeError(f"unknown retrieval mode: {mode!r}")


def mode_label(mode: RetrievalMode) -> str:
    if isinstance(mode, Agg):
        return "agg"
    if isinstance(mode, Seq):
        return "seq"
    if isinstance(mode, Hybrid):
        return f"hybrid(k={mode.k})"
    raise TypeError(f"unknown retrieval mode: {mode!r}")


REPORT_HEADER = ("mode", "direction", "recall@1", "recall@5", "recall@10",
                 "preselect_s", "rerank_s", "total_s")


def bench(query_pairs, candidate_pairs, modes, directions=(A2V, V2A),
          top_r: int = 10) -> list[RetrievalReport]:
    """Time every (mode, direction) combination with a warm-up pass."""
    reports = []
    for mode in modes:
        for direction in directions:
            reports.append(retrieve_pairs(query_pairs, candidate_pairs, mode, direction,
                                          top_r=top_r, warmup=True))
    return reports


def report_rows(reports) -> list[list[str]]:
    rows = [list(REPORT_HEADER)]
    for rep in reports:
        rows.append([
            rep.mode, rep.direction,
            f"{rep.recall[1]:.4f}", f"{rep.recall[5]:.4f}", f"{rep.recall[10]:.4f}",
            f"{rep.preselect_s:.4f}", f"{rep.rerank_s:.4f}", f"{rep.total_s:.4f}",
        ])
    return rows


def write_report_tsv(reports, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in report_rows(reports):
            fh.write("\t".join(row) + "\n")


def format_report_table(reports) -> str:
    rows = report_rows(reports)
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
             for row in rows]
    return "\n".join(lines)
