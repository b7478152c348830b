"""Retrieval, selectivity, staircase, emergence, leakage, drift, rank and
zero-shot diagnostics over embedding caches.

Tie policy everywhere: a positive must win strictly; equal scores count as
misses so that degenerate collapses are never credited.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datastore import CandidatePool, EmbeddingCache, build_pool
from .errors import GraspError
from .transforms import (
    NEGATIVE_TYPES,
    STYLE_VIEW,
    VIEW_LEVELS,
    InterfaceContract,
    prefix_normalize,
)


def _rows64(rows: np.ndarray) -> np.ndarray:
    return np.asarray(rows, dtype=np.float64)


def _score_matrix(transform, query_rows, cand_rows, k: int, tau: float) -> np.ndarray:
    zq = prefix_normalize(transform.apply(_rows64(query_rows)), k)
    zc = prefix_normalize(transform.apply(_rows64(cand_rows)), k)
    return (zq @ zc.T) / tau


def recall_at_1(
    cache: EmbeddingCache,
    transform,
    pool: CandidatePool,
    k: int,
    query_ids,
    tau: float = 1.0,
) -> float:
    """Image-to-text R@1 percentage; the query's own text must rank strictly first."""
    cand_pos = {cid: j for j, cid in enumerate(pool.candidate_ids)}
    positives = []
    for qid in query_ids:
        if qid not in cand_pos:
            raise GraspError("POSITIVE_NOT_IN_POOL", f"query {qid!r} has no positive in the pool")
        positives.append(cand_pos[qid])
    positives = np.array(positives, dtype=np.intp)
    q_idx = cache.indices_of(query_ids)
    c_idx = cache.indices_of(pool.candidate_ids)
    s = _score_matrix(transform, cache.images[q_idx], cache.views[pool.view_level][c_idx], k, tau)
    top = s.max(axis=1)
    n_at_top = (s == top[:, None]).sum(axis=1)
    own = s[np.arange(len(positives)), positives]
    hits = (own == top) & (n_at_top == 1)
    return float(100.0 * hits.mean())


def selectivity(
    cache: EmbeddingCache,
    transform,
    k: int,
    neg_type: str,
    query_ids,
    tau: float = 1.0,
) -> float:
    """Percentage of queries whose style-matched positive beats the typed negative."""
    idx = cache.indices_of(query_ids)
    zi = prefix_normalize(transform.apply(_rows64(cache.images[idx])), k)
    zp = prefix_normalize(transform.apply(_rows64(cache.views[STYLE_VIEW[neg_type]][idx])), k)
    zn = prefix_normalize(transform.apply(_rows64(cache.negatives[neg_type][idx])), k)
    cp = np.einsum("ij,ij->i", zi, zp) / tau
    cn = np.einsum("ij,ij->i", zi, zn) / tau
    return float(100.0 * np.mean(cp > cn))


# ---------------------------------------------------------------------------
# Selectivity table and aggregates


@dataclass
class SelTable:
    prefixes: tuple[int, ...]
    types: tuple[str, ...]
    values: np.ndarray  # (len(prefixes), len(types)) percentages

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.prefixes), len(self.types)):
            raise GraspError("MISSING_CELL", f"selectivity table shape {self.values.shape} inconsistent")

    def cell(self, k: int, neg_type: str) -> float:
        try:
            return float(self.values[self.prefixes.index(k), self.types.index(neg_type)])
        except ValueError:
            raise GraspError("MISSING_CELL", f"no selectivity cell ({k}, {neg_type})") from None

    def to_json_dict(self) -> dict:
        return {
            "prefixes": list(self.prefixes),
            "types": list(self.types),
            "values": [[float(v) for v in row] for row in self.values],
        }


def sel_table(cache: EmbeddingCache, transform, contract: InterfaceContract, query_ids) -> SelTable:
    values = np.zeros((len(contract.prefixes), len(NEGATIVE_TYPES)))
    for i, k in enumerate(contract.prefixes):
        for j, r in enumerate(NEGATIVE_TYPES):
            values[i, j] = selectivity(cache, transform, k, r, query_ids)
    return SelTable(prefixes=contract.prefixes, types=NEGATIVE_TYPES, values=values)


HARD_AVG_TYPES = ("object", "attribute", "relation", "full")


def hard_average(sel: SelTable, contract: InterfaceContract) -> float:
    """Mean selectivity at each staircase type's assigned boundary prefix."""
    return float(np.mean([sel.cell(contract.kappa[r], r) for r in HARD_AVG_TYPES]))


def retrieval_average(ret_cells: dict[int, float], contract: InterfaceContract) -> float:
    """Mean R@1 over the assigned (prefix, view) cells, excluding the full prefix."""
    cells = []
    for k in contract.prefixes:
        if k == contract.dim:
            continue
        if k not in ret_cells:
            raise GraspError("MISSING_CELL", f"missing retrieval cell for prefix {k}")
        cells.append(ret_cells[k])
    if not cells:
        raise GraspError("MISSING_CELL", "no assigned retrieval cells")
    return float(np.mean(cells))


def stair_score(ret_avg: float, hard_avg: float) -> float:
    return 0.5 * (ret_avg + hard_avg)


def staircase(ret_cells: dict[int, float], sel: SelTable, contract: InterfaceContract):
    """(RetAvg, HardAvg, Stair) from assigned retrieval cells and the Sel table."""
    ret_avg = retrieval_average(ret_cells, contract)
    hard_avg = hard_average(sel, contract)
    return ret_avg, hard_avg, stair_score(ret_avg, hard_avg)


def emergence_gap(sel: SelTable, contract: InterfaceContract, neg_type: str) -> float:
    """Selectivity at the assigned boundary minus its mean over earlier prefixes."""
    boundary = contract.kappa[neg_type]
    earlier = [k for k in sel.prefixes if k < boundary]
    if not earlier:
        raise GraspError("NO_EARLIER_PREFIX", f"kappa({neg_type}) is the first prefix")
    at_boundary = sel.cell(boundary, neg_type)
    return float(at_boundary - np.mean([sel.cell(k, neg_type) for k in earlier]))


def emergence(sel: SelTable, contract: InterfaceContract):
    """Per-type emergence gaps and their mean.

    Types whose boundary is the first prefix have no earlier prefix and are
    excluded from the mean.
    """
    gaps: dict[str, float] = {}
    for r in NEGATIVE_TYPES:
        if any(k < contract.kappa[r] for k in sel.prefixes):
            gaps[r] = emergence_gap(sel, contract, r)
    if not gaps:
        raise GraspError("NO_EARLIER_PREFIX", "every type's boundary is the first prefix")
    return gaps, float(np.mean(list(gaps.values())))


def emergence_vs_first(sel: SelTable, contract: InterfaceContract, neg_type: str) -> float:
    """Boundary selectivity minus the first-prefix cell only.

    Companion readout to the mean-over-earlier-prefixes gap: the two published
    summaries differ for external probes, so both are reported.
    """
    boundary = contract.kappa[neg_type]
    first = sel.prefixes[0]
    if boundary <= first:
        raise GraspError("NO_EARLIER_PREFIX", f"kappa({neg_type}) is the first prefix")
    return float(sel.cell(boundary, neg_type) - sel.cell(first, neg_type))


def leakage(sel: SelTable, contract: InterfaceContract) -> float:
    """Mean selectivity over all (prefix, type) cells before the assigned boundary."""
    cells = [sel.cell(k, r) for r in NEGATIVE_TYPES for k in sel.prefixes if k < contract.kappa[r]]
    if not cells:
        raise GraspError("EMPTY_SET", "no pre-boundary cells under this contract")
    return float(np.mean(cells))


# ---------------------------------------------------------------------------
# Full-space drift


def full_drift(
    rows: np.ndarray,
    transform,
    renormalize: bool = True,
    max_exhaustive: int = 2000,
    min_pairs: int = 1_000_000,
    seed: int = 0,
) -> float:
    """Max absolute change of full-dimensional pairwise similarities.

    Exhaustive over all pairs up to ``max_exhaustive`` rows; beyond that a
    seeded subsample of at least ``min_pairs`` pairs is used.  With
    ``renormalize`` the transformed rows are re-unitized first, so the value
    measures cosine drift; without it the raw inner products are compared.
    """
    e = _rows64(rows)
    e = e / np.linalg.norm(e, axis=1, keepdims=True)
    z = transform.apply(_rows64(rows))
    if renormalize:
        z = z / np.linalg.norm(z, axis=1, keepdims=True)
    n = e.shape[0]
    if n < 2:
        raise GraspError("DIM_MISMATCH", "drift needs at least two rows")
    if n <= max_exhaustive:
        return float(np.abs(z @ z.T - e @ e.T).max())
    rng = np.random.default_rng(seed)
    worst = 0.0
    remaining = min_pairs
    chunk = 250_000
    while remaining > 0:
        m = min(chunk, remaining)
        a = rng.integers(n, size=m)
        b = rng.integers(n, size=m)
        da = np.einsum("ij,ij->i", z[a], z[b]) - np.einsum("ij,ij->i", e[a], e[b])
        worst = max(worst, float(np.abs(da).max()))
        remaining -= m
    return worst


# ---------------------------------------------------------------------------
# Rank statistics and zero-shot classification


@dataclass
class RankStats:
    purity_at_10: float
    category_map: float
    median_rank: float
    r_at_1: float
    same_label_r_at_1: float

    def to_json_dict(self) -> dict:
        return {
            "purity_at_10": self.purity_at_10,
            "category_map": self.category_map,
            "median_rank": self.median_rank,
            "r_at_1": self.r_at_1,
            "same_label_r_at_1": self.same_label_r_at_1,
        }


def rank_stats(
    cache: EmbeddingCache,
    transform,
    pool: CandidatePool,
    k: int,
    query_ids,
    labels: dict[str, str],
    tau: float = 1.0,
) -> RankStats:
    """Label-aware ranking statistics for one prefix.

    Ranks are 1-based and pessimistic about ties: tied candidates count as
    ranked above the positive.
    """
    for cid in pool.candidate_ids:
        if cid not in labels:
            raise GraspError("MISSING_LABELS", f"candidate {cid!r} has no label")
    for qid in query_ids:
        if qid not in labels:
            raise GraspError("MISSING_LABELS", f"query {qid!r} has no label")
    cand_pos = {cid: j for j, cid in enumerate(pool.candidate_ids)}
    q_idx = cache.indices_of(query_ids)
    c_idx = cache.indices_of(pool.candidate_ids)
    s = _score_matrix(transform, cache.images[q_idx], cache.views[pool.view_level][c_idx], k, tau)
    cand_labels = np.array([labels[cid] for cid in pool.candidate_ids])
    n_cand = len(pool.candidate_ids)
    top_n = min(10, n_cand)

    purities, aps, ranks, hits, label_hits = [], [], [], [], []
    for i, qid in enumerate(query_ids):
        scores = s[i]
        order = np.argsort(-scores, kind="stable")
        q_label = labels[qid]
        ordered_match = cand_labels[order] == q_label
        purities.append(ordered_match[:top_n].mean())
        n_rel = int(ordered_match.sum())
        if n_rel:
            hit_positions = np.flatnonzero(ordered_match) + 1
            precisions = np.arange(1, n_rel + 1) / hit_positions
            aps.append(precisions.mean())
        else:
            aps.append(0.0)
        if qid in cand_pos:
            pos = cand_pos[qid]
            rank = int(np.sum(scores >= scores[pos]))  # counts self; ties rank above
            ranks.append(rank)
            hits.append(rank == 1)
        top = scores.max()
        unique_top = (scores == top).sum() == 1
        label_hits.append(bool(unique_top and cand_labels[np.argmax(scores)] == q_label))
    if not ranks:
        raise GraspError("POSITIVE_NOT_IN_POOL", "no query has its positive in the pool")
    return RankStats(
        purity_at_10=float(100.0 * np.mean(purities)),
        category_map=float(100.0 * np.mean(aps)),
        median_rank=float(np.median(ranks)),
        r_at_1=float(100.0 * np.mean(hits)),
        same_label_r_at_1=float(100.0 * np.mean(label_hits)),
    )


def zero_shot(
    image_rows: np.ndarray,
    true_labels: np.ndarray,
    class_rows: np.ndarray,
    k: int,
    transform,
    tau: float = 1.0,
) -> float:
    """Top-1 percentage classifying each image against class text rows; ties miss."""
    class_rows = _rows64(class_rows)
    if class_rows.shape[0] < 2:
        raise GraspError("DIM_MISMATCH", "zero-shot needs at least two classes")
    s = _score_matrix(transform, image_rows, class_rows, k, tau)
    labels = np.asarray(true_labels, dtype=np.intp)
    top = s.max(axis=1)
    n_at_top = (s == top[:, None]).sum(axis=1)
    own = s[np.arange(s.shape[0]), labels]
    return float(100.0 * np.mean((own == top) & (n_at_top == 1)))


# ---------------------------------------------------------------------------
# The assembled diagnostic report


@dataclass
class DiagnosticReport:
    retrieval: dict[tuple[int, str], float]  # (prefix, view) -> R@1
    sel: SelTable
    ret_avg: float
    hard_avg: float
    stair: float
    leak: float
    emergence_gaps: dict[str, float]
    emergence_mean: float
    emergence_vs_first: dict[str, float]
    drift: float
    drift_raw: float
    pool_mode: str
    pool_size: int
    n_queries: int
    rank: RankStats | None = None

    def __post_init__(self):
        want = stair_score(self.ret_avg, self.hard_avg)
        if self.stair != want:
            raise GraspError("MISSING_CELL", "stored staircase must equal (RetAvg + HardAvg) / 2")

    def to_json_dict(self) -> dict:
        return {
            "retrieval": {f"{k}:{g}": v for (k, g), v in self.retrieval.items()},
            "selectivity": self.sel.to_json_dict(),
            "ret_avg": self.ret_avg,
            "hard_avg": self.hard_avg,
            "stair": self.stair,
            "leak": self.leak,
            "emergence": {
                "per_type": self.emergence_gaps,
                "mean": self.emergence_mean,
                "vs_first_prefix": self.emergence_vs_first,
            },
            "drift": self.drift,
            "drift_raw": self.drift_raw,
            "pool": {"mode": self.pool_mode, "size": self.pool_size},
            "n_queries": self.n_queries,
            "rank_stats": self.rank.to_json_dict() if self.rank else None,
        }


def diagnostic_report(
    cache: EmbeddingCache,
    transform,
    contract: InterfaceContract,
    pool_mode: str = "full",
    query_split: str = "test",
    labels: dict[str, str] | None = None,
    drift_rows: int = 1000,
    drift_seed: int = 0,
) -> DiagnosticReport:
    """Evaluate the full prefix grid for one transform."""
    query_ids = cache.split_ids(query_split)
    if not query_ids:
        raise GraspError("EMPTY_POOL", f"no queries in split {query_split!r}")
    retrieval: dict[tuple[int, str], float] = {}
    pools = {g: build_pool(cache, pool_mode, g) for g in VIEW_LEVELS}
    for k in contract.prefixes:
        for g in VIEW_LEVELS:
            retrieval[(k, g)] = recall_at_1(cache, transform, pools[g], k, query_ids)
    sel = sel_table(cache, transform, contract, query_ids)
    ret_cells = {k: retrieval[(k, contract.view_of[k])] for k in contract.prefixes if k != contract.dim}
    ret_avg, hard_avg, stair = staircase(ret_cells, sel, contract)
    gaps, gap_mean = emergence(sel, contract)
    vs_first = {r: emergence_vs_first(sel, contract, r) for r in gaps}
    leak = leakage(sel, contract)

    rows = np.concatenate([cache.images, cache.views["G3"]], axis=0).astype(np.float64)
    if rows.shape[0] > drift_rows:
        step = rows.shape[0] // drift_rows
        rows = rows[::step][:drift_rows]
    drift = full_drift(rows, transform, renormalize=True, seed=drift_seed)
    drift_raw = full_drift(rows, transform, renormalize=False, seed=drift_seed)

    rank = None
    if labels is not None:
        pool = pools["G3"]
        rank = rank_stats(cache, transform, pool, contract.prefixes[-2], query_ids, labels)

    return DiagnosticReport(
        retrieval=retrieval,
        sel=sel,
        ret_avg=ret_avg,
        hard_avg=hard_avg,
        stair=stair,
        leak=leak,
        emergence_gaps=gaps,
        emergence_mean=gap_mean,
        emergence_vs_first=vs_first,
        drift=drift,
        drift_raw=drift_raw,
        pool_mode=pool_mode,
        pool_size=len(pools["G3"].candidate_ids),
        n_queries=len(query_ids),
        rank=rank,
    )
