import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from crossview.core.embedding_bank import EmbeddingBank
from crossview.core.errors import ConfigurationError, UsageError

STANDARD_KS = (1, 5, 10)


def _rankings(query_bank, ref_bank) -> np.ndarray:
    refs = ref_bank if isinstance(ref_bank, EmbeddingBank) else EmbeddingBank(np.asarray(ref_bank))
    queries = query_bank.vectors if isinstance(query_bank, EmbeddingBank) else np.asarray(query_bank)
    if len(refs) == 0:
        raise UsageError("Cannot evaluate against an empty reference set.")
    if queries.ndim != 2 or queries.shape[1] != refs.dim:
        raise ConfigurationError(f"Query bank of shape {queries.shape} does not match dim {refs.dim}")
    return refs.rank_all(queries)


def _positive_sets(positives: Sequence[Sequence[int]], n_queries: int) -> list[set[int]]:
    if len(positives) != n_queries:
        raise ConfigurationError(f"{len(positives)} positive lists for {n_queries} queries")
    sets = [set(int(p) for p in ps) for ps in positives]
    if any(len(s) == 0 for s in sets):
        raise UsageError("Every query needs at least one positive reference.")
    return sets


def _recall_from_rankings(rankings: np.ndarray, sets: list[set[int]], k: int) -> float:
    if len(sets) == 0:
        return 0.0
    hits = sum(1 for ranking, ps in zip(rankings, sets) if ps.intersection(ranking[:k].tolist()))
    return hits / len(sets)


def recall_at_k(query_bank, ref_bank, positives: Sequence[Sequence[int]], k: int) -> float:
    """
    Fraction of queries with at least one positive reference among the top ``k``.

    Args:
        query_bank: (M, D) array or EmbeddingBank of queries.
        ref_bank: (N, D) array or EmbeddingBank of references.
        positives: per query, the reference indices that count as correct.

    Raises:
        UsageError: k outside [1, N] or an empty positive list.
    """
    rankings = _rankings(query_bank, ref_bank)
    n_refs = rankings.shape[1]
    if not 1 <= k <= n_refs:
        raise UsageError(f"K={k} must lie in [1, {n_refs}]")
    return _recall_from_rankings(rankings, _positive_sets(positives, len(rankings)), k)


def one_percent_k(n_references: int) -> int:
    return max(1, math.ceil(n_references / 100))


def hit_rate(query_bank, ref_bank, positive_sets: Sequence[Sequence[int]]) -> float:
    """
    Fraction of queries whose top-1 reference lies in its positive (covering) set.

    Raises:
        UsageError: an empty positive set.
    """
    rankings = _rankings(query_bank, ref_bank)
    return _recall_from_rankings(rankings, _positive_sets(positive_sets, len(rankings)), 1)


@dataclass
class RetrievalReport:
    r_at: dict[int, float] = field(default_factory=dict)
    r_at_1pct: float = 0.0
    hit_rate: float = 0.0
    n_queries: int = 0
    n_references: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "retrieval",
            "r_at": {str(k): v for k, v in sorted(self.r_at.items())},
            "r_at_1pct": self.r_at_1pct,
            "hit_rate": self.hit_rate,
            "n_queries": self.n_queries,
            "n_references": self.n_references,
        }


def evaluate_retrieval(
    query_bank,
    ref_bank,
    positives: Sequence[Sequence[int]],
    positive_sets: Optional[Sequence[Sequence[int]]] = None,
    ks: Sequence[int] = STANDARD_KS,
) -> RetrievalReport:
    """
    R@K for the standard Ks that fit the reference set, R@N, R@1% and hit rate.

    ``positives`` drive R@K; ``positive_sets`` (defaulting to ``positives``)
    drive the hit rate, so semi-positives only count towards the latter.
    """
    rankings = _rankings(query_bank, ref_bank)
    n_refs = rankings.shape[1]
    sets = _positive_sets(positives, len(rankings))
    cover = sets if positive_sets is None else _positive_sets(positive_sets, len(rankings))

    wanted = sorted({k for k in ks if k <= n_refs} | {n_refs})
    return RetrievalReport(
        r_at={k: _recall_from_rankings(rankings, sets, k) for k in wanted},
        r_at_1pct=_recall_from_rankings(rankings, sets, one_percent_k(n_refs)),
        hit_rate=_recall_from_rankings(rankings, cover, 1),
        n_queries=len(rankings),
        n_references=n_refs,
    )
