"""Video-to-video similarity measures and ranked retrieval evaluation.

Sequences are (f, d) arrays of unit-norm frame descriptors. The chamfer
similarity averages, over the query's frames, the best-matching frame of
the candidate; the cosine measure compares normalized mean-pooled vectors.
The unnormalized mean-of-means decomposition is exposed separately because
it is a guaranteed lower bound of the chamfer similarity (per-row mean <=
per-row max), which the tests exercise.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .validation import (
    DataError,
    DegenerateInputError,
    MalformedInputError,
    as_float_matrix,
)

_TILE_ROWS = 512


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = as_float_matrix(x, "x")
    y = as_float_matrix(y, "y")
    if x.shape[1] != y.shape[1]:
        raise MalformedInputError(
            f"descriptor dimensions differ: {x.shape[1]} vs {y.shape[1]}"
        )
    return x, y


def chamfer_similarity(x, y) -> float:
    """Mean over x's frames of the best dot product against y's frames."""
    x, y = _pair(x, y)
    total = 0.0
    for start in range(0, x.shape[0], _TILE_ROWS):
        block = x[start : start + _TILE_ROWS] @ y.T
        total += float(block.max(axis=1).sum())
    return total / x.shape[0]


def symmetric_chamfer(x, y) -> float:
    return 0.5 * (chamfer_similarity(x, y) + chamfer_similarity(y, x))


def video_descriptor(x) -> np.ndarray:
    """Normalized mean pooling of a frame sequence."""
    x = as_float_matrix(x, "sequence")
    mean = x.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm <= 1e-12:
        raise DegenerateInputError("mean-pooled descriptor is numerically zero")
    return mean / norm


def cosine_similarity_video(x, y) -> float:
    """Dot product of the normalized mean-pooled descriptors."""
    return float(video_descriptor(x) @ video_descriptor(y))


def mean_pairwise_similarity(x, y) -> float:
    """Unnormalized mean of all pairwise dots; lower-bounds chamfer_similarity."""
    x, y = _pair(x, y)
    return float(x.mean(axis=0) @ y.mean(axis=0))


MEASURES = ("cosine", "chamfer", "symmetric-chamfer")


def similarity_measure(name: str):
    if name == "cosine":
        return cosine_similarity_video
    if name == "chamfer":
        return chamfer_similarity
    if name == "symmetric-chamfer":
        return symmetric_chamfer
    raise MalformedInputError(f"unknown measure {name!r}; expected one of {MEASURES}")


def average_precision(ranked_ids: list[str], relevant: set[str]) -> float:
    """Precision summed at each relevant rank, divided by the relevant count."""
    if not relevant:
        raise MalformedInputError("relevant set is empty")
    hits = 0
    total = 0.0
    for rank, vid in enumerate(ranked_ids, start=1):
        if vid in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


@dataclass
class EvaluationReport:
    measure: str
    per_query: dict[str, dict[str, float]]  # tier -> query id -> AP
    map_per_tier: dict[str, float]
    timing: dict[str, float] = field(default_factory=dict)

    @property
    def map(self) -> float:
        """Mean AP of the sole tier; ambiguous (and an error) with several."""
        if len(self.map_per_tier) != 1:
            raise ValueError("report has multiple tiers; use map_per_tier")
        return next(iter(self.map_per_tier.values()))

    def to_dict(self) -> dict:
        return {
            "measure": self.measure,
            "map": self.map_per_tier,
            "per_query": self.per_query,
            "timing": self.timing,
        }


def normalize_ground_truth(ground_truth: dict) -> dict[str, dict[str, set[str]]]:
    """Accept {query: [ids]} or {query: {tier: [ids]}}; return the tiered form."""
    out: dict[str, dict[str, set[str]]] = {}
    for query, entry in ground_truth.items():
        if isinstance(entry, dict):
            out[query] = {tier: set(ids) for tier, ids in entry.items()}
        else:
            out[query] = {"all": set(entry)}
    return out


def rank_corpus(corpus: dict[str, np.ndarray], query_sequence, measure: str) -> list[str]:
    """Corpus ids ranked by descending similarity, ties broken by ascending id."""
    sim = similarity_measure(measure)
    scored = [(-sim(query_sequence, seq), vid) for vid, seq in corpus.items()]
    scored.sort()
    return [vid for _, vid in scored]


def rank_and_score(
    corpus: dict[str, np.ndarray],
    queries,
    ground_truth: dict,
    measure: str = "chamfer",
    *,
    query_sequences: dict[str, np.ndarray] | None = None,
    threads: int = 1,
) -> EvaluationReport:
    """Rank the corpus for each query and report AP / mAP per ground-truth tier.

    Queries are either corpus ids or keys of ``query_sequences``. A query is
    excluded from its own ranked list; queries whose relevant sets are empty
    (or missing entirely) are skipped with a warning.
    """
    started = time.perf_counter()
    tiers = normalize_ground_truth(ground_truth)
    corpus_ids = set(corpus)
    for query, entry in tiers.items():
        for tier, relevant in entry.items():
            missing = relevant - corpus_ids
            if missing:
                raise DataError(
                    f"ground truth for {query!r} tier {tier!r} references ids "
                    f"not in the corpus: {sorted(missing)[:5]}"
                )

    def query_sequence(query: str) -> np.ndarray:
        if query_sequences is not None and query in query_sequences:
            return query_sequences[query]
        if query in corpus:
            return corpus[query]
        raise DataError(f"query {query!r} not found in corpus or query set")

    active = []
    for query in queries:
        entry = tiers.get(query)
        if not entry or all(len(rel) == 0 for rel in entry.values()):
            warnings.warn(f"query {query!r} has no relevant videos; skipped")
            continue
        active.append(query)

    def evaluate(query: str) -> tuple[str, list[str]]:
        candidates = {vid: seq for vid, seq in corpus.items() if vid != query}
        return query, rank_corpus(candidates, query_sequence(query), measure)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rankings = dict(pool.map(evaluate, active))
    else:
        rankings = dict(evaluate(q) for q in active)
    similarity_seconds = time.perf_counter() - started

    per_query: dict[str, dict[str, float]] = {}
    for query in active:
        for tier, relevant in tiers[query].items():
            if not relevant:
                continue
            ap = average_precision(rankings[query], relevant)
            per_query.setdefault(tier, {})[query] = ap

    map_per_tier = {
        tier: float(np.mean(list(aps.values()))) for tier, aps in sorted(per_query.items())
    }
    return EvaluationReport(
        measure=measure,
        per_query=per_query,
        map_per_tier=map_per_tier,
        timing={
            "similarity_seconds": similarity_seconds,
            "total_seconds": time.perf_counter() - started,
        },
    )
