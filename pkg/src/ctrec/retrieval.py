"""Hybrid cosine/semantic scoring, Top-K ranking and HR/NDCG evaluation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_KS = (10, 20)


def hybrid_score(y_hat, q, pi_flag: bool, pi_val: float = 0.05) -> float:
    """``cos(y_hat, q) * (1 + pi)`` with ``pi = pi_val`` when the semantic labels match."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    ny, nq = np.linalg.norm(y_hat), np.linalg.norm(q)
    if ny == 0 or nq == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(y_hat @ q / (ny * nq) * (1.0 + (pi_val if pi_flag else 0.0)))


def hybrid_scores(Y_hat, Q, match, pi_val: float = 0.05) -> np.ndarray:
    """Vectorised :func:`hybrid_score`: ``(B, d)`` predictions against ``(m, d)`` items.

    ``match`` is a ``(B, m)`` boolean label-agreement matrix (or ``None``).
    """
    Y = np.atleast_2d(np.asarray(Y_hat, dtype=np.float64))
    Q = np.asarray(Q, dtype=np.float64)
    ny = np.linalg.norm(Y, axis=1, keepdims=True)
    nq = np.linalg.norm(Q, axis=1)
    if np.any(ny == 0):
        raise ValueError("cosine similarity is undefined for a zero prediction")
    nq_safe = np.where(nq == 0, 1.0, nq)
    cos = (Y / ny) @ (Q / nq_safe[:, None]).T
    cos[:, nq == 0] = -np.inf  # items without a representation can never be retrieved
    if match is not None:
        cos = cos * np.where(np.asarray(match), 1.0 + pi_val, 1.0)
    return cos


def rank_topk(scores, K: int, exclude=()) -> np.ndarray:
    """Indices of the ``K`` best scores, descending, ties broken by lower index.

    Indices in ``exclude`` are never returned. If fewer than ``K`` candidates
    remain, all of them are returned with a warning.
    """
    s = np.asarray(scores, dtype=np.float64).copy()
    keep = np.ones(len(s), dtype=bool)
    if len(exclude):
        keep[np.asarray(list(exclude), dtype=np.int64)] = False
    cand = np.flatnonzero(keep)
    if K > len(cand):
        warnings.warn(f"K={K} exceeds the {len(cand)} available candidates; returning all",
                      RuntimeWarning, stacklevel=2)
        K = len(cand)
    # lexsort: last key is primary -> sort by -score, then by index
    order = np.lexsort((cand, -s[cand]))
    return cand[order[:K]]


@dataclass
class MetricReport:
    values: dict  # "HR@10" -> mean
    per_user: dict  # "HR@10" -> np.ndarray of per-user values
    n_users: int
    std: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def records(self, dataset="-", split="test", seed="-"):
        """Rows ``(dataset, split, metric, K, value, seed)``."""
        rows = []
        for key, val in self.values.items():
            name, k = key.split("@")
            rows.append((dataset, split, name, int(k), val, seed))
        return rows


def _fsum_mean(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return math.fsum(values.tolist()) / len(values) if len(values) else 0.0


def compute_metrics(rankings, targets, Ks=DEFAULT_KS) -> MetricReport:
    """HR@K and single-relevant-item NDCG@K averaged over users.

    ``rankings`` maps user -> ordered item list (or is a sequence aligned with
    ``targets``); ``targets`` maps user -> target item.
    """
    if not isinstance(targets, dict):
        targets = dict(enumerate(targets))
        rankings = dict(enumerate(rankings))
    per_user = {f"{m}@{k}": [] for m in ("HR", "NDCG") for k in Ks}
    for user, target in targets.items():
        if user not in rankings:
            raise KeyError(f"no ranking for user {user!r}")
        ranked = list(rankings[user])
        rank = ranked.index(target) + 1 if target in ranked else None
        for k in Ks:
            hit = rank is not None and rank <= k
            per_user[f"HR@{k}"].append(1.0 if hit else 0.0)
            per_user[f"NDCG@{k}"].append(1.0 / math.log2(rank + 1) if hit else 0.0)
    per_user = {key: np.asarray(v) for key, v in per_user.items()}
    # compensated summation keeps the reduction order-independent
    values = {key: _fsum_mean(v) for key, v in per_user.items()}
    return MetricReport(values, per_user, len(targets))


def aggregate_reports(reports) -> MetricReport:
    """Mean and population std of each metric across repeated inference runs."""
    keys = list(reports[0].values)
    values = {k: _fsum_mean([r.values[k] for r in reports]) for k in keys}
    std = {k: float(np.std([r.values[k] for r in reports])) for k in keys}
    per_user = {k: np.mean([r.per_user[k] for r in reports], axis=0) for k in keys}
    return MetricReport(values, per_user, reports[0].n_users, std)


def popularity_rankings(train_counts, histories, K):
    """Most-interacted train items first, history items excluded."""
    counts = np.asarray(train_counts, dtype=np.float64)
    return [rank_topk(counts, K, exclude=h) for h in histories]


def random_hit_rate(n_candidates, history_sizes, K=10) -> float:
    """Expected HR@K of a uniformly random ranking (history items excluded)."""
    sizes = np.asarray(history_sizes)
    return float(np.mean(np.minimum(1.0, K / (n_candidates - sizes))))
