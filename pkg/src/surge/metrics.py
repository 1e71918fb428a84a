"""Offline CTR / ranking metrics.

Ranking metrics treat each ``group`` (a positive plus the negatives sampled
for the same event) as one candidate list. Score ties inside a list are
broken by ascending item index.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.stats import rankdata

REPORT_SCHEMA = "surge-metrics/1"


@dataclass
class ScoredInstances:
    user: np.ndarray
    score: np.ndarray
    label: np.ndarray
    valid_len: np.ndarray
    group: np.ndarray
    item: np.ndarray

    def __post_init__(self):
        for name in ("user", "score", "label", "valid_len", "group", "item"):
            setattr(self, name, np.asarray(getattr(self, name)))
        if not np.all(np.isfinite(self.score)):
            raise ValueError("non-finite score")

    def __len__(self) -> int:
        return len(self.score)


def auc(scores, labels) -> float | None:
    """P(score_pos > score_neg) with ties counted half; None when a class is missing."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def gauc(users, scores, labels, weighting: str = "clicks") -> float | None:
    """Per-user AUC averaged with weights = positive count (or impression count)."""
    users = np.asarray(users)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(users, kind="stable")
    users, scores, labels = users[order], scores[order], labels[order]
    bounds = np.flatnonzero(np.r_[True, users[1:] != users[:-1], True])
    num = []
    den = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        value = auc(scores[a:b], labels[a:b])
        if value is None:
            continue
        w = float(labels[a:b].sum()) if weighting == "clicks" else float(b - a)
        num.append(w * value)
        den.append(w)
    if not den:
        return None
    return float(np.sum(num) / np.sum(den))


def per_user_auc(users, scores, labels) -> dict:
    users = np.asarray(users)
    out = {}
    for u in np.unique(users):
        sel = users == u
        value = auc(np.asarray(scores)[sel], np.asarray(labels)[sel])
        if value is not None:
            out[u.item()] = value
    return out


def positive_ranks(groups, scores, labels, items) -> np.ndarray:
    """1-based rank of each group's positive by descending score."""
    groups = np.asarray(groups)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    items = np.asarray(items)
    order = np.lexsort((items, -scores, groups))
    g = groups[order]
    start = np.r_[0, np.flatnonzero(g[1:] != g[:-1]) + 1]
    first = np.repeat(start, np.diff(np.r_[start, len(g)]))
    rank = np.arange(len(g)) - first + 1
    return rank[labels[order] == 1]


def mrr(groups, scores, labels, items) -> float:
    ranks = positive_ranks(groups, scores, labels, items)
    return float(np.mean(1.0 / ranks)) if len(ranks) else 0.0


def ndcg_at_k(groups, scores, labels, items, k: int = 2) -> float:
    """Single relevant item per list, so IDCG = 1."""
    ranks = positive_ranks(groups, scores, labels, items)
    if not len(ranks):
        return 0.0
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(np.mean(gains))


def length_breakdown(users, valid_len, scores, labels, num_groups: int = 5) -> list[dict]:
    """GAUC per equal-frequency bucket of users ordered by mean history length.

    Users with equal length are ordered by id, so ties spill into the next
    bucket rather than merging buckets.
    """
    users = np.asarray(users)
    valid_len = np.asarray(valid_len, dtype=np.float64)
    uniq, inv = np.unique(users, return_inverse=True)
    mean_len = np.bincount(inv, weights=valid_len) / np.bincount(inv)
    order = np.lexsort((uniq, mean_len))
    rows = []
    for k, chunk in enumerate(np.array_split(order, num_groups)):
        sel = np.isin(inv, chunk)
        rows.append({
            "bucket": k,
            "users": int(len(chunk)),
            "min_len": float(mean_len[chunk].min()) if len(chunk) else None,
            "max_len": float(mean_len[chunk].max()) if len(chunk) else None,
            "gauc": gauc(users[sel], np.asarray(scores)[sel], np.asarray(labels)[sel]) if len(chunk) else None,
        })
    return rows


def evaluate(inst: ScoredInstances, k: int = 2) -> dict:
    cand = np.bincount(np.unique(inst.group, return_inverse=True)[1])
    return {
        "auc": auc(inst.score, inst.label),
        "gauc": gauc(inst.user, inst.score, inst.label),
        "mrr": mrr(inst.group, inst.score, inst.label, inst.item),
        f"ndcg@{k}": ndcg_at_k(inst.group, inst.score, inst.label, inst.item, k),
        "candidates_per_list": float(cand.mean()) if len(cand) else 0.0,
        "instances": len(inst),
    }


def paired_bootstrap(
    metric: Callable[[np.ndarray, np.ndarray], float | None],
    scores_a,
    scores_b,
    labels,
    num_samples: int = 1000,
    seed: int = 0,
) -> dict:
    """Resample instances jointly; returns the observed gap a - b and the
    fraction of resamples where a fails to beat b."""
    scores_a = np.asarray(scores_a)
    scores_b = np.asarray(scores_b)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    gaps = []
    for _ in range(num_samples):
        idx = rng.integers(0, len(labels), len(labels))
        a, b = metric(scores_a[idx], labels[idx]), metric(scores_b[idx], labels[idx])
        if a is not None and b is not None:
            gaps.append(a - b)
    gaps = np.asarray(gaps)
    return {
        "gap": metric(scores_a, labels) - metric(scores_b, labels),
        "p_value": float(np.mean(gaps <= 0)) if len(gaps) else math.nan,
        "samples": int(len(gaps)),
    }


# -- reports -----------------------------------------------------------------


def format_report(metrics: Mapping[str, object]) -> str:
    lines = [f"schema={REPORT_SCHEMA}"]
    for key in sorted(metrics):
        value = metrics[key]
        if isinstance(value, float):
            value = f"{value:.6f}"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def write_report(metrics: Mapping[str, object], text_path: str | Path, json_path: str | Path | None = None) -> None:
    Path(text_path).write_text(format_report(metrics), encoding="utf-8")
    if json_path is not None:
        payload = {"schema": REPORT_SCHEMA, "metrics": dict(metrics)}
        Path(json_path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
