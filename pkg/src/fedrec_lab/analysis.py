"""Attack and recommendation metrics, embedding-deviation summaries, the
defense cost-effectiveness ratio, and interaction-bucket breakdowns."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .numerics import RngStream


@dataclass
class AttackMetrics:
    precision: float
    recall: float
    f1: float


def attack_f1(predicted, truth) -> AttackMetrics:
    """Set precision/recall/F1 of a predicted positive-item set.

    Empty predictions score precision 0; F1 is 0 whenever P + R = 0.
    """
    pred = set(int(i) for i in predicted)
    true = set(int(i) for i in truth)
    if not true:
        raise ValueError("ground-truth positive set is empty")
    overlap = len(pred & true)
    precision = overlap / len(pred) if pred else 0.0
    recall = overlap / len(true)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return AttackMetrics(precision=precision, recall=recall, f1=f1)


def macro_attack_metrics(per_user: dict) -> dict:
    """Mean precision/recall/F1 over a user -> AttackMetrics table."""
    if not per_user:
        return {"users": 0, "precision": 0.0, "recall": 0.0, "f1": 0.0}
    ms = list(per_user.values())
    return {
        "users": len(ms),
        "precision": float(np.mean([m.precision for m in ms])),
        "recall": float(np.mean([m.recall for m in ms])),
        "f1": float(np.mean([m.f1 for m in ms])),
    }


@dataclass
class RecMetrics:
    k: int
    per_user: dict                  # user -> 0/1 hit
    mean: float
    protocol: str                   # "sampled:<n>" or "all-items"
    short_candidate_users: list     # users with fewer candidates than requested


def hit_at_k(score_fn, split, k: int = 10, n_candidates: int = 99,
             eval_seed: int = 0, which: str = "test",
             protocol: str = "sampled") -> RecMetrics:
    """Hit ratio at rank k under the sampled-candidates protocol.

    Per user, the held-out item is ranked among itself plus `n_candidates`
    items the user never interacted with (drawn from a fixed evaluation
    stream, so repeat calls rank identical lists). protocol="all" ranks
    against every non-interacted item instead. `score_fn(uid, item_ids)`
    returns model scores; ties break toward the lower item id.
    """
    hits = {}
    short = []
    n_items = split.catalog.n_items
    for uid in split.user_ids():
        client = split.clients[uid]
        target = client.test_item if which == "test" else client.val_item
        blocked = np.zeros(n_items, dtype=bool)
        blocked[client.positives] = True
        blocked[client.val_item] = True
        blocked[client.test_item] = True
        pool = np.flatnonzero(~blocked)
        if protocol == "sampled":
            take = min(n_candidates, len(pool))
            if take < n_candidates:
                short.append(uid)
            stream = RngStream(eval_seed, f"eval:{which}:{uid}")
            negs = pool[stream.sample(len(pool), take)]
        else:
            negs = pool
        candidates = np.concatenate([[target], negs])
        scores = np.asarray(score_fn(uid, candidates), dtype=np.float64)
        order = np.lexsort((candidates, -scores))
        hits[uid] = int(target in set(candidates[order][:k]))
    mean = float(np.mean(list(hits.values()))) if hits else 0.0
    label = f"sampled:{n_candidates}" if protocol == "sampled" else "all-items"
    return RecMetrics(k=k, per_user=hits, mean=mean, protocol=label,
                      short_candidate_users=short)


@dataclass
class DeviationReport:
    rows: list  # (round, mean ||u_t - u_0||^2, mean ||v_t - v_0||^2)

    def final(self):
        return self.rows[-1] if self.rows else (0, 0.0, 0.0)


def embedding_deviation(current: np.ndarray, initial: np.ndarray) -> float:
    """Mean squared L2 distance between matching rows of two embedding tables."""
    if current.shape != initial.shape:
        raise ValueError(f"shape mismatch {current.shape} vs {initial.shape}")
    return float(np.mean(np.sum((current - initial) ** 2, axis=1)))


def deviation_report(trace, initial_user: np.ndarray,
                     initial_item: np.ndarray) -> DeviationReport:
    """Per-round mean embedding drift from the initial tables.

    `trace` yields (round, user_matrix, item_matrix) snapshots; row order
    inside each matrix must match the initial tables (values are order-
    independent across users/items by symmetry of the mean).
    """
    rows = []
    for rnd, users, items in trace:
        rows.append((rnd,
                     embedding_deviation(users, initial_user),
                     embedding_deviation(items, initial_item)))
    return DeviationReport(rows=rows)


@dataclass
class CostEffectiveness:
    delta_f1: float
    delta_hit: float
    ratio: float
    infinite: bool


def cost_effectiveness(baseline, defended) -> CostEffectiveness:
    """|dF1| / |dHit@10| between a vanilla and a defended run; higher means the
    defense buys more attack suppression per unit of recommendation loss."""
    for v in (*baseline, *defended):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"metrics must lie in [0, 1], got {v}")
    d_f1 = abs(baseline[0] - defended[0])
    d_hit = abs(baseline[1] - defended[1])
    if d_hit == 0.0:
        return CostEffectiveness(d_f1, d_hit, math.inf, True)
    return CostEffectiveness(d_f1, d_hit, d_f1 / d_hit, False)


@dataclass
class BucketedF1:
    buckets: list       # (bucket index, user count, mean f1), ascending index
    empty_buckets: list
    spearman_rho: float  # rank correlation of bucket index vs mean f1


def bucketed_f1(per_user_f1: dict, bucket_map: dict) -> BucketedF1:
    """Mean F1 per interaction bucket, ordered by ascending interaction count."""
    missing = [u for u in per_user_f1 if u not in bucket_map]
    if missing:
        raise ValueError(f"users without a bucket: {missing[:5]}")
    grouped: dict[int, list] = {}
    for uid, f1 in per_user_f1.items():
        grouped.setdefault(bucket_map[uid], []).append(f1)
    all_buckets = range(max(bucket_map.values()) + 1) if bucket_map else range(0)
    rows = []
    empty = []
    for b in all_buckets:
        if b in grouped:
            rows.append((b, len(grouped[b]), float(np.mean(grouped[b]))))
        else:
            empty.append(b)
    if len(rows) >= 2 and len({r[2] for r in rows}) > 1:
        rho = float(stats.spearmanr([r[0] for r in rows], [r[2] for r in rows]).statistic)
    else:
        rho = 0.0
    return BucketedF1(buckets=rows, empty_buckets=empty, spearman_rho=rho)
