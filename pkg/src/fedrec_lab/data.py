"""Interaction ingestion, leave-one-out splitting, and negative sampling.

Feedback is implicit: every parsed rating becomes label 1 and per-round
negatives are drawn from the unobserved items at a configurable
positives:negatives ratio (default 1:4).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import RngStream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    label: int = 1
    timestamp: int = 0


@dataclass(frozen=True)
class DatasetFormat:
    """Column mapping for a delimited interaction file."""

    delimiter: str = "\t"
    header: bool = False
    user_col: int = 0
    item_col: int = 1
    rating_col: int | None = 2
    timestamp_col: int | None = 3


FORMAT_PRESETS = {
    # MovieLens-100K u.data: user \t item \t rating \t unix timestamp
    "ml-100k": DatasetFormat("\t", False, 0, 1, 2, 3),
    # generic comma file without timestamps; recency falls back to file order
    "csv": DatasetFormat(",", True, 0, 1, 2, None),
}


@dataclass
class Catalog:
    n_users: int
    n_items: int
    user_keys: list
    item_keys: list
    user_index: dict
    item_index: dict
    item_popularity: np.ndarray  # interaction count per dense item id

    def top_popular(self, fraction: float) -> np.ndarray:
        """Dense ids of the ceil(fraction * n_items) most interacted items."""
        k = int(np.ceil(fraction * self.n_items))
        order = np.lexsort((np.arange(self.n_items), -self.item_popularity))
        return np.sort(order[:k])


@dataclass
class ClientDataset:
    """One user's local data: training positives, the two held-out items,
    and the negatives sampled for the current round."""

    user: int
    positives: np.ndarray          # sorted dense item ids
    val_item: int
    test_item: int
    negatives: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def copy(self) -> "ClientDataset":
        return replace(self, positives=self.positives.copy(),
                       negatives=self.negatives.copy())


@dataclass
class SplitReport:
    n_users: int
    n_items: int
    n_interactions: int
    retained_users: int
    excluded_users: list
    duplicates_dropped: int

    def as_dict(self) -> dict:
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": self.n_interactions,
            "retained_users": self.retained_users,
            "excluded_users": len(self.excluded_users),
            "avg_interactions_per_user": (
                round(self.n_interactions / self.n_users, 2) if self.n_users else 0.0
            ),
            "density_percent": (
                round(100.0 * self.n_interactions / (self.n_users * self.n_items), 4)
                if self.n_users and self.n_items else 0.0
            ),
            "duplicates_dropped": self.duplicates_dropped,
        }


@dataclass
class DatasetSplit:
    clients: dict  # user id -> ClientDataset
    catalog: Catalog
    report: SplitReport

    def user_ids(self) -> list:
        return sorted(self.clients)


def load_dataset(path, fmt: DatasetFormat):
    """Parse a delimited interaction file into (interactions, catalog).

    All ratings binarize to label 1. Dense user/item ids are assigned in
    first-seen order; duplicate (user, item) pairs keep the first occurrence.
    Missing timestamp column -> file order stands in for recency.
    """
    interactions: list[Interaction] = []
    user_index: dict = {}
    item_index: dict = {}
    user_keys: list = []
    item_keys: list = []
    seen = set()
    duplicates = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if fmt.header and lineno == 1:
                continue
            line = line.strip("\n")
            if not line.strip():
                continue
            parts = line.split(fmt.delimiter)
            try:
                user_key = parts[fmt.user_col].strip()
                item_key = parts[fmt.item_col].strip()
                if fmt.rating_col is not None:
                    float(parts[fmt.rating_col])  # validated, then binarized away
                ts = (
                    int(float(parts[fmt.timestamp_col]))
                    if fmt.timestamp_col is not None
                    else len(interactions)
                )
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}: unparseable row at line {lineno}: {line!r}") from exc
            if user_key not in user_index:
                user_index[user_key] = len(user_keys)
                user_keys.append(user_key)
            if item_key not in item_index:
                item_index[item_key] = len(item_keys)
                item_keys.append(item_key)
            uid = user_index[user_key]
            iid = item_index[item_key]
            if (uid, iid) in seen:
                duplicates += 1
                continue
            seen.add((uid, iid))
            interactions.append(Interaction(uid, iid, 1, ts))
    if duplicates:
        log.info("dropped %d duplicate (user, item) rows from %s", duplicates, path)
    popularity = np.zeros(len(item_keys), dtype=np.int64)
    for it in interactions:
        popularity[it.item] += 1
    catalog = Catalog(
        n_users=len(user_keys),
        n_items=len(item_keys),
        user_keys=user_keys,
        item_keys=item_keys,
        user_index=user_index,
        item_index=item_index,
        item_popularity=popularity,
    )
    return interactions, catalog, duplicates


def subsample_users(interactions, catalog: Catalog, n_users: int):
    """Keep only the n smallest user keys (numeric when possible), re-indexed
    densely. The item catalog stays whole: the server hosts embeddings for
    the full item universe no matter which clients participate."""
    def keyfn(k):
        try:
            return (0, int(k))
        except (TypeError, ValueError):
            return (1, str(k))

    keep = set(sorted(catalog.user_keys, key=keyfn)[:n_users])
    user_index: dict = {}
    user_keys: list = []
    kept: list[Interaction] = []
    for it in interactions:
        ukey = catalog.user_keys[it.user]
        if ukey not in keep:
            continue
        if ukey not in user_index:
            user_index[ukey] = len(user_keys)
            user_keys.append(ukey)
        kept.append(Interaction(user_index[ukey], it.item, 1, it.timestamp))
    popularity = np.zeros(catalog.n_items, dtype=np.int64)
    for it in kept:
        popularity[it.item] += 1
    return kept, Catalog(
        n_users=len(user_keys), n_items=catalog.n_items,
        user_keys=user_keys, item_keys=list(catalog.item_keys),
        user_index=user_index, item_index=dict(catalog.item_index),
        item_popularity=popularity,
    )


def leave_one_out_split(interactions, catalog: Catalog, rng: RngStream,
                        duplicates_dropped: int = 0) -> DatasetSplit:
    """Hold out each user's most recent item for test and second most recent
    for validation; the rest are training positives.

    Timestamp ties break through `rng`. Users with fewer than 3 interactions
    cannot be split and are excluded (listed in the report).
    """
    by_user: dict[int, list[Interaction]] = {}
    for it in interactions:
        by_user.setdefault(it.user, []).append(it)

    clients: dict[int, ClientDataset] = {}
    excluded = []
    retained_interactions = 0
    for uid in sorted(by_user):
        rows = by_user[uid]
        if len(rows) < 3:
            excluded.append(uid)
            continue
        # random shuffle then stable sort by timestamp: recency order with
        # rng-resolved ties
        perm = rng.child(f"ties:{uid}").shuffled_index(len(rows))
        shuffled = [rows[i] for i in perm]
        ordered = sorted(shuffled, key=lambda r: r.timestamp)
        test = ordered[-1].item
        val = ordered[-2].item
        positives = np.sort(np.array([r.item for r in ordered[:-2]], dtype=np.int64))
        clients[uid] = ClientDataset(user=uid, positives=positives,
                                     val_item=val, test_item=test)
        retained_interactions += len(rows)
    if excluded:
        log.info("excluded %d users with < 3 interactions", len(excluded))
    report = SplitReport(
        n_users=catalog.n_users,
        n_items=catalog.n_items,
        n_interactions=len(interactions),
        retained_users=len(clients),
        excluded_users=excluded,
        duplicates_dropped=duplicates_dropped,
    )
    return DatasetSplit(clients=clients, catalog=catalog, report=report)


def parse_ratio(ratio: str) -> tuple[int, int]:
    """'1:4' -> (1, 4): one positive per four sampled negatives."""
    try:
        pos, neg = ratio.split(":")
        pos_i, neg_i = int(pos), int(neg)
    except ValueError as exc:
        raise ValueError(f"ratio must look like '1:4', got {ratio!r}") from exc
    if pos_i <= 0 or neg_i <= 0:
        raise ValueError(f"ratio parts must be positive, got {ratio!r}")
    return pos_i, neg_i


def positive_fraction(ratio: str) -> float:
    pos, neg = parse_ratio(ratio)
    return pos / (pos + neg)


def sample_negatives(client: ClientDataset, catalog: Catalog, ratio: str,
                     rng: RngStream) -> np.ndarray:
    """Resample the client's negatives: floor(neg/pos * |positives|) items
    drawn uniformly without replacement from outside positives + holdouts."""
    pos, neg = parse_ratio(ratio)
    count = int(len(client.positives) * neg // pos)
    blocked = np.zeros(catalog.n_items, dtype=bool)
    blocked[client.positives] = True
    blocked[client.val_item] = True
    blocked[client.test_item] = True
    candidates = np.flatnonzero(~blocked)
    if len(candidates) < count:
        raise ValueError(
            f"user {client.user}: only {len(candidates)} candidate items for "
            f"{count} negatives"
        )
    picked = rng.sample(len(candidates), count)
    client.negatives = np.sort(candidates[picked])
    return client.negatives


def interaction_buckets(split: DatasetSplit, n: int = 20) -> dict:
    """Partition users into n groups by ascending training-positive count.

    Group sizes differ by at most one; the remainder goes to the last groups.
    Returns user id -> bucket index.
    """
    if n < 1:
        raise ValueError(f"bucket count must be >= 1, got {n}")
    users = sorted(split.clients, key=lambda u: (len(split.clients[u].positives), u))
    base, rem = divmod(len(users), n)
    sizes = [base + (1 if i >= n - rem else 0) for i in range(n)]
    buckets = {}
    at = 0
    for b, size in enumerate(sizes):
        for uid in users[at:at + size]:
            buckets[uid] = b
        at += size
    return buckets


def write_synthetic_dataset(path, n_users: int = 943, n_items: int = 1682,
                            n_interactions: int = 100_000, seed: int = 20240913,
                            latent_dim: int = 8, min_per_user: int = 20,
                            max_per_user: int | None = None) -> None:
    """Write a deterministic MovieLens-100K-shaped interaction file.

    Stands in for the real u.data when it cannot be redistributed: same
    delimited layout (user, item, rating, timestamp), same user/item/
    interaction counts by construction, and a low-rank preference structure
    plus popularity skew so the file is learnable by a recommender. Per-user
    activity is capped so 1:4 negative sampling without replacement always
    has enough candidate items.
    """
    if max_per_user is None:
        max_per_user = (n_items - 2) // 5
    if n_interactions < n_users * min_per_user:
        raise ValueError("interaction budget below the per-user minimum")
    if n_interactions > n_users * max_per_user:
        raise ValueError("interaction budget above the per-user cap")
    rng = RngStream(seed, "synth")

    # user activity: lognormal-ish weights clipped to the bounds, exact total
    act = np.exp(rng.normals(n_users, 1.0))
    counts = np.clip(np.floor(act / act.sum() * n_interactions).astype(np.int64),
                     min_per_user, max_per_user)
    # distribute the remainder one at a time over users with headroom
    deficit = n_interactions - int(counts.sum())
    order = np.argsort(-act, kind="stable")
    i = 0
    while deficit != 0:
        uid = order[i % n_users]
        if deficit > 0 and counts[uid] < max_per_user:
            counts[uid] += 1
            deficit -= 1
        elif deficit < 0 and counts[uid] > min_per_user:
            counts[uid] -= 1
            deficit += 1
        i += 1

    user_lat = rng.normals((n_users, latent_dim))
    item_lat = rng.normals((n_items, latent_dim))
    # Zipf-like popularity offsets, shuffled over item ids
    pop = -0.9 * np.log(np.arange(1, n_items + 1, dtype=np.float64))
    pop = pop[rng.shuffled_index(n_items)]

    chosen_per_user = []
    for uid in range(n_users):
        affinity = user_lat[uid] @ item_lat.T / np.sqrt(latent_dim) + pop
        u = rng.uniforms(n_items)
        gumbel = -np.log(-np.log(np.maximum(u, 1e-300)))
        # Gumbel top-k == sampling without replacement from softmax(affinity)
        order = np.argsort(-(affinity + gumbel), kind="stable")
        chosen_per_user.append(list(order[: counts[uid]]))

    # cold-tail items may never be drawn; swap them in for the weakest picks
    # of the most active users so the catalog covers all n_items (only items
    # with another occurrence elsewhere are evicted)
    occurrences: dict[int, int] = {}
    for chosen in chosen_per_user:
        for i in chosen:
            occurrences[int(i)] = occurrences.get(int(i), 0) + 1
    missing = [i for i in range(n_items) if i not in occurrences]
    by_activity = sorted(range(n_users), key=lambda uu: -counts[uu])
    slot = 0
    for item in missing:
        placed = False
        while not placed:
            chosen = chosen_per_user[by_activity[slot % n_users]]
            slot += 1
            for k in range(len(chosen) - 1, -1, -1):
                evict = int(chosen[k])
                if occurrences[evict] >= 2:
                    occurrences[evict] -= 1
                    occurrences[item] = 1
                    chosen[k] = item
                    placed = True
                    break

    with open(path, "w", encoding="utf-8") as fh:
        for uid in range(n_users):
            # write in random order so the held-out (latest) item is not
            # systematically the user's weakest pick
            chosen = np.array(chosen_per_user[uid], dtype=np.int64)
            chosen = chosen[rng.shuffled_index(len(chosen))]
            ts_base = 800_000_000 + uid * 100_000
            for j, iid in enumerate(chosen):
                fh.write(f"{uid + 1}\t{iid + 1}\t1\t{ts_base + j}\n")
