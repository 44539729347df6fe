"""Server-side inference attacks against archived upload traces.

The interaction-membership attacker iterates: guess labels for the client's
touched items, train a shadow model from the same public starting point,
and lock in the guesses whose item embeddings land closest to the client's
actual upload. Random, 2-means, and popularity-informed variants serve as
baselines and priors. Attacks read only server-visible inputs: the upload,
the global parameters it started from, and the broadcast hyper-parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import ClientDataset, DatasetSplit, positive_fraction, sample_negatives
from .federation import TrainHyper, UploadRecord
from .models import ModelConfig, PublicParams, init_private, init_public, train_on_items
from .numerics import RngStream, single_thread_blas


@dataclass(frozen=True)
class AttackConfig:
    gamma: float = 0.2              # fraction of touched items fixed per iteration
    eta: str = "1:4"                # broadcast negative-sampling ratio
    max_iterations: int = 50
    shadow_epochs: int = 20         # mirrors the protocol's local epochs
    popularity_boost: float = 3.0   # weight for known-popular items in step (a)

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class ShadowRun:
    iteration: int
    assignment: np.ndarray          # guessed 0/1 label per touched item
    distances: np.ndarray           # shadow-vs-upload row distance per item
    fixed_positives: int
    fixed_negatives: int


@dataclass
class AttackResult:
    user: int
    predicted_pos: np.ndarray
    predicted_neg: np.ndarray
    iterations: int
    per_iteration: list             # ShadowRun records
    complete: bool                  # quota reached before the iteration cap


@dataclass
class FlipTrial:
    user: int
    item: int
    true_label: int
    flipped_label: int
    dist_same: float                # d' : same data, different private init
    dist_flipped: float             # d'': flipped rating for the item
    inferred: int
    correct: bool
    tied: bool


def touched_items(upload: UploadRecord, v_t: PublicParams,
                  view: str = "transmitted") -> np.ndarray:
    """Items a client updated in a round.

    The transmitted row list is authoritative; view="delta" instead
    reconstructs the set as rows that differ from V_t (empty for a no-op
    upload, so only useful as a cross-check).
    """
    if view == "transmitted":
        return upload.touched.copy()
    if view == "delta":
        diff = np.any(upload.item_rows != v_t.item_emb[upload.touched], axis=1)
        return upload.touched[diff]
    raise ValueError(f"unknown view {view!r}")


def train_shadow(fake_labels: np.ndarray, touched: np.ndarray, v_t: PublicParams,
                 model_cfg: ModelConfig, hyper: TrainHyper, shadow_epochs: int,
                 rng: RngStream) -> np.ndarray:
    """Train one shadow model on guessed labels and return its item rows.

    Public init is V_t (restricted to the touched rows plus the scoring
    head); the private embedding is a fresh draw. Zero epochs returns the
    V_t rows unchanged.
    """
    shadow_hyper = replace(hyper, local_epochs=shadow_epochs)
    private = init_private(model_cfg, rng.child("private"))
    graph = touched[fake_labels > 0.5] if model_cfg.kind == "lightgcn" else None
    with single_thread_blas():
        result = train_on_items(touched, np.asarray(fake_labels, dtype=np.float64),
                                v_t, private, shadow_hyper, model_cfg,
                                rng.child("batches"), graph_items=graph)
    return result.item_rows


def _assign_unfixed(touched_unfixed: np.ndarray, p: float, rng: RngStream,
                    popular: np.ndarray | None, boost: float) -> np.ndarray:
    """Guess labels for the still-unfixed items at positive fraction p."""
    n = len(touched_unfixed)
    if popular is not None:
        return popularity_informed_assign(touched_unfixed, p, popular, boost, rng)
    labels = np.zeros(n, dtype=np.float64)
    quota = min(math.ceil(p * n), n)
    if quota:
        labels[rng.sample(n, quota)] = 1.0
    return labels


def imia_attack(upload: UploadRecord, v_t: PublicParams, cfg: AttackConfig,
                model_cfg: ModelConfig, hyper: TrainHyper, rng: RngStream,
                popular_items: np.ndarray | None = None) -> AttackResult:
    """Infer the client's interacted items from one archived upload.

    Each iteration (a) randomly labels the unfixed touched items at the
    broadcast positive fraction, (b) trains a shadow model from V_t with a
    fresh private embedding, (c) measures per-item distance between shadow
    and uploaded rows, and (d) fixes the unfixed items with the smallest
    distances at their guessed labels, closest first, until gamma*|touched|
    fixes or the positive quota ceil(p*|touched|) is reached. Unmet quota at
    the iteration cap is topped up from the final assignment by distance and
    the result is flagged incomplete.
    """
    touched = np.asarray(upload.touched, dtype=np.int64)
    n = len(touched)
    if n == 0:
        raise ValueError("upload touches no items")
    p = positive_fraction(cfg.eta)
    quota = math.ceil(p * n)
    fix_per_iter = max(1, int(cfg.gamma * n))
    fixed = np.full(n, -1, dtype=np.int64)   # -1 unfixed, else the fixed label
    runs = []
    assignment = np.zeros(n)
    dists = np.zeros(n)
    complete = False
    iterations = 0
    for it in range(1, cfg.max_iterations + 1):
        unfixed = np.flatnonzero(fixed < 0)
        if len(unfixed) == 0:
            break
        iterations = it
        assignment = np.where(fixed >= 0, fixed.astype(np.float64), 0.0)
        assignment[unfixed] = _assign_unfixed(
            touched[unfixed], p, rng.child(f"assign:{it}"),
            popular_items, cfg.popularity_boost)
        shadow_rows = train_shadow(assignment, touched, v_t, model_cfg, hyper,
                                   cfg.shadow_epochs, rng.child(f"iter:{it}"))
        dists = np.sqrt(np.sum((shadow_rows - upload.item_rows) ** 2, axis=1))
        order = unfixed[np.lexsort((touched[unfixed], dists[unfixed]))]
        newly_pos = 0
        newly_neg = 0
        for local in order[:fix_per_iter]:
            fixed[local] = int(assignment[local])
            if fixed[local] == 1:
                newly_pos += 1
                if (fixed == 1).sum() >= quota:
                    break
            else:
                newly_neg += 1
        runs.append(ShadowRun(iteration=it, assignment=assignment.copy(),
                              distances=dists.copy(),
                              fixed_positives=int((fixed == 1).sum()),
                              fixed_negatives=int((fixed == 0).sum())))
        if (fixed == 1).sum() >= quota:
            complete = True
            break

    pos_mask = fixed == 1
    if pos_mask.sum() < quota:
        # quota unreached (iteration cap, or everything fixed first): top up
        # from the final assignment. Small distance confirms the guessed
        # label, so rank guessed-positives by ascending distance and then
        # guessed-negatives by descending distance (a negative guess that
        # landed far from the upload was probably wrong).
        need = quota - int(pos_mask.sum())
        candidates = np.flatnonzero(~pos_mask)
        signed = np.where(assignment[candidates] > 0.5,
                          dists[candidates], -dists[candidates])
        rank = np.lexsort((touched[candidates], signed,
                           -assignment[candidates]))
        pos_mask[candidates[rank[:need]]] = True
    predicted_pos = np.sort(touched[pos_mask])
    predicted_neg = np.sort(touched[~pos_mask])
    return AttackResult(user=upload.user, predicted_pos=predicted_pos,
                        predicted_neg=predicted_neg, iterations=iterations,
                        per_iteration=runs, complete=complete)


def random_attack(touched: np.ndarray, p: float, rng: RngStream) -> np.ndarray:
    """Baseline: ceil(p * |touched|) items drawn uniformly."""
    if not 0 < p <= 1:
        raise ValueError(f"positive fraction must be in (0, 1], got {p}")
    touched = np.asarray(touched, dtype=np.int64)
    k = math.ceil(p * len(touched))
    return np.sort(touched[rng.sample(len(touched), k)])


def kmeans_attack(rows: np.ndarray, touched: np.ndarray, rng: RngStream,
                  max_iter: int = 100, tol: float = 1e-6):
    """Baseline: 2-means on the uploaded rows; predicts the cluster with the
    lower within-cluster sum of squared errors (ties and degenerate inputs
    fall to the cluster holding the lowest item id).

    Returns (predicted item ids, degenerate flag).
    """
    touched = np.asarray(touched, dtype=np.int64)
    n = len(touched)
    if n < 2:
        raise ValueError("2-means needs at least two touched items")
    spread = np.ptp(rows, axis=0).max() if n else 0.0
    if spread == 0.0:
        lowest = int(np.argmin(touched))
        return touched[lowest:lowest + 1].copy(), True

    # k-means++ seeding
    first = rng.integers(n)
    d2 = np.sum((rows - rows[first]) ** 2, axis=1)
    weights = d2 / d2.sum()
    second = int(np.searchsorted(np.cumsum(weights), rng.uniforms(1)[0], side="right"))
    second = min(second, n - 1)
    centroids = np.stack([rows[first], rows[second]])

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist0 = np.sum((rows - centroids[0]) ** 2, axis=1)
        dist1 = np.sum((rows - centroids[1]) ** 2, axis=1)
        assign = (dist1 < dist0).astype(np.int64)
        if assign.min() == assign.max():  # one cluster emptied: split off the
            far = int(np.argmax(np.where(assign == 0, dist0, dist1)))
            assign[far] = 1 - assign[far]
        new = np.stack([rows[assign == c].mean(axis=0) for c in (0, 1)])
        shift = max(float(np.sqrt(np.sum((new[c] - centroids[c]) ** 2))) for c in (0, 1))
        centroids = new
        if shift < tol:
            break
    sse = [float(np.sum((rows[assign == c] - centroids[c]) ** 2)) for c in (0, 1)]
    if sse[0] == sse[1]:
        winner = int(assign[np.argmin(touched)])
    else:
        winner = int(np.argmin(sse))
    return np.sort(touched[assign == winner]), False


def popularity_informed_assign(touched: np.ndarray, p: float, popular: np.ndarray,
                               boost: float, rng: RngStream) -> np.ndarray:
    """Label assignment over `touched` with ceil(p * |touched|) positives,
    sampled without replacement with weight `boost` for known-popular items
    and weight 1 otherwise. boost=1 reduces to the uniform assignment."""
    touched = np.asarray(touched, dtype=np.int64)
    n = len(touched)
    quota = min(math.ceil(p * n), n)
    weights = np.where(np.isin(touched, popular), float(boost), 1.0)
    labels = np.zeros(n, dtype=np.float64)
    if quota:
        labels[rng.weighted_sample(weights, quota)] = 1.0
    return labels


def _flip_trial_core(items: np.ndarray, labels: np.ndarray, flip_local: int,
                     public: PublicParams, inits: tuple, model_cfg: ModelConfig,
                     hyper: TrainHyper, rng: RngStream):
    """Train the reference/replay/flipped models from one public init and
    return their rows for the flipped item."""
    flipped = labels.copy()
    flipped[flip_local] = 1.0 - flipped[flip_local]
    rows = []
    with single_thread_blas():
        for labs, init_u in zip((labels, labels, flipped), inits):
            graph = items[labs > 0.5] if model_cfg.kind == "lightgcn" else None
            # identical batch-order stream for all three models: the only
            # controlled differences are the private init and the flip
            res = train_on_items(items, labs, public, init_u, hyper, model_cfg,
                                 rng.child("batches"), graph_items=graph)
            rows.append(res.item_rows[flip_local])
    return rows


def flip_inference_trial(client: ClientDataset, split: DatasetSplit,
                         model_cfg: ModelConfig, hyper: TrainHyper,
                         rng: RngStream) -> FlipTrial:
    """Proof-of-concept trial: flip one random item's rating, retrain from a
    shared public init with fresh private inits, and infer the true rating
    by comparing the item's embedding distances.

    Model M trains on the true labels, M' on the true labels with a
    different private init, M'' on the flipped labels. The true rating is
    inferred as the opposite of the flipped rating iff
    dist(v, v') < dist(v, v''); an exact tie counts as the replay model
    winning and is flagged.
    """
    trial_client = client.copy()
    sample_negatives(trial_client, split.catalog, hyper.neg_ratio,
                     rng.child("negatives"))
    items = np.union1d(trial_client.positives, trial_client.negatives)
    labels = np.isin(items, trial_client.positives).astype(np.float64)
    flip_local = rng.child("pick").integers(len(items))
    public = init_public(model_cfg, split.catalog.n_items, rng.child("public"))
    inits = tuple(init_private(model_cfg, rng.child(f"private:{k}")) for k in range(3))
    v, v_same, v_flip = _flip_trial_core(items, labels, flip_local, public,
                                         inits, model_cfg, hyper, rng)
    d_same = float(np.sqrt(np.sum((v - v_same) ** 2)))
    d_flip = float(np.sqrt(np.sum((v - v_flip) ** 2)))
    true_label = int(labels[flip_local])
    flipped_label = 1 - true_label
    tied = d_same == d_flip
    inferred = (1 - flipped_label) if d_same <= d_flip else flipped_label
    return FlipTrial(user=client.user, item=int(items[flip_local]),
                     true_label=true_label, flipped_label=flipped_label,
                     dist_same=d_same, dist_flipped=d_flip, inferred=inferred,
                     correct=inferred == true_label, tied=tied)
