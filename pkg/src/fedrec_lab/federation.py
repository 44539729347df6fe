"""Global federated training loop: participant sampling, local training
dispatch, optional LDP perturbation of uploads, FedAvg aggregation, and
capture of per-round upload traces for offline attacks.

Every source of randomness is a labeled stream keyed from a SeedBlock, so a
run replays bit-identically:

    global-init                 shared parameter initialization
    client-init:<uid>           private user embeddings
    neg-sample:<uid>:<round>    per-round negative sampling
    participants:<round>        participant selection
    train:<uid>:<round>         mini-batch shuffling
    ldp:<uid>:<round>           upload noise
    eval:<which>:<uid>          hit-ratio candidate lists
    shadow:<uid>[...]           attacker-side shadow models
    split[:ties:<uid>]          leave-one-out tie breaking
"""

from __future__ import annotations

import concurrent.futures
import logging
import multiprocessing
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import analysis
from .data import DatasetSplit, parse_ratio, sample_negatives
from .models import (
    ModelConfig,
    PublicParams,
    init_private,
    init_public,
    local_train,
    predict_scores,
)
from .numerics import (
    AdamState,
    RngStream,
    ShapeMismatchError,
    gaussian_noise,
    single_thread_blas,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.001
    local_epochs: int = 20
    batch_size: int = 64
    neg_ratio: str = "1:4"
    global_epochs: int = 200
    participants: int | None = None     # None -> min(|users|, 256)

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.local_epochs < 0:
            raise ValueError("hyper-parameters out of range")
        parse_ratio(self.neg_ratio)

    def resolve_participants(self, n_users: int) -> int:
        m = self.participants if self.participants is not None else min(n_users, 256)
        if not 1 <= m <= n_users:
            raise ValueError(f"participants per round {m} not in 1..{n_users}")
        return m


@dataclass(frozen=True)
class LdpConfig:
    lam: float = 0.0
    enabled: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"noise scale must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class SeedBlock:
    """One integer per random-stream family."""

    global_init: int = 11
    client_init: int = 22
    negatives: int = 33
    participants: int = 44
    ldp: int = 55
    shuffle: int = 66
    shadow: int = 77
    eval: int = 88
    split: int = 99

    @classmethod
    def from_master(cls, master: int) -> "SeedBlock":
        return cls(*(int(master) * 10 + k for k in range(1, 10)))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "global_init", "client_init", "negatives", "participants",
            "ldp", "shuffle", "shadow", "eval", "split")}


@dataclass
class UploadRecord:
    """What one client sends the server in one round: full rows for the items
    it touched plus the updated scoring-head weights (post-LDP when enabled)."""

    round: int
    user: int
    touched: np.ndarray
    item_rows: np.ndarray
    ffn_w: list
    ffn_b: list
    h: np.ndarray
    post_ldp: bool = False


@dataclass
class GlobalState:
    round: int
    public: PublicParams
    privates: dict                      # uid -> user embedding (client-held)
    adam: dict = field(default_factory=dict)  # uid -> AdamState when persisted


def sample_participants(user_ids, m: int, rng: RngStream) -> np.ndarray:
    """m distinct users drawn uniformly; deterministic under the stream."""
    users = np.asarray(sorted(user_ids), dtype=np.int64)
    if not 1 <= m <= len(users):
        raise ValueError(f"m={m} out of range 1..{len(users)}")
    return np.sort(users[rng.sample(len(users), m)])


def apply_ldp(upload: UploadRecord, cfg: LdpConfig, rng: RngStream) -> UploadRecord:
    """Add N(0, lam^2) noise to every transmitted block of an upload."""
    lam = cfg.lam
    rows = upload.item_rows + gaussian_noise(*upload.item_rows.shape, lam, rng)
    ffn_w = [w + gaussian_noise(*w.shape, lam, rng) for w in upload.ffn_w]
    ffn_b = [b + gaussian_noise(1, b.shape[0], lam, rng)[0] for b in upload.ffn_b]
    h = upload.h + gaussian_noise(1, upload.h.shape[0], lam, rng)[0]
    return replace(upload, item_rows=rows, ffn_w=ffn_w, ffn_b=ffn_b, h=h,
                   post_ldp=True)


def aggregate(uploads, public: PublicParams, mode: str = "participants") -> PublicParams:
    """FedAvg the uploads into the next global parameters.

    mode="participants" (default) is the literal average of every
    participant's full public parameter set: a client that did not touch an
    item contributes its unchanged V_t row, so a row touched by k of m
    participants moves by k/m of the mean touched-row delta. mode="touchers"
    averages each touched row over only the clients that uploaded it.
    mode="sum" keeps the un-normalized sum (diverges; kept for comparison).
    Untouched rows carry over from V_t under every mode, and the scoring
    head always averages over all participants.
    """
    ups = sorted(uploads, key=lambda u: u.user)
    if not ups:
        raise ValueError("cannot aggregate an empty upload set")
    d = public.item_emb.shape[1]
    for up in ups:
        if up.item_rows.shape != (len(up.touched), d):
            raise ShapeMismatchError(
                f"upload rows {up.item_rows.shape} inconsistent for user {up.user}"
            )
    sums = np.zeros_like(public.item_emb)
    counts = np.zeros(public.item_emb.shape[0], dtype=np.int64)
    for up in ups:
        sums[up.touched] += up.item_rows
        counts[up.touched] += 1
    new = public.copy()
    touched = counts > 0
    m = len(ups)
    if mode == "participants":
        k = counts[touched, None]
        new.item_emb[touched] = (sums[touched]
                                 + (m - k) * public.item_emb[touched]) / m
        scale = 1.0 / m
    elif mode == "touchers":
        new.item_emb[touched] = sums[touched] / counts[touched, None]
        scale = 1.0 / m
    elif mode == "sum":
        new.item_emb[touched] = sums[touched]
        scale = 1.0
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    for kk in range(len(new.ffn_w)):
        new.ffn_w[kk] = scale * np.sum([up.ffn_w[kk] for up in ups], axis=0)
        new.ffn_b[kk] = scale * np.sum([up.ffn_b[kk] for up in ups], axis=0)
    new.h = scale * np.sum([up.h for up in ups], axis=0)
    return new


@dataclass
class RoundTrace:
    round: int
    v_before: PublicParams
    uploads: list
    v_after: PublicParams


class TraceArchive:
    """Per-round upload captures, exactly as the curious server saw them."""

    def __init__(self):
        self.rounds: dict[int, RoundTrace] = {}

    def add(self, trace: RoundTrace, keep: str = "all") -> None:
        if keep == "final":
            self.rounds.clear()
        self.rounds[trace.round] = trace

    def latest(self) -> RoundTrace:
        if not self.rounds:
            raise ValueError("trace archive is empty")
        return self.rounds[max(self.rounds)]

    def save_round(self, path, rnd: int) -> None:
        save_round_trace(path, self.rounds[rnd])

    def save(self, directory) -> None:
        import os
        os.makedirs(directory, exist_ok=True)
        for rnd in sorted(self.rounds):
            self.save_round(os.path.join(directory, f"round_{rnd:05d}.npz"), rnd)


def _public_blocks(prefix: str, public: PublicParams) -> dict:
    blocks = {f"{prefix}item_emb": public.item_emb, f"{prefix}h": public.h}
    for k, (w, b) in enumerate(zip(public.ffn_w, public.ffn_b)):
        blocks[f"{prefix}ffn_w_{k}"] = w
        blocks[f"{prefix}ffn_b_{k}"] = b
    return blocks


def _public_from_blocks(prefix: str, blob) -> PublicParams:
    n_layers = 0
    while f"{prefix}ffn_w_{n_layers}" in blob:
        n_layers += 1
    return PublicParams(
        item_emb=blob[f"{prefix}item_emb"],
        ffn_w=[blob[f"{prefix}ffn_w_{k}"] for k in range(n_layers)],
        ffn_b=[blob[f"{prefix}ffn_b_{k}"] for k in range(n_layers)],
        h=blob[f"{prefix}h"],
    )


def save_round_trace(path, trace: RoundTrace) -> None:
    """Serialize one round's captures to npz; float64 blocks round-trip
    bit-exactly, which replay and attacks rely on."""
    blocks = {"round": np.int64(trace.round),
              "n_uploads": np.int64(len(trace.uploads))}
    blocks.update(_public_blocks("before_", trace.v_before))
    blocks.update(_public_blocks("after_", trace.v_after))
    for i, up in enumerate(sorted(trace.uploads, key=lambda u: u.user)):
        p = f"up{i}_"
        blocks[f"{p}user"] = np.int64(up.user)
        blocks[f"{p}touched"] = up.touched
        blocks[f"{p}rows"] = up.item_rows
        blocks[f"{p}h"] = up.h
        blocks[f"{p}post_ldp"] = np.int64(up.post_ldp)
        for k, (w, b) in enumerate(zip(up.ffn_w, up.ffn_b)):
            blocks[f"{p}ffn_w_{k}"] = w
            blocks[f"{p}ffn_b_{k}"] = b
    np.savez(path, **blocks)


def load_round_trace(path) -> RoundTrace:
    with np.load(path) as blob:
        rnd = int(blob["round"])
        uploads = []
        for i in range(int(blob["n_uploads"])):
            p = f"up{i}_"
            n_layers = 0
            while f"{p}ffn_w_{n_layers}" in blob:
                n_layers += 1
            uploads.append(UploadRecord(
                round=rnd,
                user=int(blob[f"{p}user"]),
                touched=blob[f"{p}touched"],
                item_rows=blob[f"{p}rows"],
                ffn_w=[blob[f"{p}ffn_w_{k}"] for k in range(n_layers)],
                ffn_b=[blob[f"{p}ffn_b_{k}"] for k in range(n_layers)],
                h=blob[f"{p}h"],
                post_ldp=bool(blob[f"{p}post_ldp"]),
            ))
        return RoundTrace(round=rnd,
                          v_before=_public_from_blocks("before_", blob),
                          uploads=uploads,
                          v_after=_public_from_blocks("after_", blob))


@dataclass
class TrainingRun:
    state: GlobalState
    curve: list                 # (round, train_loss, val_hit10)
    deviation: list             # (round, user deviation, item deviation)
    trace: TraceArchive
    initial_user_mat: np.ndarray
    initial_item_mat: np.ndarray
    stopped_early: bool = False


def _stack_privates(privates: dict) -> np.ndarray:
    return np.stack([privates[u] for u in sorted(privates)])


def make_score_fn(cfg: ModelConfig, state: GlobalState, split: DatasetSplit):
    """Server/evaluator view: score items for a user with the current model."""
    def score(uid, item_ids):
        graph = split.clients[uid].positives if cfg.kind == "lightgcn" else None
        return predict_scores(cfg, state.public, state.privates[uid], item_ids, graph)
    return score


def worker_count() -> int:
    """Worker-pool size; overridden by the FEDREC_LAB_WORKERS environment
    variable (default 1 = in-process sequential)."""
    try:
        return max(1, int(os.environ.get("FEDREC_LAB_WORKERS", "1")))
    except ValueError:
        return 1


def _train_chunk(args):
    """Worker task: run local training for a chunk of clients against one
    V_t snapshot. Pure function of its arguments, so results are identical
    whichever process runs it."""
    (cfg, hyper, seeds, t, mu, penalty_scope, public, catalog, clients,
     privates) = args
    out = []
    for uid in sorted(clients):
        client = clients[uid]
        sample_negatives(client, catalog, hyper.neg_ratio,
                         RngStream(seeds.negatives, f"neg-sample:{uid}:{t}"))
        result = local_train(
            client, public, privates[uid], hyper, cfg,
            RngStream(seeds.shuffle, f"train:{uid}:{t}"),
            mu=mu, penalty_scope=penalty_scope,
        )
        out.append((uid, client.negatives, result))
    return out


def run_round(state: GlobalState, split: DatasetSplit, hyper: TrainHyper,
              cfg: ModelConfig, seeds: SeedBlock, ldp: LdpConfig | None = None,
              mu: float = 0.0, penalty_scope: str = "public",
              persist_adam: bool = False, aggregate_mode: str = "participants",
              executor=None):
    """One global round: sample participants, run local training on each,
    apply LDP if enabled, aggregate. Returns (uploads, per-sample loss).

    With an executor, client chunks train in parallel worker processes; the
    result is bit-identical to the sequential path because each client's
    training depends only on (V_t, its own labeled streams) and aggregation
    canonicalizes upload order.
    """
    t = state.round
    ldp = ldp or LdpConfig()
    m = hyper.resolve_participants(len(split.clients))
    chosen = sample_participants(split.user_ids(), m,
                                 RngStream(seeds.participants, f"participants:{t}"))
    results = []
    if executor is None:
        for uid in chosen:
            client = split.clients[uid]
            sample_negatives(client, split.catalog, hyper.neg_ratio,
                             RngStream(seeds.negatives, f"neg-sample:{uid}:{t}"))
            adam_state = None
            if persist_adam:
                adam_state = state.adam.get(uid)
                if adam_state is None:
                    # catalog-wide item moments so every row's optimizer
                    # history survives the changing per-round touched sets
                    adam_state = AdamState()
                    adam_state.m["items"] = np.zeros_like(state.public.item_emb)
                    adam_state.v["items"] = np.zeros_like(state.public.item_emb)
            result = local_train(
                client, state.public, state.privates[uid], hyper, cfg,
                RngStream(seeds.shuffle, f"train:{uid}:{t}"),
                mu=mu, penalty_scope=penalty_scope, adam=adam_state,
            )
            results.append((uid, client.negatives, result))
    else:
        if persist_adam:
            raise ValueError("persist_adam is not supported with a worker pool")
        chunks = [c for c in np.array_split(chosen, executor._max_workers)
                  if len(c)]
        futures = [executor.submit(_train_chunk, (
            cfg, hyper, seeds, t, mu, penalty_scope, state.public,
            split.catalog, {int(u): split.clients[u].copy() for u in chunk},
            {int(u): state.privates[u] for u in chunk})) for chunk in chunks]
        for fut in futures:
            results.extend(fut.result())
        results.sort(key=lambda r: r[0])

    uploads = []
    loss_total = 0.0
    samples_total = 0
    for uid, negatives, result in results:
        split.clients[uid].negatives = negatives
        state.privates[uid] = result.private
        if persist_adam:
            state.adam[uid] = result.adam
        upload = UploadRecord(round=t, user=uid, touched=result.touched,
                              item_rows=result.item_rows, ffn_w=result.ffn_w,
                              ffn_b=result.ffn_b, h=result.h)
        if ldp.enabled:
            upload = apply_ldp(upload, ldp, RngStream(seeds.ldp, f"ldp:{uid}:{t}"))
        uploads.append(upload)
        loss_total += result.final_loss
        samples_total += result.n_samples
    state.public = aggregate(uploads, state.public, mode=aggregate_mode)
    state.round += 1
    return uploads, loss_total / max(samples_total, 1)


def run_training(split: DatasetSplit, cfg: ModelConfig, hyper: TrainHyper,
                 seeds: SeedBlock, ldp: LdpConfig | None = None, mu: float = 0.0,
                 penalty_scope: str = "public", archive: str = "final",
                 patience: int | None = None, persist_adam: bool = False,
                 aggregate_mode: str = "participants", eval_negatives: int = 99,
                 progress: bool = False) -> TrainingRun:
    """Run up to hyper.global_epochs rounds, tracking the loss curve, the
    validation hit ratio, embedding drift, and (per `archive`: "none",
    "final", or "all") the per-round upload traces."""
    with single_thread_blas():
        return _run_training(split, cfg, hyper, seeds, ldp, mu, penalty_scope,
                             archive, patience, persist_adam, aggregate_mode,
                             eval_negatives, progress)


def _run_training(split, cfg, hyper, seeds, ldp, mu, penalty_scope, archive,
                  patience, persist_adam, aggregate_mode, eval_negatives,
                  progress) -> TrainingRun:
    public = init_public(cfg, split.catalog.n_items,
                         RngStream(seeds.global_init, "global-init"))
    privates = {uid: init_private(cfg, RngStream(seeds.client_init, f"client-init:{uid}"))
                for uid in split.user_ids()}
    state = GlobalState(round=0, public=public, privates=privates)
    u0 = _stack_privates(privates)
    v0 = public.item_emb.copy()

    executor = None
    workers = worker_count()
    if workers > 1 and not persist_adam:
        try:
            executor = concurrent.futures.ProcessPoolExecutor(
                max_workers=workers,
                mp_context=multiprocessing.get_context("fork"))
        except ValueError:  # platform without fork: stay sequential
            executor = None

    trace = TraceArchive()
    curve = []
    deviation = [(0, 0.0, 0.0)]
    try:
        _training_rounds(split, cfg, hyper, seeds, ldp, mu, penalty_scope,
                         archive, patience, persist_adam, aggregate_mode,
                         eval_negatives, progress, state, trace, curve,
                         deviation, executor, u0, v0)
    finally:
        if executor is not None:
            executor.shutdown()
    stopped = bool(curve) and len(curve) < hyper.global_epochs
    return TrainingRun(state=state, curve=curve, deviation=deviation, trace=trace,
                       initial_user_mat=u0, initial_item_mat=v0,
                       stopped_early=stopped)


def _training_rounds(split, cfg, hyper, seeds, ldp, mu, penalty_scope, archive,
                     patience, persist_adam, aggregate_mode, eval_negatives,
                     progress, state, trace, curve, deviation, executor, u0, v0):
    best_val = -1.0
    stale = 0
    for t in range(hyper.global_epochs):
        v_before = state.public.copy()
        uploads, train_loss = run_round(
            state, split, hyper, cfg, seeds, ldp=ldp, mu=mu,
            penalty_scope=penalty_scope, persist_adam=persist_adam,
            aggregate_mode=aggregate_mode, executor=executor,
        )
        if archive != "none":
            trace.add(RoundTrace(round=t, v_before=v_before, uploads=uploads,
                                 v_after=state.public.copy()), keep=archive)
        val = analysis.hit_at_k(make_score_fn(cfg, state, split), split,
                                k=10, n_candidates=eval_negatives,
                                eval_seed=seeds.eval, which="val")
        curve.append((t, train_loss, val.mean))
        deviation.append((
            t + 1,
            analysis.embedding_deviation(_stack_privates(state.privates), u0),
            analysis.embedding_deviation(state.public.item_emb, v0),
        ))
        if progress:
            log.info("round %d: loss %.5f val-hit@10 %.4f", t, train_loss, val.mean)
        if val.mean > best_val + 1e-12:
            best_val = val.mean
            stale = 0
        else:
            stale += 1
            if patience is not None and stale >= patience:
                break


def replay_aggregate(trace: RoundTrace, mode: str = "participants") -> PublicParams:
    """Recompute V_{t+1} from a round's archived uploads and V_t; must equal
    the archived V_after bit-exactly."""
    return aggregate(trace.uploads, trace.v_before, mode=mode)
