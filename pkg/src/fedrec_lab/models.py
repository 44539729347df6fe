"""Local recommender models: NCF and LightGCN scoring, analytic gradients,
the pointwise recommendation loss, the proximal-constraint variant, and
local training.

Both architectures share the same scoring head sigmoid(h . FFN([u, v])); they
differ in how the final user/item embeddings are produced. All gradients are
hand-derived and validated against central differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .numerics import AdamState, NonFiniteError, RngStream, ShapeMismatchError, adam_step

INIT_STD = 0.01  # Normal(0, 0.01^2) for all embeddings and weights
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "ncf"                       # "ncf" | "lightgcn"
    embed_dim: int = 64
    ffn_dims: tuple = (128, 64, 32)
    gcn_layers: int = 3                     # propagation depth, lightgcn only

    def __post_init__(self):
        if self.kind not in ("ncf", "lightgcn"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "lightgcn" and self.gcn_layers < 1:
            raise ValueError("lightgcn needs at least one propagation layer")


@dataclass
class PublicParams:
    """Shared model state: item embedding table plus the scoring head."""

    item_emb: np.ndarray            # (n_items, d)
    ffn_w: list                     # W_k of shape (in_k, out_k)
    ffn_b: list
    h: np.ndarray                   # (ffn_dims[-1],)

    def copy(self) -> "PublicParams":
        return PublicParams(
            item_emb=self.item_emb.copy(),
            ffn_w=[w.copy() for w in self.ffn_w],
            ffn_b=[b.copy() for b in self.ffn_b],
            h=self.h.copy(),
        )

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0]


@dataclass
class LocalGraph:
    """A client's bipartite neighborhood: its user node linked to its
    training items. Item nodes have local degree 1; the user degree is the
    number of linked items."""

    items: np.ndarray

    @property
    def user_degree(self) -> int:
        return len(self.items)


def init_public(cfg: ModelConfig, n_items: int, rng: RngStream) -> PublicParams:
    d = cfg.embed_dim
    dims = (2 * d,) + tuple(cfg.ffn_dims)
    ffn_w = []
    ffn_b = []
    for k in range(len(cfg.ffn_dims)):
        ffn_w.append(rng.normals((dims[k], dims[k + 1]), INIT_STD))
        ffn_b.append(rng.normals(dims[k + 1], INIT_STD))
    return PublicParams(
        item_emb=rng.normals((n_items, d), INIT_STD),
        ffn_w=ffn_w,
        ffn_b=ffn_b,
        h=rng.normals(cfg.ffn_dims[-1], INIT_STD),
    )


def init_private(cfg: ModelConfig, rng: RngStream) -> np.ndarray:
    return rng.normals(cfg.embed_dim, INIT_STD)


# --------------------------------------------------------------------------
# flat FFN parameter block: one contiguous array so Adam touches one buffer
# --------------------------------------------------------------------------

def _ffn_layout(cfg: ModelConfig):
    d = cfg.embed_dim
    dims = (2 * d,) + tuple(cfg.ffn_dims)
    layout = []
    offset = 0
    for k in range(len(cfg.ffn_dims)):
        layout.append(("w", k, (dims[k], dims[k + 1]), offset))
        offset += dims[k] * dims[k + 1]
        layout.append(("b", k, (dims[k + 1],), offset))
        offset += dims[k + 1]
    layout.append(("h", -1, (cfg.ffn_dims[-1],), offset))
    offset += cfg.ffn_dims[-1]
    return layout, offset


class FfnBlock:
    """Flat float64 buffer with named views for the FFN weights and h."""

    def __init__(self, cfg: ModelConfig, flat: np.ndarray | None = None):
        self.layout, self.size = _ffn_layout(cfg)
        self.flat = np.zeros(self.size) if flat is None else flat
        self.w: list = [None] * len(cfg.ffn_dims)
        self.b: list = [None] * len(cfg.ffn_dims)
        self.h: np.ndarray = None
        for kind, k, shape, off in self.layout:
            view = self.flat[off:off + int(np.prod(shape))].reshape(shape)
            if kind == "w":
                self.w[k] = view
            elif kind == "b":
                self.b[k] = view
            else:
                self.h = view

    @classmethod
    def pack(cls, cfg: ModelConfig, public: PublicParams) -> "FfnBlock":
        block = cls(cfg)
        for k in range(len(public.ffn_w)):
            block.w[k][...] = public.ffn_w[k]
            block.b[k][...] = public.ffn_b[k]
        block.h[...] = public.h
        return block

    def unpack(self):
        return ([w.copy() for w in self.w], [b.copy() for b in self.b], self.h.copy())


# --------------------------------------------------------------------------
# scoring head: p = sigmoid(h . FFN([u, v])), ReLU hidden activations
# --------------------------------------------------------------------------

def _head_forward(x: np.ndarray, ffn: FfnBlock):
    acts = [x]
    a = x
    for w, b in zip(ffn.w, ffn.b):
        a = np.maximum(a @ w + b, 0.0)
        acts.append(a)
    logit = a @ ffn.h
    probs = 1.0 / (1.0 + np.exp(-logit))
    return probs, (acts, logit)


def _head_backward(cache, dlogit: np.ndarray, ffn: FfnBlock, dffn: FfnBlock):
    """Writes the FFN/h gradients into dffn (assumed zeroed) and returns the
    gradient w.r.t. the concatenated [u, v] input."""
    acts, _ = cache
    np.matmul(acts[-1].T, dlogit, out=dffn.h)
    da = dlogit[:, None] * ffn.h[None, :]
    for k in range(len(ffn.w) - 1, -1, -1):
        da *= acts[k + 1] > 0.0  # ReLU mask: acts > 0 iff pre-activation > 0
        np.matmul(acts[k].T, da, out=dffn.w[k])
        np.sum(da, axis=0, out=dffn.b[k])
        da = da @ ffn.w[k].T
    return da


# --------------------------------------------------------------------------
# LightGCN propagation on the client's star-shaped local graph
# --------------------------------------------------------------------------

def lightgcn_coeffs(n_graph_items: int, layers: int):
    """Closed-form layer-sum coefficients for a star graph.

    With the user linked to n items (item degree 1, symmetric normalization
    1/sqrt(|N_u| |N_v|)), every propagated embedding is linear in the layer-0
    embeddings. Returns (A, B, C, D) such that, writing S0 for the sum of the
    linked items' base embeddings,

        u_final            = A * u0 + B * S0
        v_final (linked)   = C * u0 + D * S0 + v0
        v_final (unlinked) = v0
    """
    if n_graph_items == 0:
        return 1.0, 0.0, 0.0, 0.0
    n = float(n_graph_items)
    c = 1.0 / np.sqrt(n)
    alpha, beta = 1.0, 0.0      # u^l  = alpha*u0 + beta*S0
    gamma, delta, eps = 0.0, 0.0, 1.0   # v^l = gamma*u0 + delta*S0 + eps*v0
    total = [1.0, 0.0, 0.0, 0.0]
    for _ in range(layers):
        alpha, beta, gamma, delta, eps = (
            c * n * gamma,
            c * (n * delta + eps),
            c * alpha,
            c * beta,
            0.0,
        )
        total[0] += alpha
        total[1] += beta
        total[2] += gamma
        total[3] += delta
    return tuple(total)


def lightgcn_embed(cfg: ModelConfig, public: PublicParams, private: np.ndarray,
                   graph: LocalGraph, layers: int | None = None):
    """Final (user, item-table) embeddings after summing propagation layers
    0..L on the client's local graph. Items outside the graph keep their base
    embeddings (their propagated terms are zero)."""
    L = cfg.gcn_layers if layers is None else layers
    a, b, c, d = lightgcn_coeffs(len(graph.items), L)
    s0 = public.item_emb[graph.items].sum(axis=0) if len(graph.items) else 0.0
    u_fin = a * private + b * s0
    v_fin = public.item_emb.copy()
    if len(graph.items):
        v_fin[graph.items] += c * private + d * s0
    return u_fin, v_fin


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

class ClampCounter:
    """Counts probability clamps applied inside rec_loss."""

    def __init__(self):
        self.count = 0


def rec_loss(scores, labels, counter: ClampCounter | None = None) -> float:
    """Pointwise cross-entropy summed over the batch:
    -sum(r log p + (1 - r) log(1 - p)). Scores at 0 or 1 are clamped."""
    p = np.asarray(scores, dtype=np.float64)
    r = np.asarray(labels, dtype=np.float64)
    if p.shape != r.shape:
        raise ShapeMismatchError(f"scores {p.shape} vs labels {r.shape}")
    clamped = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if counter is not None:
        counter.count += int(np.sum((p < PROB_CLAMP) | (p > 1.0 - PROB_CLAMP)))
    return float(-(r * np.log(clamped) + (1.0 - r) * np.log(1.0 - clamped)).sum())


def public_sq_diff(local: PublicParams, reference: PublicParams,
                   scope: str = "public") -> float:
    """Squared Frobenius distance between two public parameter sets.

    scope="public" covers item embeddings, FFN weights/biases, and h;
    scope="items" restricts to the item-embedding block.
    """
    if local.item_emb.shape != reference.item_emb.shape:
        raise ShapeMismatchError(
            f"item blocks {local.item_emb.shape} vs {reference.item_emb.shape}"
        )
    total = float(np.sum((local.item_emb - reference.item_emb) ** 2))
    if scope == "public":
        for wl, wg in zip(local.ffn_w, reference.ffn_w):
            if wl.shape != wg.shape:
                raise ShapeMismatchError(f"ffn blocks {wl.shape} vs {wg.shape}")
            total += float(np.sum((wl - wg) ** 2))
        for bl, bg in zip(local.ffn_b, reference.ffn_b):
            total += float(np.sum((bl - bg) ** 2))
        total += float(np.sum((local.h - reference.h) ** 2))
    elif scope != "items":
        raise ValueError(f"unknown penalty scope {scope!r}")
    return total


def defended_loss(rec_loss_value: float, local: PublicParams,
                  reference: PublicParams, mu: float,
                  scope: str = "public") -> float:
    """Recommendation loss plus mu * ||V_local - V_global||^2 (squared
    Frobenius over the public block; gradient contribution 2 mu (V_l - V_g))."""
    if mu < 0:
        raise ValueError(f"constraint scale must be >= 0, got {mu}")
    return rec_loss_value + mu * public_sq_diff(local, reference, scope)


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------

def predict_scores(cfg: ModelConfig, public: PublicParams, private: np.ndarray,
                   item_ids, graph_items=None) -> np.ndarray:
    """Predicted preference probabilities for the given items."""
    item_ids = np.asarray(item_ids, dtype=np.int64)
    if item_ids.size and (item_ids.min() < 0 or item_ids.max() >= public.n_items):
        raise IndexError(f"item id out of range 0..{public.n_items - 1}")
    d = cfg.embed_dim
    ffn = FfnBlock.pack(cfg, public)
    if cfg.kind == "lightgcn":
        graph = np.asarray([] if graph_items is None else graph_items, dtype=np.int64)
        a, b, c, dd = lightgcn_coeffs(len(graph), cfg.gcn_layers)
        s0 = public.item_emb[graph].sum(axis=0) if len(graph) else np.zeros(d)
        u_fin = a * private + b * s0
        v_fin = public.item_emb[item_ids].copy()
        in_graph = np.isin(item_ids, graph)
        v_fin[in_graph] += c * private + dd * s0
    else:
        u_fin = private
        v_fin = public.item_emb[item_ids]
    x = np.empty((len(item_ids), 2 * d))
    x[:, :d] = u_fin
    x[:, d:] = v_fin
    probs, _ = _head_forward(x, ffn)
    return probs


def ncf_score(public: PublicParams, private: np.ndarray, item: int,
              cfg: ModelConfig | None = None) -> float:
    """sigma(h . FFN([u, v_item])) for a single item."""
    cfg = cfg or ModelConfig(kind="ncf", embed_dim=len(private),
                             ffn_dims=tuple(w.shape[1] for w in public.ffn_w))
    return float(predict_scores(cfg, public, private, [int(item)])[0])


def score_topk(cfg: ModelConfig, public: PublicParams, private: np.ndarray,
               candidates, k: int, graph_items=None):
    """Candidates ranked by descending score (ties to the lower item id);
    returns (top-k ids, truncated flag)."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise ValueError("candidate list is empty")
    scores = predict_scores(cfg, public, private, candidates, graph_items)
    order = np.lexsort((candidates, -scores))
    flagged = k > len(candidates)
    return candidates[order][:k], flagged


# --------------------------------------------------------------------------
# local training
# --------------------------------------------------------------------------

@dataclass
class LocalTrainResult:
    private: np.ndarray
    touched: np.ndarray             # sorted global item ids
    item_rows: np.ndarray           # (len(touched), d) post-training
    ffn_w: list
    ffn_b: list
    h: np.ndarray
    adam: AdamState
    final_loss: float               # last-epoch objective (sum form)
    n_samples: int
    clamps: int = 0


def _batch_grads(cfg, u0, rows, ffn, batch_locals, batch_labels, graph_locals,
                 coeffs, d_rows, dffn, counter):
    """Forward + backward for one mini-batch.

    Accumulates FFN gradients into dffn and item-row gradients into d_rows
    (callers zero them), returns (cross-entropy loss, du0).
    """
    d = cfg.embed_dim
    bsz = len(batch_locals)
    v0 = rows[batch_locals]
    if coeffs is None:
        u_fin = u0
        v_fin = v0
        in_graph = None
    else:
        a, b, c, dd = coeffs
        s0 = rows[graph_locals].sum(axis=0) if len(graph_locals) else np.zeros(d)
        u_fin = a * u0 + b * s0
        v_fin = v0.copy()
        in_graph = np.isin(batch_locals, graph_locals)
        v_fin[in_graph] += c * u0 + dd * s0
    x = np.empty((bsz, 2 * d))
    x[:, :d] = u_fin
    x[:, d:] = v_fin
    probs, cache = _head_forward(x, ffn)
    loss = rec_loss(probs, batch_labels, counter)
    dlogit = probs - batch_labels
    dx = _head_backward(cache, dlogit, ffn, dffn)
    du_fin = dx[:, :d].sum(axis=0)
    dv_fin = dx[:, d:]
    if coeffs is None:
        du0 = du_fin
        d_rows[batch_locals] = dv_fin
    else:
        a, b, c, dd = coeffs
        graph_pull = dv_fin[in_graph].sum(axis=0) if in_graph.any() else np.zeros(d)
        du0 = a * du_fin + c * graph_pull
        ds0 = b * du_fin + dd * graph_pull
        d_rows[batch_locals] = dv_fin
        if len(graph_locals):
            d_rows[graph_locals] += ds0
    return loss, du0


def local_train(client, public: PublicParams, private: np.ndarray, hyper, cfg: ModelConfig,
                rng: RngStream, mu: float = 0.0, penalty_scope: str = "public",
                adam: AdamState | None = None) -> LocalTrainResult:
    """Train the client's local model for hyper.local_epochs mini-batch epochs
    on positives + current negatives; returns the updated private embedding and
    the public rows/weights it touched.

    mu > 0 adds the proximal penalty mu * ||V_local - V_global||^2 to every
    mini-batch objective (reference = the round-start public parameters).
    Only rows of positives + negatives are ever written.
    """
    touched = np.union1d(client.positives, client.negatives).astype(np.int64)
    labels = np.isin(touched, client.positives).astype(np.float64)
    graph_items = client.positives if cfg.kind == "lightgcn" else None
    return train_on_items(
        touched, labels, public, private, hyper, cfg, rng,
        graph_items=graph_items, mu=mu, penalty_scope=penalty_scope, adam=adam,
    )


def train_on_items(touched: np.ndarray, labels: np.ndarray, public: PublicParams,
                   private: np.ndarray, hyper, cfg: ModelConfig, rng: RngStream,
                   graph_items=None, mu: float = 0.0, penalty_scope: str = "public",
                   adam: AdamState | None = None) -> LocalTrainResult:
    """Mini-batch Adam training restricted to the given item rows.

    `touched` must be sorted unique global item ids with one 0/1 label each;
    for LightGCN, `graph_items` lists the ids treated as interaction edges.
    """
    n = len(touched)
    rows = public.item_emb[touched].copy()
    rows0 = rows.copy() if mu > 0 else None
    ffn = FfnBlock.pack(cfg, public)
    flat0 = ffn.flat.copy() if (mu > 0 and penalty_scope == "public") else None
    u = private.copy()
    adam = adam or AdamState()
    # persisted states carry item moments for the whole catalog; gather the
    # touched rows' moments for this round and scatter them back afterwards
    full_m = adam.m.get("items")
    persistent_items = full_m is not None and full_m.shape[0] == public.n_items
    if persistent_items:
        adam.m["items"] = full_m[touched].copy()
        adam.v["items"], full_v = adam.v["items"][touched].copy(), adam.v["items"]
    elif "items" in adam.m and adam.m["items"].shape[0] != n:
        # compact moments from a differently-sized round cannot carry over
        adam.m.pop("items")
        adam.v.pop("items")
    counter = ClampCounter()

    coeffs = None
    graph_locals = np.empty(0, dtype=np.int64)
    if cfg.kind == "lightgcn":
        graph = np.asarray([] if graph_items is None else graph_items, dtype=np.int64)
        graph_locals = np.searchsorted(touched, graph)
        coeffs = lightgcn_coeffs(len(graph), cfg.gcn_layers)

    d_rows = np.zeros_like(rows)
    dffn = FfnBlock(cfg)
    params = {"user": u, "items": rows, "ffn": ffn.flat}
    bsz = hyper.batch_size
    final_loss = 0.0
    last_finite = 0.0
    for _ in range(hyper.local_epochs):
        perm = rng.shuffled_index(n)
        epoch_ce = 0.0
        for start in range(0, n, bsz):
            batch = perm[start:start + bsz]
            ce, du0 = _batch_grads(cfg, u, rows, ffn, batch, labels[batch],
                                   graph_locals, coeffs, d_rows, dffn, counter)
            epoch_ce += ce
            if mu > 0:
                d_rows += (2.0 * mu) * (rows - rows0)
                if flat0 is not None:
                    dffn.flat += (2.0 * mu) * (ffn.flat - flat0)
            # _head_backward overwrites every dffn view, so only the sparse
            # item-row buffer needs re-zeroing between batches
            grads = {"user": du0, "items": d_rows, "ffn": dffn.flat}
            adam_step(adam, params, grads, hyper.lr)
            d_rows.fill(0.0)
        final_loss = epoch_ce
        if mu > 0:
            final_loss += mu * float(np.sum((rows - rows0) ** 2))
            if flat0 is not None:
                final_loss += mu * float(np.sum((ffn.flat - flat0) ** 2))
        if not np.isfinite(final_loss):
            raise NonFiniteError(
                f"local training diverged (last finite loss {last_finite:.6g})"
            )
        last_finite = final_loss
    if persistent_items:
        full_m[touched] = adam.m["items"]
        full_v[touched] = adam.v["items"]
        adam.m["items"] = full_m
        adam.v["items"] = full_v
    ffn_w, ffn_b, h = ffn.unpack()
    return LocalTrainResult(
        private=u, touched=touched, item_rows=rows, ffn_w=ffn_w, ffn_b=ffn_b, h=h,
        adam=adam, final_loss=final_loss, n_samples=n, clamps=counter.count,
    )


# --------------------------------------------------------------------------
# gradient-check surface: whole-dataset objective as a function of the
# parameter dict {"user", "items", "ffn"}, plus its analytic gradients
# --------------------------------------------------------------------------

def make_objective(cfg: ModelConfig, labels: np.ndarray, graph_locals: np.ndarray,
                   mu: float = 0.0, penalty_scope: str = "public",
                   rows_ref: np.ndarray | None = None,
                   flat_ref: np.ndarray | None = None):
    """Return loss_fn(params) -> float over one full-dataset batch.

    params = {"user": (d,), "items": (n, d), "ffn": flat}. With mu > 0 the
    proximal penalty against rows_ref/flat_ref is included.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n = len(labels)
    locals_all = np.arange(n, dtype=np.int64)
    coeffs = lightgcn_coeffs(len(graph_locals), cfg.gcn_layers) \
        if cfg.kind == "lightgcn" else None

    def loss_fn(params) -> float:
        u0 = params["user"]
        rows = params["items"]
        ffn = FfnBlock(cfg, params["ffn"])
        d = cfg.embed_dim
        v0 = rows[locals_all]
        if coeffs is None:
            u_fin, v_fin = u0, v0
        else:
            a, b, c, dd = coeffs
            s0 = rows[graph_locals].sum(axis=0) if len(graph_locals) else np.zeros(d)
            u_fin = a * u0 + b * s0
            v_fin = v0.copy()
            in_graph = np.isin(locals_all, graph_locals)
            v_fin[in_graph] += c * u0 + dd * s0
        x = np.empty((n, 2 * d))
        x[:, :d] = u_fin
        x[:, d:] = v_fin
        probs, _ = _head_forward(x, ffn)
        total = rec_loss(probs, labels)
        if mu > 0:
            total += mu * float(np.sum((rows - rows_ref) ** 2))
            if penalty_scope == "public":
                total += mu * float(np.sum((params["ffn"] - flat_ref) ** 2))
        return total

    return loss_fn


def analytic_gradients(cfg: ModelConfig, params: dict, labels: np.ndarray,
                       graph_locals: np.ndarray, mu: float = 0.0,
                       penalty_scope: str = "public",
                       rows_ref: np.ndarray | None = None,
                       flat_ref: np.ndarray | None = None) -> dict:
    """Hand-derived gradients of make_objective at `params`."""
    labels = np.asarray(labels, dtype=np.float64)
    n = len(labels)
    rows = params["items"]
    ffn = FfnBlock(cfg, params["ffn"])
    coeffs = lightgcn_coeffs(len(graph_locals), cfg.gcn_layers) \
        if cfg.kind == "lightgcn" else None
    d_rows = np.zeros_like(rows)
    dffn = FfnBlock(cfg)
    _, du0 = _batch_grads(cfg, params["user"], rows, ffn,
                          np.arange(n, dtype=np.int64), labels,
                          graph_locals, coeffs, d_rows, dffn, None)
    if mu > 0:
        d_rows += (2.0 * mu) * (rows - rows_ref)
        if penalty_scope == "public":
            dffn.flat += (2.0 * mu) * (params["ffn"] - flat_ref)
    return {"user": du0, "items": d_rows, "ffn": dffn.flat}


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, cfg: ModelConfig, public: PublicParams, privates: dict) -> None:
    """Write model state as an npz container with a JSON config header;
    float64 blocks round-trip bit-exactly."""
    header = json.dumps({
        "kind": cfg.kind, "embed_dim": cfg.embed_dim,
        "ffn_dims": list(cfg.ffn_dims), "gcn_layers": cfg.gcn_layers,
        "users": sorted(int(u) for u in privates),
    }, sort_keys=True)
    blocks = {"config": np.frombuffer(header.encode(), dtype=np.uint8),
              "item_emb": public.item_emb, "h": public.h}
    for k, (w, b) in enumerate(zip(public.ffn_w, public.ffn_b)):
        blocks[f"ffn_w_{k}"] = w
        blocks[f"ffn_b_{k}"] = b
    if privates:
        uids = sorted(privates)
        blocks["private_users"] = np.asarray(uids, dtype=np.int64)
        blocks["private_emb"] = np.stack([privates[u] for u in uids])
    np.savez(path, **blocks)


def load_checkpoint(path):
    with np.load(path) as blob:
        header = json.loads(bytes(blob["config"]).decode())
        cfg = ModelConfig(kind=header["kind"], embed_dim=header["embed_dim"],
                          ffn_dims=tuple(header["ffn_dims"]),
                          gcn_layers=header["gcn_layers"])
        n_layers = len(header["ffn_dims"])
        public = PublicParams(
            item_emb=blob["item_emb"],
            ffn_w=[blob[f"ffn_w_{k}"] for k in range(n_layers)],
            ffn_b=[blob[f"ffn_b_{k}"] for k in range(n_layers)],
            h=blob["h"],
        )
        privates = {}
        if "private_users" in blob:
            for uid, emb in zip(blob["private_users"], blob["private_emb"]):
                privates[int(uid)] = emb.copy()
    return cfg, public, privates
