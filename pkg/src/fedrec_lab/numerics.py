"""Seeded randomness, Adam, and small numeric utilities shared by all modules.

Everything here is float64 and deterministic: every random draw flows through
a labeled RngStream, so a run can be replayed bit-identically from its seeds.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
from numba import njit
from threadpoolctl import threadpool_limits

TWO_PI = 2.0 * math.pi
_INV_2_53 = 2.0 ** -53


def single_thread_blas():
    """Pin BLAS to one thread; the training gemms are too small to share.

    Use as a context manager around anything that loops over local training.
    """
    return threadpool_limits(limits=1)


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(ArithmeticError):
    """A value that must be finite is NaN or infinite."""


def check_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")


class RngStream:
    """Deterministic random stream identified by (seed, label).

    Backed by a Philox counter-based generator keyed with
    SHA-256(seed, label), so the same pair replays the same sequence on any
    platform. Uniform doubles are (raw64 >> 11) * 2**-53 and normals come
    from an explicit Box-Muller transform on two uniforms; neither depends
    on numpy's Generator distribution code.
    """

    def __init__(self, seed: int, label: str):
        self.seed = int(seed)
        self.label = str(label)
        digest = hashlib.sha256(f"{self.seed}\x1f{self.label}".encode()).digest()
        key = np.frombuffer(digest[:16], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)

    def child(self, suffix: str) -> "RngStream":
        """A fresh stream labeled <label>:<suffix> under the same seed."""
        return RngStream(self.seed, f"{self.label}:{suffix}")

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1)."""
        raw = self._bitgen.random_raw(int(n))
        return (raw >> np.uint64(11)) * _INV_2_53

    def normals(self, shape, scale: float = 1.0) -> np.ndarray:
        """Standard normals times `scale`, via Box-Muller pairs."""
        m = int(np.prod(shape))
        if m == 0:
            return np.zeros(shape, dtype=np.float64)
        pairs = (m + 1) // 2
        u = self.uniforms(2 * pairs)
        u1 = 1.0 - u[:pairs]  # (0, 1]: keeps log() finite
        u2 = u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(TWO_PI * u2), r * np.sin(TWO_PI * u2)])[:m]
        if scale != 1.0:
            z *= scale
        return z.reshape(shape)

    def integers(self, upper: int, size: int | None = None):
        """Integers uniform on [0, upper). Bias from floor(u*upper) is O(upper/2^53)."""
        if upper <= 0:
            raise ValueError(f"upper must be positive, got {upper}")
        n = 1 if size is None else int(size)
        vals = np.minimum((self.uniforms(n) * upper).astype(np.int64), upper - 1)
        return int(vals[0]) if size is None else vals

    def shuffled_index(self, n: int) -> np.ndarray:
        """A permutation of range(n) by Fisher-Yates."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniforms(n - 1)
        for i in range(n - 1, 0, -1):
            j = min(int(u[n - 1 - i] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def sample(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), order random (partial Fisher-Yates)."""
        if k > n:
            raise ValueError(f"cannot sample {k} of {n} without replacement")
        pool = np.arange(n, dtype=np.int64)
        if k == 0:
            return pool[:0]
        u = self.uniforms(k)
        for i in range(k):
            j = i + min(int(u[i] * (n - i)), n - i - 1)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()

    def weighted_sample(self, weights: np.ndarray, k: int) -> np.ndarray:
        """k distinct indices drawn sequentially with probability proportional
        to weight among the remaining items."""
        w = np.asarray(weights, dtype=np.float64).copy()
        n = w.size
        if k > n:
            raise ValueError(f"cannot sample {k} of {n} without replacement")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        out = np.empty(k, dtype=np.int64)
        u = self.uniforms(k)
        for i in range(k):
            total = w.sum()
            if total <= 0:
                raise ValueError("weights sum to zero before sampling finished")
            target = u[i] * total
            idx = int(np.searchsorted(np.cumsum(w), target, side="right"))
            idx = min(idx, n - 1)
            out[i] = idx
            w[idx] = 0.0
        return out


def gaussian_noise(rows: int, cols: int, lam: float, rng: RngStream) -> np.ndarray:
    """(rows, cols) matrix of i.i.d. N(0, lam^2) entries."""
    if lam < 0:
        raise ValueError(f"noise scale must be >= 0, got {lam}")
    if lam == 0:
        return np.zeros((rows, cols), dtype=np.float64)
    return rng.normals((rows, cols), scale=lam)


class AdamState:
    """First/second moment estimates plus step count for a named parameter set."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


@njit(cache=True)
def _adam_kernel(theta, g, m, v, b1, b2, eps, c1, c2, lr):
    lr_c1 = lr / c1
    inv_c2 = 1.0 / c2
    for i in range(theta.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        theta[i] -= lr_c1 * mi / (math.sqrt(vi * inv_c2) + eps)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> dict:
    """One Adam update with bias correction, in place on `params`.

    theta -= lr * m_hat / (sqrt(v_hat) + eps), the original formulation.
    The elementwise update runs as a single fused pass.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeMismatchError(
                f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}"
            )
        if not math.isfinite(float(g.sum())):  # sum is non-finite iff g has nan/inf
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        if not theta.flags["C_CONTIGUOUS"]:
            raise ValueError(f"parameter {name} must be C-contiguous")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        _adam_kernel(theta.ravel(), np.ascontiguousarray(g).ravel(),
                     m.ravel(), v.ravel(), b1, b2, state.eps, c1, c2, lr)
    return params


def euclidean_dist(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatchError(f"length mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def finite_diff_check(loss_fn, params: dict, analytic: dict, h: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    The central difference is the reference: per entry,
    |analytic - central| / max(|central|, 1e-8). `loss_fn` takes the params
    dict and must be deterministic.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    worst = 0.0
    for name, theta in params.items():
        grad = analytic[name]
        flat = theta.ravel()
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + h
            up = float(loss_fn(params))
            flat[idx] = keep - h
            down = float(loss_fn(params))
            flat[idx] = keep
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFiniteError(f"loss not finite while probing {name}")
            central = (up - down) / (2.0 * h)
            err = abs(grad.ravel()[idx] - central) / max(abs(central), 1e-8)
            worst = max(worst, err)
    return worst
