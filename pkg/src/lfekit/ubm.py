"""Diagonal-covariance GMM (universal background model) trained with EM.

The E-step runs over fixed-size frame blocks. Block boundaries depend only on
the number of components, never on the thread count, and block accumulators are
merged in block order, so results are bit-identical for any ``threads`` value.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionMismatch, FormatError, NumericalFailure, TooFewFrames

LOG_2PI = float(np.log(2.0 * np.pi))
VARIANCE_FLOOR_FRACTION = 1e-3
WEIGHT_FLOOR = 1e-8
DEAD_COMPONENT_FRACTION = 1e-4
INIT_SUBSAMPLE = 1_000_000
LLOYD_ITERATIONS = 10
MODEL_MAGIC = b"LFEG"
MODEL_VERSION = 1


@dataclass
class DiagGmm:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D)
    train_log: list[float] = field(default_factory=list)
    var_floor: np.ndarray | None = None  # (D,), set by init_kmeans

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_loglik(self, x: np.ndarray) -> np.ndarray:
        """log w_c + log N(x_t | mu_c, diag var_c), shape (T, K)."""
        inv = 1.0 / self.variances
        const = np.log(self.weights) - 0.5 * (self.dim * LOG_2PI + np.log(self.variances).sum(1)
                                             + (self.means**2 * inv).sum(1))
        return const[None, :] - 0.5 * ((x**2) @ inv.T) + x @ (self.means * inv).T

    def posteriors(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Responsibilities (T, K) and per-frame log-likelihoods (T,)."""
        lp = self.component_loglik(x)
        top = lp.max(axis=1, keepdims=True)
        resp = np.exp(lp - top)
        tot = resp.sum(axis=1, keepdims=True)
        resp /= tot
        return resp, (top + np.log(tot))[:, 0]


def _as_frames(frames, dim: int | None = None) -> np.ndarray:
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if dim is not None and x.shape[1] != dim:
        raise DimensionMismatch(f"frame dim {x.shape[1]} != model dim {dim}")
    return x


def block_size(n_components: int) -> int:
    return max(256, (1 << 21) // max(n_components, 1))


def _blocks(n: int, size: int):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def _map_blocks(fn, x: np.ndarray, size: int, threads: int):
    spans = _blocks(x.shape[0], size)
    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda s: fn(x[s[0] : s[1]]), spans))
    return [fn(x[a:b]) for a, b in spans]


def log_likelihood(gmm: DiagGmm, frames, threads: int = 1) -> float:
    """Average per-frame log-likelihood."""
    x = _as_frames(frames, gmm.dim)
    parts = _map_blocks(lambda b: gmm.posteriors(b)[1].sum(), x, block_size(gmm.n_components), threads)
    return float(np.sum(parts)) / x.shape[0]


def _global_floor(x: np.ndarray) -> np.ndarray:
    return np.maximum(x.var(axis=0), 1e-12) * VARIANCE_FLOOR_FRACTION


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(x.shape[0])]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = x[rng.integers(x.shape[0])]
        else:
            centers[i] = x[rng.choice(x.shape[0], p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(1))
    return centers


def _assign(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (x**2).sum(1)[:, None] - 2.0 * x @ centers.T + (centers**2).sum(1)[None, :]
    return np.argmin(d2, axis=1)


def init_kmeans(frames, K: int, seed: int = 0) -> DiagGmm:
    """k-means++ seeding and a few Lloyd passes on a subsample; uniform weights."""
    x = _as_frames(frames)
    if x.shape[0] < 10 * K:
        raise TooFewFrames(f"{x.shape[0]} frames < 10 * K = {10 * K}")
    floor = _global_floor(x)
    rng = np.random.default_rng(seed)
    sub = x if x.shape[0] <= INIT_SUBSAMPLE else x[np.sort(rng.choice(x.shape[0], INIT_SUBSAMPLE, replace=False))]
    centers = _kmeans_pp(sub, K, rng)
    labels = _assign(sub, centers)
    for _ in range(LLOYD_ITERATIONS):
        new = centers.copy()
        for c in range(K):
            members = sub[labels == c]
            if len(members):
                new[c] = members.mean(0)
        new_labels = _assign(sub, new)
        centers = new
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    variances = np.empty_like(centers)
    for c in range(K):
        members = sub[labels == c]
        variances[c] = members.var(0) if len(members) > 1 else sub.var(0)
    variances = np.maximum(variances, floor)
    return DiagGmm(np.full(K, 1.0 / K), centers, variances, [], floor)


def _accumulate(gmm: DiagGmm, block: np.ndarray):
    resp, ll = gmm.posteriors(block)
    return resp.sum(0), resp.T @ block, resp.T @ (block**2), ll.sum(), ll.argmin(), ll.min()


def _e_step(gmm: DiagGmm, x: np.ndarray, threads: int):
    size = block_size(gmm.n_components)
    parts = _map_blocks(lambda b: _accumulate(gmm, b), x, size, threads)
    n = np.zeros(gmm.n_components)
    f = np.zeros_like(gmm.means)
    s = np.zeros_like(gmm.means)
    ll = 0.0
    worst, worst_ll = 0, np.inf
    for i, (pn, pf, ps, pll, parg, pmin) in enumerate(parts):
        n += pn
        f += pf
        s += ps
        ll += pll
        if pmin < worst_ll:
            worst, worst_ll = i * size + int(parg), pmin
    return (n, f, s), ll / x.shape[0], worst


def _m_step(gmm: DiagGmm, stats, floor: np.ndarray) -> DiagGmm:
    n, f, s = stats
    total = n.sum()
    safe = np.maximum(n, 1e-300)[:, None]
    means = np.where(n[:, None] > 0, f / safe, gmm.means)
    variances = np.where(n[:, None] > 0, s / safe - means**2, gmm.variances)
    variances = np.maximum(variances, floor)
    weights = np.maximum(n / total, WEIGHT_FLOOR)
    weights /= weights.sum()
    return replace(gmm, weights=weights, means=means, variances=variances, train_log=list(gmm.train_log))


def _rescue(gmm: DiagGmm, stats, x: np.ndarray, worst: int, floor: np.ndarray) -> DiagGmm | None:
    n = stats[0]
    dead = np.flatnonzero(n < DEAD_COMPONENT_FRACTION * n.sum())
    if dead.size == 0:
        return None
    means = gmm.means.copy()
    variances = gmm.variances.copy()
    weights = gmm.weights.copy()
    global_var = np.maximum(x.var(axis=0), floor)
    for c in dead:
        means[c] = x[worst]
        variances[c] = global_var
        weights[c] = max(weights[c], 1.0 / x.shape[0])
    weights /= weights.sum()
    return replace(gmm, weights=weights, means=means, variances=variances, train_log=list(gmm.train_log))


def em_fit(gmm: DiagGmm, frames, n_iter: int = 10, threads: int = 1) -> DiagGmm:
    """Run ``n_iter`` EM iterations.

    ``train_log`` receives the average log-likelihood of the starting model
    followed by one entry per iteration (the model after that M-step).
    A dead component is re-seeded at the worst-explained frame, but only when
    doing so does not lower the likelihood, which keeps the log monotone.
    """
    x = _as_frames(frames, gmm.dim)
    floor = gmm.var_floor if gmm.var_floor is not None else _global_floor(x)
    model = replace(gmm, train_log=list(gmm.train_log), var_floor=floor)
    stats, ll, worst = _e_step(model, x, threads)
    if not np.isfinite(ll):
        raise NumericalFailure("non-finite log-likelihood at initialisation", iteration=0)
    if not model.train_log:
        model.train_log.append(float(ll))
    for it in range(1, n_iter + 1):
        candidate = _m_step(model, stats, floor)
        c_stats, c_ll, c_worst = _e_step(candidate, x, threads)
        rescued = _rescue(candidate, c_stats, x, c_worst, floor)
        if rescued is not None:
            r_stats, r_ll, r_worst = _e_step(rescued, x, threads)
            if r_ll >= c_ll:
                candidate, c_stats, c_ll, c_worst = rescued, r_stats, r_ll, r_worst
        if not np.isfinite(c_ll):
            raise NumericalFailure(f"non-finite log-likelihood at iteration {it}", iteration=it)
        model, stats, worst = candidate, c_stats, c_worst
        model.train_log.append(float(c_ll))
    return model


def train_ubm(frames, K: int, n_iter: int = 10, seed: int = 0, threads: int = 1) -> DiagGmm:
    return em_fit(init_kmeans(frames, K, seed), frames, n_iter, threads)


def encode_gmm(gmm: DiagGmm) -> bytes:
    k, d = gmm.means.shape
    head = MODEL_MAGIC + struct.pack("<IIII", MODEL_VERSION, k, d, len(gmm.train_log))
    body = np.concatenate([gmm.weights.ravel(), gmm.means.ravel(), gmm.variances.ravel(),
                           np.asarray(gmm.train_log, dtype=np.float64)])
    floor = gmm.var_floor if gmm.var_floor is not None else np.zeros(d)
    return head + body.astype("<f8").tobytes() + np.asarray(floor, dtype="<f8").tobytes()


def decode_gmm(blob: bytes, offset: int = 0) -> tuple[DiagGmm, int]:
    """Parse a model starting at ``offset``; returns the model and the end offset."""
    if blob[offset : offset + 4] != MODEL_MAGIC:
        raise FormatError("not a GMM model (bad magic)")
    version, k, d, n_log = struct.unpack_from("<IIII", blob, offset + 4)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported GMM version {version}")
    count = k + 2 * k * d + n_log + d
    start = offset + 20
    end = start + 8 * count
    if len(blob) < end:
        raise FormatError("truncated GMM model")
    vals = np.frombuffer(blob[start:end], dtype="<f8").astype(np.float64)
    w, rest = vals[:k], vals[k:]
    means, rest = rest[: k * d].reshape(k, d), rest[k * d :]
    var, rest = rest[: k * d].reshape(k, d), rest[k * d :]
    log, floor = rest[:n_log], rest[n_log:]
    return DiagGmm(w.copy(), means.copy(), var.copy(), log.tolist(), floor.copy()), end
