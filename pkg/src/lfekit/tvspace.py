"""Total-variability subspace training and i-vector extraction.

Notation: K UBM components, D feature dims, R i-vector dims. ``T`` is stored
as a (K*D, R) matrix whose rows are component-major (row ``c*D + d``).
For one utterance with soft counts N (K,) and centred first-order stats F (K, D)
the latent posterior has precision ``L = I + sum_c N_c T_c' S_c^-1 T_c`` and
mean ``w = L^-1 T' S^-1 f``. The EM objective tracked in ``train_log`` is the
T-dependent part of the marginal log-likelihood, ``0.5 b'L^-1 b - 0.5 log|L|``
averaged over utterances.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import (
    ConfigMismatch,
    DimensionMismatch,
    EmptyUtterance,
    FormatError,
    SingularSystem,
    TooFewUtterances,
)
from .features import FeatureMatrix
from .ubm import DiagGmm, _map_blocks, block_size, decode_gmm, encode_gmm

TV_MAGIC = b"LFET"
IVEC_MAGIC = b"LFEI"
FORMAT_VERSION = 1
INIT_SCALE = 0.1
UTTERANCE_BATCH = 32


@dataclass
class BaumWelchStats:
    utterance_id: str
    N: np.ndarray  # (K,)
    F: np.ndarray  # (K, D), centred on the UBM means

    @property
    def n_frames(self) -> float:
        return float(self.N.sum())


@dataclass
class TvModel:
    ubm: DiagGmm
    T: np.ndarray  # (K*D, R)
    train_log: list[float] = field(default_factory=list)

    @property
    def rank(self) -> int:
        return self.T.shape[1]


@dataclass
class IVector:
    utterance_id: str
    w: np.ndarray
    speaker_id: str = ""
    condition: tuple[str, str] = ("", "")


@dataclass
class ConditionSet:
    """All i-vectors of one test set extracted with one trained model."""

    condition: tuple[str, str]  # (test_language, train_language)
    utterance_ids: list[str]
    speaker_ids: list[str]
    vectors: np.ndarray  # (n, R) float32

    def __len__(self) -> int:
        return len(self.utterance_ids)

    def ivectors(self) -> list[IVector]:
        return [IVector(u, self.vectors[i].copy(), s, self.condition)
                for i, (u, s) in enumerate(zip(self.utterance_ids, self.speaker_ids))]


def accumulate_stats(ubm: DiagGmm, feats, utterance_id: str = "", threads: int = 1) -> BaumWelchStats:
    """Zeroth- and centred first-order statistics under the UBM responsibilities."""
    if isinstance(feats, FeatureMatrix):
        utterance_id = utterance_id or feats.utterance_id
        feats = feats.data
    x = np.asarray(feats, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != ubm.dim:
        raise DimensionMismatch(f"feature dim {x.shape[1]} != UBM dim {ubm.dim}")
    if x.shape[0] == 0:
        raise EmptyUtterance(f"utterance {utterance_id!r} has no frames")

    def block(b):
        resp, _ = ubm.posteriors(b)
        return resp.sum(0), resp.T @ b

    parts = _map_blocks(block, x, block_size(ubm.n_components), threads)
    n = np.zeros(ubm.n_components)
    f = np.zeros_like(ubm.means)
    for pn, pf in parts:
        n += pn
        f += pf
    return BaumWelchStats(utterance_id, n, f - n[:, None] * ubm.means)


def _tri(r: int):
    return np.triu_indices(r)


def _precision_terms(T: np.ndarray, ubm: DiagGmm) -> np.ndarray:
    """Packed upper triangles of T_c' S_c^-1 T_c, shape (K, R(R+1)/2)."""
    k, d = ubm.means.shape
    r = T.shape[1]
    iu = _tri(r)
    Tc = T.reshape(k, d, r)
    scaled = Tc / ubm.variances[:, :, None]
    out = np.empty((k, len(iu[0])))
    for c in range(k):
        out[c] = (Tc[c].T @ scaled[c])[iu]
    return out


def _unpack(packed: np.ndarray, r: int) -> np.ndarray:
    iu = _tri(r)
    m = np.zeros(packed.shape[:-1] + (r, r))
    m[..., iu[0], iu[1]] = packed
    m[..., iu[1], iu[0]] = packed
    return m


def _stack(stats: Sequence[BaumWelchStats], ubm: DiagGmm) -> tuple[np.ndarray, np.ndarray]:
    k, d = ubm.means.shape
    for s in stats:
        if s.N.shape != (k,) or s.F.shape != (k, d):
            raise DimensionMismatch(
                f"stats {s.utterance_id!r} have shape N{s.N.shape} F{s.F.shape}, UBM is K={k} D={d}")
    n = np.array([s.N for s in stats], dtype=np.float64).reshape(len(stats), k)
    f = np.array([s.F for s in stats], dtype=np.float64).reshape(len(stats), k * d)
    return n, f


def _posteriors(T, ubm, prec, n, f):
    """Posterior means (B, R), covariances (B, R, R) and objective terms (B,)."""
    r = T.shape[1]
    L = _unpack(n @ prec, r) + np.eye(r)
    b = (f / ubm.variances.reshape(1, -1)) @ T
    chol = np.linalg.cholesky(L)
    y = np.linalg.solve(chol, b[..., None])
    w = np.linalg.solve(np.swapaxes(chol, -1, -2), y)[..., 0]
    inv_chol = np.linalg.inv(chol)
    cov = np.swapaxes(inv_chol, -1, -2) @ inv_chol
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
    obj = 0.5 * (b * w).sum(-1) - 0.5 * logdet
    return w, cov, obj


def _batches(n: int):
    return [(i, min(i + UTTERANCE_BATCH, n)) for i in range(0, n, UTTERANCE_BATCH)]


def _run_batches(fn, n_utts: int, threads: int):
    spans = _batches(n_utts)
    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, spans))
    return [fn(s) for s in spans]


def _tv_e_step(T, ubm, n, f, threads):
    r = T.shape[1]
    iu = _tri(r)
    prec = _precision_terms(T, ubm)

    def batch(span):
        a, z = span
        w, cov, obj = _posteriors(T, ubm, prec, n[a:z], f[a:z])
        eww = cov + w[:, :, None] * w[:, None, :]
        return n[a:z].T @ eww[:, iu[0], iu[1]], f[a:z].T @ w, obj.sum()

    acc_a = np.zeros((ubm.n_components, len(iu[0])))
    acc_c = np.zeros((f.shape[1], r))
    total = 0.0
    for pa, pc, po in _run_batches(batch, n.shape[0], threads):
        acc_a += pa
        acc_c += pc
        total += po
    return acc_a, acc_c, total / n.shape[0]


def _tv_m_step(acc_a, acc_c, ubm, r):
    k, d = ubm.means.shape
    A = _unpack(acc_a, r)
    C = acc_c.reshape(k, d, r)
    T = np.empty((k, d, r))
    for c in range(k):
        try:
            T[c] = cho_solve(cho_factor(A[c]), C[c].T).T
        except LinAlgError as exc:
            raise SingularSystem(f"M-step system for component {c} is singular", component=c) from exc
    return T.reshape(k * d, r)


def init_T(ubm: DiagGmm, R: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    scale = INIT_SCALE * np.sqrt(ubm.variances.mean())
    return rng.standard_normal((ubm.n_components * ubm.dim, R)) * scale


def train_tv(
    ubm: DiagGmm,
    stats: Sequence[BaumWelchStats],
    R: int,
    n_iter: int = 5,
    seed: int = 0,
    threads: int = 1,
    T_init: np.ndarray | None = None,
) -> TvModel:
    """EM for the total-variability matrix.

    ``train_log`` holds the objective for the initial matrix and after each
    iteration.
    """
    k, d = ubm.means.shape
    # R == K*D is allowed so the scalar K = D = R = 1 case stays trainable
    if not 1 <= R <= k * d:
        raise ValueError(f"R={R} must lie in [1, K*D={k * d}]")
    if len(stats) < R:
        raise TooFewUtterances(f"{len(stats)} utterances < R = {R}")
    n, f = _stack(stats, ubm)
    T = init_T(ubm, R, seed) if T_init is None else np.array(T_init, dtype=np.float64)
    if T.shape != (k * d, R):
        raise DimensionMismatch(f"initial T has shape {T.shape}, expected {(k * d, R)}")
    acc_a, acc_c, obj = _tv_e_step(T, ubm, n, f, threads)
    log = [float(obj)]
    for _ in range(n_iter):
        T = _tv_m_step(acc_a, acc_c, ubm, R)
        acc_a, acc_c, obj = _tv_e_step(T, ubm, n, f, threads)
        log.append(float(obj))
    return TvModel(ubm, T, log)


def tv_objective(model: TvModel, stats: Sequence[BaumWelchStats]) -> float:
    n, f = _stack(stats, model.ubm)
    return _tv_e_step(model.T, model.ubm, n, f, 1)[2]


def extract_ivectors(model: TvModel, stats: Sequence[BaumWelchStats], threads: int = 1) -> np.ndarray:
    """Posterior means for many utterances, shape (n, R)."""
    if not stats:
        return np.zeros((0, model.rank))
    n, f = _stack(stats, model.ubm)
    prec = _precision_terms(model.T, model.ubm)

    def batch(span):
        a, z = span
        return _posteriors(model.T, model.ubm, prec, n[a:z], f[a:z])[0]

    return np.concatenate(_run_batches(batch, n.shape[0], threads), axis=0)


def extract_ivector(model: TvModel, stats: BaumWelchStats) -> IVector:
    return IVector(stats.utterance_id, extract_ivectors(model, [stats])[0])


def extract_condition(
    model: TvModel,
    test_feats: Sequence,
    speakers: Sequence[str],
    condition: tuple[str, str],
    model_config_hash: str | None = None,
    threads: int = 1,
) -> ConditionSet:
    """I-vectors of a test set under a model; ``condition`` is (test_language, train_language).

    Vectors are rounded to float32, the precision of the on-disk i-vector set,
    so fresh and cached results are indistinguishable downstream.
    """
    if model_config_hash is not None:
        for fm in test_feats:
            if fm.config_hash and fm.config_hash != model_config_hash:
                raise ConfigMismatch(
                    f"{fm.utterance_id}: feature config {fm.config_hash} != model config {model_config_hash}")
    stats = [accumulate_stats(model.ubm, fm, threads=threads) for fm in test_feats]
    vecs = extract_ivectors(model, stats, threads).astype(np.float32)
    return ConditionSet(tuple(condition), [fm.utterance_id for fm in test_feats], list(speakers), vecs)


def encode_tv(model: TvModel) -> bytes:
    k, d = model.ubm.means.shape
    r = model.rank
    head = TV_MAGIC + struct.pack("<IIIII", FORMAT_VERSION, k, d, r, len(model.train_log))
    return (head + encode_gmm(model.ubm) + model.T.astype("<f8").tobytes()
            + np.asarray(model.train_log, dtype="<f8").tobytes())


def decode_tv(blob: bytes) -> TvModel:
    if blob[:4] != TV_MAGIC:
        raise FormatError("not a TV model (bad magic)")
    version, k, d, r, n_log = struct.unpack_from("<IIIII", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported TV model version {version}")
    ubm, off = decode_gmm(blob, 24)
    if ubm.means.shape != (k, d):
        raise FormatError("embedded UBM does not match TV header")
    end = off + 8 * (k * d * r + n_log)
    if len(blob) < end:
        raise FormatError("truncated TV model")
    vals = np.frombuffer(blob[off:end], dtype="<f8").astype(np.float64)
    return TvModel(ubm, vals[: k * d * r].reshape(k * d, r).copy(), vals[k * d * r :].tolist())


def _put_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _get_str(blob: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + n:
        raise FormatError("truncated string in i-vector set")
    return blob[off : off + n].decode("utf-8"), off + n


def encode_condition(cs: ConditionSet) -> bytes:
    n, r = cs.vectors.shape if len(cs) else (0, cs.vectors.shape[1] if cs.vectors.ndim == 2 else 0)
    out = [IVEC_MAGIC, struct.pack("<III", FORMAT_VERSION, n, r)]
    test_lang, train_lang = cs.condition
    for i in range(n):
        out += [_put_str(cs.utterance_ids[i]), _put_str(cs.speaker_ids[i]),
                _put_str(test_lang), _put_str(train_lang), cs.vectors[i].astype("<f4").tobytes()]
    return b"".join(out)


def decode_condition(blob: bytes) -> ConditionSet:
    if blob[:4] != IVEC_MAGIC:
        raise FormatError("not an i-vector set (bad magic)")
    version, n, r = struct.unpack_from("<III", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported i-vector set version {version}")
    off = 16
    utts, spks, conds = [], [], set()
    vecs = np.zeros((n, r), dtype=np.float32)
    for i in range(n):
        u, off = _get_str(blob, off)
        s, off = _get_str(blob, off)
        te, off = _get_str(blob, off)
        tr, off = _get_str(blob, off)
        if len(blob) < off + 4 * r:
            raise FormatError("truncated i-vector record")
        vecs[i] = np.frombuffer(blob[off : off + 4 * r], dtype="<f4")
        off += 4 * r
        utts.append(u)
        spks.append(s)
        conds.add((te, tr))
    if len(conds) > 1:
        raise FormatError("i-vector set mixes several conditions")
    condition = conds.pop() if conds else ("", "")
    return ConditionSet(condition, utts, spks, vecs)
