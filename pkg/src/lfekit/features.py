"""MFCC + delta + pitch front end and the per-utterance feature cache.

Frame layout follows the usual 25 ms / 10 ms scheme without edge padding, so
an utterance of ``n`` samples yields ``(n - frame_len) // frame_shift + 1``
frames for both the cepstral and the pitch stream.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .corpus import UtteranceRecord, read_wav
from .errors import FeatureError, FormatError, RateMismatch, TooShort

LOG_FLOOR = 1e-10
PRE_EMPHASIS = 0.97
DELTA_WINDOW = 2
F0_MIN_HZ = 60.0
F0_MAX_HZ = 400.0
YIN_THRESHOLD = 0.1
VOICED = 0.5

CACHE_MAGIC = b"LFEF"
CACHE_VERSION = 1


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate_hz: int = 16000
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    n_mel_filters: int = 23
    n_cepstra: int = 13
    add_deltas: bool = True
    add_pitch: bool = True
    cmn: bool = True

    def __post_init__(self):
        if self.n_cepstra > self.n_mel_filters:
            raise ValueError("n_cepstra must not exceed n_mel_filters")
        if self.frame_shift_ms > self.frame_length_ms:
            raise ValueError("frame_shift_ms must not exceed frame_length_ms")

    @property
    def frame_length(self) -> int:
        return int(round(self.sample_rate_hz * self.frame_length_ms / 1000.0))

    @property
    def frame_shift(self) -> int:
        return int(round(self.sample_rate_hz * self.frame_shift_ms / 1000.0))

    @property
    def n_fft(self) -> int:
        return 1 << (self.frame_length - 1).bit_length()

    @property
    def dim(self) -> int:
        return self.n_cepstra * (3 if self.add_deltas else 1) + (3 if self.add_pitch else 0)

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(**d)


@dataclass
class FeatureMatrix:
    utterance_id: str
    data: np.ndarray  # (n_frames, dim) float32
    config_hash: str = ""

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError("feature data must be 2-D (frames x dim)")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def n_frames_for(n_samples: int, cfg: FeatureConfig) -> int:
    if n_samples < cfg.frame_length:
        return 0
    return (n_samples - cfg.frame_length) // cfg.frame_shift + 1


def frame_signal(samples: np.ndarray, length: int, shift: int, n_frames: int) -> np.ndarray:
    idx = np.arange(length)[None, :] + shift * np.arange(n_frames)[:, None]
    return samples[idx]


def _check_input(samples, cfg: FeatureConfig, sample_rate: int | None) -> np.ndarray:
    if sample_rate is not None and sample_rate != cfg.sample_rate_hz:
        raise RateMismatch(f"sample rate {sample_rate} != configured {cfg.sample_rate_hz}")
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise ValueError("expected mono samples")
    if samples.size < cfg.frame_length:
        raise TooShort(f"{samples.size} samples is shorter than one frame ({cfg.frame_length})")
    return samples


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig, low_hz: float = 20.0, high_hz: float | None = None) -> np.ndarray:
    """Triangular filters on the mel scale, shape (n_mel_filters, n_fft // 2 + 1)."""
    high_hz = cfg.sample_rate_hz / 2.0 if high_hz is None else high_hz
    n_bins = cfg.n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * cfg.sample_rate_hz / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), cfg.n_mel_filters + 2))
    bank = np.zeros((cfg.n_mel_filters, n_bins))
    for m in range(cfg.n_mel_filters):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        bank[m] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def power_spectrum(frames: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    emphasized = np.empty_like(frames)
    emphasized[:, 1:] = frames[:, 1:] - PRE_EMPHASIS * frames[:, :-1]
    emphasized[:, 0] = frames[:, 0] * (1.0 - PRE_EMPHASIS)
    windowed = emphasized * np.hamming(cfg.frame_length)
    return np.abs(np.fft.rfft(windowed, n=cfg.n_fft, axis=1)) ** 2


def compute_fbank(samples, cfg: FeatureConfig = FeatureConfig(), sample_rate: int | None = None) -> np.ndarray:
    """Mel filterbank energies (linear, not logged) per frame."""
    samples = _check_input(samples, cfg, sample_rate)
    n = n_frames_for(samples.size, cfg)
    frames = frame_signal(samples, cfg.frame_length, cfg.frame_shift, n)
    return power_spectrum(frames, cfg) @ mel_filterbank(cfg).T


def compute_mfcc(samples, cfg: FeatureConfig = FeatureConfig(), sample_rate: int | None = None) -> np.ndarray:
    """13 cepstra per frame with c0 replaced by the raw-frame log energy."""
    samples = _check_input(samples, cfg, sample_rate)
    n = n_frames_for(samples.size, cfg)
    frames = frame_signal(samples, cfg.frame_length, cfg.frame_shift, n)
    log_energy = np.log(np.maximum(np.sum(frames**2, axis=1), LOG_FLOOR))
    fbank = power_spectrum(frames, cfg) @ mel_filterbank(cfg).T
    ceps = dct(np.log(np.maximum(fbank, LOG_FLOOR)), type=2, norm="ortho", axis=1)[:, : cfg.n_cepstra]
    ceps[:, 0] = log_energy
    return ceps


def deltas(x: np.ndarray, window: int = DELTA_WINDOW) -> np.ndarray:
    """Regression deltas over +-window frames with edge replication."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    padded = np.concatenate([np.repeat(x[:1], window, axis=0), x, np.repeat(x[-1:], window, axis=0)])
    denom = 2.0 * sum(k * k for k in range(1, window + 1))
    out = np.zeros_like(x)
    for k in range(1, window + 1):
        out += k * (padded[window + k : window + k + n] - padded[window - k : window - k + n])
    return out / denom


def append_deltas(m: np.ndarray | FeatureMatrix, window: int = DELTA_WINDOW):
    if isinstance(m, FeatureMatrix):
        return FeatureMatrix(m.utterance_id, append_deltas(m.data.astype(np.float64), window), m.config_hash)
    d1 = deltas(m, window)
    return np.hstack([m, d1, deltas(d1, window)])


def yin_cmndf(samples: np.ndarray, cfg: FeatureConfig, tau_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative-mean-normalised difference function per frame, lags 0..tau_max.

    Returns ``(cmndf, frame_energy)``. Each frame analyses ``frame_length``
    samples against copies shifted by up to ``tau_max``; the signal tail is
    zero-padded so every MFCC frame gets a pitch estimate.
    """
    w = cfg.frame_length
    n = n_frames_for(samples.size, cfg)
    padded = np.concatenate([samples, np.zeros(tau_max)])
    seg = frame_signal(padded, w + tau_max, cfg.frame_shift, n)
    n_fft = 1 << (w + tau_max - 1).bit_length()
    spec_a = np.fft.rfft(seg[:, :w], n=n_fft, axis=1)
    spec_s = np.fft.rfft(seg, n=n_fft, axis=1)
    corr = np.fft.irfft(np.conj(spec_a) * spec_s, n=n_fft, axis=1)[:, : tau_max + 1]
    csum = np.concatenate([np.zeros((n, 1)), np.cumsum(seg**2, axis=1)], axis=1)
    e0 = csum[:, w]
    lags = np.arange(tau_max + 1)
    e_tau = csum[:, lags + w] - csum[:, lags]
    diff = np.maximum(e0[:, None] + e_tau - 2.0 * corr, 0.0)
    diff[:, 0] = 0.0
    running = np.cumsum(diff[:, 1:], axis=1)
    cmndf = np.ones_like(diff)
    ok = running > 1e-12 * np.maximum(e0[:, None], 1.0)
    cmndf[:, 1:] = np.where(ok, diff[:, 1:] * lags[1:] / np.where(ok, running, 1.0), 1.0)
    return cmndf, e0


def compute_pitch(samples, cfg: FeatureConfig = FeatureConfig(), sample_rate: int | None = None) -> np.ndarray:
    """(voicing score, log-F0, delta log-F0) per frame from a YIN-style search over 60-400 Hz."""
    samples = _check_input(samples, cfg, sample_rate)
    sr = cfg.sample_rate_hz
    tau_min = int(np.floor(sr / F0_MAX_HZ))
    tau_max = int(np.ceil(sr / F0_MIN_HZ))
    cmndf, energy = yin_cmndf(samples, cfg, tau_max)
    n = cmndf.shape[0]
    band = cmndf[:, tau_min : tau_max + 1]

    # first dip below threshold, then slide down to its local minimum
    below = band < YIN_THRESHOLD
    has_dip = below.any(axis=1)
    first = np.argmax(below, axis=1)
    rising = np.concatenate([band[:, 1:] >= band[:, :-1], np.ones((n, 1), bool)], axis=1)
    after = np.arange(band.shape[1])[None, :] >= first[:, None]
    local_min = np.argmax(rising & after, axis=1)
    best = np.where(has_dip, local_min, np.argmin(band, axis=1))

    rows = np.arange(n)
    tau = best + tau_min
    d_best = cmndf[rows, tau]
    # parabolic refinement of the lag
    left = cmndf[rows, np.maximum(tau - 1, 1)]
    right = cmndf[rows, np.minimum(tau + 1, tau_max)]
    curv = left - 2.0 * d_best + right
    shift = np.where(np.abs(curv) > 1e-12, 0.5 * (left - right) / np.where(np.abs(curv) > 1e-12, curv, 1.0), 0.0)
    period = tau + np.clip(shift, -0.5, 0.5)

    silent = energy <= LOG_FLOOR * cfg.frame_length
    voicing = np.where(silent, 0.0, np.clip(1.0 - d_best, 0.0, 1.0))
    log_f0 = np.log(sr / period)

    voiced = voicing >= VOICED
    if voiced.any():
        idx = np.flatnonzero(voiced)
        log_f0 = np.interp(np.arange(n), idx, log_f0[idx])
    else:
        log_f0 = np.full(n, 0.5 * (np.log(F0_MIN_HZ) + np.log(F0_MAX_HZ)))
    return np.column_stack([voicing, log_f0, deltas(log_f0[:, None])[:, 0]])


def features_from_samples(samples, cfg: FeatureConfig = FeatureConfig(), sample_rate: int | None = None) -> np.ndarray:
    ceps = compute_mfcc(samples, cfg, sample_rate)
    if cfg.cmn:
        ceps = ceps - ceps.mean(axis=0, keepdims=True)
    parts = [append_deltas(ceps) if cfg.add_deltas else ceps]
    if cfg.add_pitch:
        parts.append(compute_pitch(samples, cfg, sample_rate))
    return np.hstack(parts)


def extract_features(
    rec: UtteranceRecord,
    cfg: FeatureConfig = FeatureConfig(),
    cache_dir: str | os.PathLike | None = None,
) -> FeatureMatrix:
    """Features for one manifest record, served from / written to the cache when given."""
    chash = cfg.hash()
    if cache_dir is not None:
        path = cache_path(cache_dir, rec.utterance_id, chash)
        if path.is_file():
            return read_feature_file(path, rec.utterance_id, chash)
    try:
        data = features_from_samples(read_wav(rec.audio_path, cfg.sample_rate_hz), cfg)
    except Exception as exc:
        raise FeatureError(rec.utterance_id, exc) from exc
    fm = FeatureMatrix(rec.utterance_id, data, chash)
    if cache_dir is not None:
        write_feature_file(cache_path(cache_dir, rec.utterance_id, chash), fm)
    return fm


def cache_path(cache_dir: str | os.PathLike, utterance_id: str, config_hash: str) -> Path:
    return Path(cache_dir) / "features" / f"{utterance_id}.{config_hash}"


def encode_features(fm: FeatureMatrix) -> bytes:
    header = CACHE_MAGIC + struct.pack("<HII", CACHE_VERSION, fm.n_frames, fm.dim)
    return header + fm.data.astype("<f4").tobytes()


def decode_features(blob: bytes, utterance_id: str = "", config_hash: str = "") -> FeatureMatrix:
    if blob[:4] != CACHE_MAGIC:
        raise FormatError("not a feature cache file (bad magic)")
    version, n, d = struct.unpack_from("<HII", blob, 4)
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported feature cache version {version}")
    payload = blob[14:]
    if len(payload) != 4 * n * d:
        raise FormatError("truncated feature cache file")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    return FeatureMatrix(utterance_id, data, config_hash)


def atomic_write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{id(blob):x}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def write_feature_file(path: str | os.PathLike, fm: FeatureMatrix) -> None:
    atomic_write(Path(path), encode_features(fm))


def read_feature_file(path: str | os.PathLike, utterance_id: str = "", config_hash: str = "") -> FeatureMatrix:
    return decode_features(Path(path).read_bytes(), utterance_id, config_hash)
