"""Utterance manifests, speaker-disjoint splits and a simple energy VAD.

A manifest is a UTF-8 JSON-lines file, one utterance per line, with exactly
the fields of :class:`UtteranceRecord`.
"""

from __future__ import annotations

import json
import os
import re
import wave
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DuplicateUtteranceId,
    EmptyAudio,
    InsufficientData,
    MissingFile,
    RateMismatch,
    SchemaViolation,
)

SAMPLE_RATE = 16000
BALANCE_TOLERANCE = 0.20

_LANG_CODE = re.compile(r"^[a-z]{2,3}$")


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    language: str
    accent: str
    family: str
    audio_path: str
    duration_s: float

    def __post_init__(self):
        for name in ("utterance_id", "speaker_id", "language", "accent", "audio_path"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise SchemaViolation(f"field {name!r} must be a non-empty string")
        if not isinstance(self.family, str):
            raise SchemaViolation("field 'family' must be a string")
        if isinstance(self.duration_s, bool) or not isinstance(self.duration_s, (int, float)):
            raise SchemaViolation("field 'duration_s' must be a number")
        if not self.duration_s > 0:
            raise SchemaViolation(f"duration_s must be > 0, got {self.duration_s}")
        if self.accent != "native":
            if not _LANG_CODE.match(self.accent):
                raise SchemaViolation(f"accent must be 'native' or a language code, got {self.accent!r}")
            if self.accent == self.language:
                raise SchemaViolation("accent must differ from the utterance language")


RECORD_FIELDS = tuple(f.name for f in fields(UtteranceRecord))


@dataclass(frozen=True)
class SplitSpec:
    target_total_duration_s: float
    n_speakers: int
    per_speaker_balance: bool = True
    seed: int = 0


def parse_record(obj: object) -> UtteranceRecord:
    if not isinstance(obj, dict):
        raise SchemaViolation("record is not a key/value object")
    keys = set(obj)
    missing = set(RECORD_FIELDS) - keys
    unknown = keys - set(RECORD_FIELDS)
    if missing:
        raise SchemaViolation(f"missing keys {sorted(missing)}")
    if unknown:
        raise SchemaViolation(f"unknown keys {sorted(unknown)}")
    return UtteranceRecord(**obj)


def load_manifest(path: str | os.PathLike) -> list[UtteranceRecord]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    records = []
    seen = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = parse_record(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SchemaViolation(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            except SchemaViolation as exc:
                raise SchemaViolation(f"{path}:{lineno}: {exc}") from exc
            if rec.utterance_id in seen:
                raise DuplicateUtteranceId(
                    f"{path}:{lineno}: utterance_id {rec.utterance_id!r} "
                    f"already defined on line {seen[rec.utterance_id]}"
                )
            seen[rec.utterance_id] = lineno
            records.append(rec)
    return records


def write_manifest(path: str | os.PathLike, records: Iterable[UtteranceRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
    os.replace(tmp, path)


def by_speaker(records: Iterable[UtteranceRecord]) -> dict[str, list[UtteranceRecord]]:
    groups: dict[str, list[UtteranceRecord]] = defaultdict(list)
    for rec in records:
        groups[rec.speaker_id].append(rec)
    return dict(groups)


def _take_duration(utts: list[UtteranceRecord], quota: float) -> list[UtteranceRecord]:
    # stop at the utterance count whose cumulative duration lands closest to the quota
    chosen, total = [], 0.0
    for rec in utts:
        if total >= quota:
            break
        if total > 0 and abs(total + rec.duration_s - quota) > abs(total - quota):
            break
        chosen.append(rec)
        total += rec.duration_s
    return chosen


def _select(groups, speakers, spec: SplitSpec, rng: np.random.Generator):
    quota = spec.target_total_duration_s / spec.n_speakers
    available = {s: sum(r.duration_s for r in groups[s]) for s in speakers}
    if spec.per_speaker_balance:
        # a speaker can still satisfy the quota within the balance tolerance
        eligible = [s for s in speakers if available[s] >= quota * (1 - BALANCE_TOLERANCE / 2)]
    else:
        eligible = list(speakers)
    if len(eligible) < spec.n_speakers:
        shortfall = {s: max(0.0, quota - available[s]) for s in speakers if s not in eligible}
        raise InsufficientData(
            f"need {spec.n_speakers} speakers with ~{quota:.1f}s each, "
            f"only {len(eligible)} of {len(speakers)} qualify",
            shortfall,
        )
    picked = sorted(rng.choice(eligible, size=spec.n_speakers, replace=False).tolist())
    out = []
    realized = {}
    for s in picked:
        utts = list(groups[s])
        order = rng.permutation(len(utts))
        utts = [utts[i] for i in order]
        chosen = _take_duration(utts, quota)
        realized[s] = sum(r.duration_s for r in chosen)
        out.extend(chosen)
    if spec.per_speaker_balance:
        mean = float(np.mean(list(realized.values())))
        spread = max(realized.values()) - min(realized.values())
        if spread > BALANCE_TOLERANCE * mean:
            raise InsufficientData(
                f"per-speaker durations spread {spread:.1f}s exceeds "
                f"{BALANCE_TOLERANCE:.0%} of mean {mean:.1f}s",
                {s: max(0.0, quota - d) for s, d in realized.items()},
            )
    return picked, out


def make_split(
    records: Sequence[UtteranceRecord],
    spec: SplitSpec,
    train_spec: SplitSpec | None = None,
) -> tuple[list[UtteranceRecord], list[UtteranceRecord]]:
    """Pick a speaker-balanced test set; the remaining speakers form the train set.

    With ``train_spec`` the train set is balanced the same way instead of
    keeping every remaining utterance. Output order follows manifest order.
    """
    if spec.n_speakers < 2:
        raise InsufficientData("a test split needs at least 2 speakers")
    groups = by_speaker(records)
    speakers = sorted(groups)
    if len(speakers) < spec.n_speakers:
        raise InsufficientData(
            f"requested {spec.n_speakers} test speakers from a pool of {len(speakers)}",
            {"<pool>": float(spec.n_speakers - len(speakers))},
        )
    rng = np.random.default_rng(spec.seed)
    test_speakers, test = _select(groups, speakers, spec, rng)
    rest = [s for s in speakers if s not in set(test_speakers)]
    if train_spec is None:
        train = [r for r in records if r.speaker_id in set(rest)]
    else:
        if len(rest) < train_spec.n_speakers:
            raise InsufficientData(
                f"requested {train_spec.n_speakers} train speakers, {len(rest)} remain after the test split",
                {"<pool>": float(train_spec.n_speakers - len(rest))},
            )
        _, train = _select(groups, rest, train_spec, np.random.default_rng(train_spec.seed))
    test_ids = {r.utterance_id for r in test}
    train_ids = {r.utterance_id for r in train}
    return (
        [r for r in records if r.utterance_id in train_ids],
        [r for r in records if r.utterance_id in test_ids],
    )


def read_wav(path: str | os.PathLike, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read 16-bit mono PCM; samples come back as float64 in int16 units."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"audio not found: {path}")
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise SchemaViolation(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise SchemaViolation(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        if wf.getframerate() != sample_rate:
            raise RateMismatch(f"{path}: sample rate {wf.getframerate()} != {sample_rate}")
        raw = wf.readframes(wf.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64)


def write_wav(path: str | os.PathLike, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(samples), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def frame_energy_db(samples: np.ndarray, frame_len: int) -> np.ndarray:
    """Mean-square energy (dB, floored at -100) of consecutive non-overlapping frames."""
    n = len(samples) // frame_len
    frames = np.asarray(samples[: n * frame_len], dtype=np.float64).reshape(n, frame_len)
    return 10.0 * np.log10(np.mean(frames**2, axis=1) + 1e-10)


def energy_vad(
    samples: np.ndarray,
    frame_ms: float = 30.0,
    threshold_db: float = -40.0,
    sample_rate: int = SAMPLE_RATE,
    full_scale: float = 1.0,
) -> list[tuple[float, float]]:
    """Segments of consecutive frames whose energy (dB re. ``full_scale``) exceeds the threshold.

    Pass ``full_scale=32768`` for samples in int16 units.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise EmptyAudio("cannot run VAD on an empty signal")
    frame_len = max(1, int(round(sample_rate * frame_ms / 1000.0)))
    energy = frame_energy_db(samples / full_scale, frame_len)
    active = energy > threshold_db
    segments = []
    start = None
    for i, flag in enumerate(active):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            segments.append((start, i))
            start = None
    if start is not None:
        segments.append((start, len(active)))
    hop = frame_len / sample_rate
    return [(a * hop, b * hop) for a, b in segments]
