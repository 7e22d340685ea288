"""Machine ABX speaker discrimination over i-vector condition sets.

A triplet (a, b, x) has a and x from the same speaker and b from another one.
It counts as an error when x is farther (Euclidean) from a than from b, and as
half an error on an exact tie. Triplets are grouped into cells keyed by the
ordered speaker pair (speaker of a/x, speaker of b).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, FormatError, TooFewSpeakers
from .tvspace import ConditionSet

DEFAULT_MAX_TRIPLETS = 2_000_000


@dataclass(frozen=True)
class Triplet:
    a: str
    b: str
    x: str
    speaker_ax: str
    speaker_b: str


@dataclass
class AbxResult:
    condition: tuple[str, str]
    cells: dict[tuple[str, str], tuple[int, float]] = field(default_factory=dict)  # -> (n_triplets, errors)

    @property
    def n_triplets(self) -> int:
        return sum(n for n, _ in self.cells.values())

    @property
    def errors(self) -> float:
        return sum(e for _, e in self.cells.values())

    @property
    def error_rate(self) -> float:
        n = self.n_triplets
        return self.errors / n if n else float("nan")

    @property
    def macro_error_rate(self) -> float:
        rates = [e / n for n, e in self.cells.values() if n]
        return float(np.mean(rates)) if rates else float("nan")

    def cell_rates(self) -> dict[tuple[str, str], float]:
        return {k: e / n for k, (n, e) in self.cells.items() if n}

    def to_text(self) -> str:
        lines = [
            f"condition\t{self.condition[0]}\t{self.condition[1]}",
            f"n_triplets\t{self.n_triplets}",
            f"error_rate\t{self.error_rate!r}",
            "speaker_ax\tspeaker_b\tn_triplets\terrors",
        ]
        for (s1, s2), (n, e) in sorted(self.cells.items()):
            lines.append(f"{s1}\t{s2}\t{n}\t{e!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AbxResult":
        rows = [line.split("\t") for line in text.splitlines() if line]
        try:
            assert rows[0][0] == "condition" and rows[3][0] == "speaker_ax"
            res = cls((rows[0][1], rows[0][2]))
            for s1, s2, n, e in rows[4:]:
                res.cells[(s1, s2)] = (int(n), float(e))
        except (AssertionError, IndexError, ValueError) as exc:
            raise FormatError(f"malformed ABX report: {exc}") from exc
        if res.n_triplets != int(rows[1][1]):
            raise FormatError("ABX report triplet count does not match its cells")
        return res


def _speaker_index(speaker_ids) -> dict[str, np.ndarray]:
    spk = np.asarray(speaker_ids)
    return {s: np.flatnonzero(spk == s) for s in sorted(set(speaker_ids))}


def cell_sizes(speaker_ids) -> dict[tuple[str, str], int]:
    """Triplet count n1*(n1-1)*n2 for every ordered speaker pair that admits triplets."""
    groups = _speaker_index(speaker_ids)
    sizes = {}
    for s1, i1 in groups.items():
        n1 = len(i1)
        if n1 < 2:
            continue
        for s2, i2 in groups.items():
            if s2 != s1:
                sizes[(s1, s2)] = n1 * (n1 - 1) * len(i2)
    return sizes


def _check(speaker_ids):
    groups = _speaker_index(speaker_ids)
    if len(groups) < 2:
        raise TooFewSpeakers(f"ABX needs at least 2 speakers, got {len(groups)}")
    if not any(len(v) >= 2 for v in groups.values()):
        raise TooFewSpeakers("no speaker has the 2 utterances needed for a and x")
    return groups


def _decode(flat: np.ndarray, i1: np.ndarray, i2: np.ndarray) -> np.ndarray:
    n1, n2 = len(i1), len(i2)
    b = flat % n2
    rest = flat // n2
    a_off = rest % (n1 - 1)
    x = rest // (n1 - 1)
    a = np.where(a_off < x, a_off, a_off + 1)
    return np.column_stack([i1[a], i2[b], i1[x]])


def _quotas(sizes: dict, cap: int) -> dict:
    keys = list(sizes)
    total = sum(sizes.values())
    exact = np.array([cap * sizes[k] / total for k in keys])
    base = np.floor(exact).astype(int)
    order = np.argsort(-(exact - base), kind="stable")
    base[order[: cap - int(base.sum())]] += 1
    return {k: min(int(q), sizes[k]) for k, q in zip(keys, base)}


def enumerate_triplets(ivs: ConditionSet, max_triplets: int | None = None, seed: int = 0) -> np.ndarray:
    """Triplets as an (n, 3) array of row indices (a, b, x) into the condition set.

    Exhaustive when the total fits under ``max_triplets`` (or no cap);
    otherwise a seeded sample without replacement, allocated to speaker-pair
    cells proportionally to their size.
    """
    groups = _check(ivs.speaker_ids)
    sizes = cell_sizes(ivs.speaker_ids)
    total = sum(sizes.values())
    sample = max_triplets is not None and total > max_triplets
    quotas = _quotas(sizes, max_triplets) if sample else sizes
    rng = np.random.default_rng(seed)
    out = []
    for (s1, s2), size in sizes.items():
        if sample:
            flat = np.sort(rng.choice(size, size=quotas[(s1, s2)], replace=False))
        else:
            flat = np.arange(size)
        out.append(_decode(flat, groups[s1], groups[s2]))
    return np.concatenate(out, axis=0) if out else np.zeros((0, 3), dtype=int)


def as_triplets(ivs: ConditionSet, idx: np.ndarray) -> list[Triplet]:
    u, s = ivs.utterance_ids, ivs.speaker_ids
    return [Triplet(u[a], u[b], u[x], s[x], s[b]) for a, b, x in idx]


def score_triplet(iv_a, iv_b, iv_x) -> float:
    a, b, x = (np.asarray(v, dtype=np.float64).ravel() for v in (iv_a, iv_b, iv_x))
    if not (a.shape == b.shape == x.shape):
        raise DimensionMismatch(f"i-vector dims differ: {a.shape}, {b.shape}, {x.shape}")
    da = np.sum((a - x) ** 2)
    db = np.sum((b - x) ** 2)
    if da > db:
        return 1.0
    if da == db:
        return 0.5
    return 0.0


def squared_distances(v: np.ndarray, rows: int = 256) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.empty((v.shape[0], v.shape[0]))
    for i in range(0, v.shape[0], rows):
        out[i : i + rows] = ((v[i : i + rows, None, :] - v[None, :, :]) ** 2).sum(-1)
    return out


def _cell_errors_exhaustive(dist, i1, i2) -> float:
    errors = 0.0
    for xi in range(len(i1)):
        x = i1[xi]
        da = dist[np.delete(i1, xi), x]
        db = np.sort(dist[i2, x])
        less = np.searchsorted(db, da, side="left")
        leq = np.searchsorted(db, da, side="right")
        errors += less.sum() + 0.5 * (leq - less).sum()
    return float(errors)


def abx_error(ivs: ConditionSet, max_triplets: int | None = DEFAULT_MAX_TRIPLETS, seed: int = 0) -> AbxResult:
    """Triplet error table for one condition set; the headline rate is the micro average."""
    groups = _check(ivs.speaker_ids)
    sizes = cell_sizes(ivs.speaker_ids)
    dist = squared_distances(ivs.vectors)
    result = AbxResult(tuple(ivs.condition))
    if max_triplets is None or sum(sizes.values()) <= max_triplets:
        for (s1, s2), size in sizes.items():
            result.cells[(s1, s2)] = (size, _cell_errors_exhaustive(dist, groups[s1], groups[s2]))
        return result
    idx = enumerate_triplets(ivs, max_triplets, seed)
    da = dist[idx[:, 0], idx[:, 2]]
    db = dist[idx[:, 1], idx[:, 2]]
    err = (da > db) + 0.5 * (da == db)
    start = 0
    # triplets come out grouped by cell in ``sizes`` order
    for key, q in _quotas(sizes, max_triplets).items():
        result.cells[key] = (q, float(err[start : start + q].sum()))
        start += q
    return result
