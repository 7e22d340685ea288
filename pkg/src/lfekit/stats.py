"""LFE scores, Fisher-Pitman permutation tests, Bonferroni and bootstrap intervals."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateSame,
    EmptyGroup,
    LengthMismatch,
    MissingContrast,
    MissingFamilyLabel,
    TooFewUnits,
)

DEFAULT_RESAMPLES = 10_000
STAR_LEVELS = ((0.005, "**"), (0.05, "*"))
# resamples whose |statistic| is within this relative margin of the observed one count as ties
TIE_RTOL = 1e-9


@dataclass
class LfeScore:
    pair: tuple[str, str]
    s_same: float
    s_diff: float
    lfe_percent: float
    p_value: float = float("nan")
    significant: bool = False
    stars: str = ""


@dataclass
class PermutationTestResult:
    statistic: float
    p_value: float
    n_resamples: int
    paired: bool
    seed: int | None
    exhaustive: bool = False


@dataclass
class BootstrapCI:
    level: float
    lo: float
    hi: float
    n_resamples: int
    unit: str
    seed: int
    estimate: float = float("nan")


def lfe_score(e_aa: float, e_bb: float, e_ab: float, e_ba: float, pair: tuple[str, str] = ("A", "B")) -> LfeScore:
    """Relative increase (percent) of the unfamiliar over the familiar ABX error."""
    for name, v in (("e_aa", e_aa), ("e_bb", e_bb), ("e_ab", e_ab), ("e_ba", e_ba)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}={v} is not an error rate in [0, 1]")
    s_same = (e_aa + e_bb) / 2.0
    s_diff = (e_ab + e_ba) / 2.0
    if s_same <= 0.0:
        raise DegenerateSame("familiar error is 0, the relative increase is undefined")
    return LfeScore(tuple(pair), s_same, s_diff, 100.0 * (s_diff - s_same) / s_same)


def _count_extreme(stats: np.ndarray, observed: float) -> int:
    thr = abs(observed)
    return int(np.count_nonzero(np.abs(stats) >= thr - TIE_RTOL * max(thr, 1e-300)))


def fisher_pitman(
    group_same: Sequence[float],
    group_diff: Sequence[float],
    paired: bool = False,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int | None = 0,
    exhaustive: bool = False,
) -> PermutationTestResult:
    """Two-tailed permutation test on the difference of means (diff - same).

    Unpaired: group labels are shuffled over the pooled scores. Paired: signs of
    the per-unit differences are flipped. Monte-Carlo p-values use the add-one
    estimator; ``exhaustive=True`` enumerates every relabelling instead.
    """
    same = np.asarray(group_same, dtype=np.float64)
    diff = np.asarray(group_diff, dtype=np.float64)
    if same.size == 0 or diff.size == 0:
        raise EmptyGroup("both groups need at least one score")
    if paired:
        if same.size != diff.size:
            raise LengthMismatch(f"paired groups differ in length: {same.size} vs {diff.size}")
        d = diff - same
        observed = float(d.mean())
        if exhaustive:
            signs = np.array(list(itertools.product((1.0, -1.0), repeat=d.size)))
            hits = _count_extreme(signs @ d / d.size, observed)
            return PermutationTestResult(observed, hits / len(signs), len(signs), True, None, True)
        rng = np.random.default_rng(seed)
        hits = 0
        for chunk in _chunks(n_resamples):
            signs = rng.choice((-1.0, 1.0), size=(chunk, d.size))
            hits += _count_extreme(signs @ d / d.size, observed)
        return PermutationTestResult(observed, (1 + hits) / (1 + n_resamples), n_resamples, True, seed)

    pooled = np.concatenate([same, diff])
    n_same, n = same.size, pooled.size
    observed = float(diff.mean() - same.mean())
    total = pooled.sum()
    if exhaustive:
        hits = count = 0
        for combo in itertools.combinations(range(n), n_same):
            s = pooled[list(combo)].sum()
            stat = (total - s) / (n - n_same) - s / n_same
            hits += _count_extreme(np.array([stat]), observed)
            count += 1
        return PermutationTestResult(observed, hits / count, count, False, None, True)
    rng = np.random.default_rng(seed)
    hits = 0
    for chunk in _chunks(n_resamples):
        perm = rng.permuted(np.broadcast_to(pooled, (chunk, n)), axis=1)
        s = perm[:, :n_same].sum(1)
        hits += _count_extreme((total - s) / (n - n_same) - s / n_same, observed)
    return PermutationTestResult(observed, (1 + hits) / (1 + n_resamples), n_resamples, False, seed)


def _chunks(n: int, size: int = 2048):
    while n > 0:
        yield min(size, n)
        n -= size


def bonferroni(p_values: Sequence[float], alpha: float = 0.05) -> list[bool]:
    m = len(p_values)
    if m == 0:
        return []
    return [p <= alpha / m for p in p_values]


def stars(p_values: Sequence[float], levels=STAR_LEVELS) -> list[str]:
    """Bonferroni-corrected significance marks ('**' at 0.005, '*' at 0.05 by default)."""
    out = [""] * len(p_values)
    for alpha, mark in sorted(levels, reverse=True):
        for i, sig in enumerate(bonferroni(p_values, alpha)):
            if sig:
                out[i] = mark
    return out


def _percentile(samples: np.ndarray, level: float) -> tuple[float, float]:
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(samples, [tail, 1.0 - tail])
    return float(lo), float(hi)


def bootstrap_mean_ci(
    values_by_unit: Mapping[str, Sequence[float] | float],
    level: float = 0.95,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    unit: str = "unit",
) -> BootstrapCI:
    """Percentile CI for the mean of all scores, resampling units with replacement."""
    units = sorted(values_by_unit)
    if len(units) < 2:
        raise TooFewUnits(f"bootstrap needs at least 2 units, got {len(units)}")
    vals = [np.atleast_1d(np.asarray(values_by_unit[u], dtype=np.float64)) for u in units]
    sums = np.array([v.sum() for v in vals])
    counts = np.array([v.size for v in vals], dtype=np.float64)
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(units), size=(n_resamples, len(units)))
    s, c = sums[draws].sum(1), counts[draws].sum(1)
    means = np.divide(s, c, out=np.full(n_resamples, np.nan), where=c > 0)
    means = means[np.isfinite(means)]
    lo, hi = _percentile(means, level)
    return BootstrapCI(level, lo, hi, n_resamples, unit, seed, float(sums.sum() / counts.sum()))


@dataclass
class FamilyContrast:
    same_mean: float
    same_sd: float
    same_n: int
    diff_mean: float
    diff_sd: float
    diff_n: int
    ci: BootstrapCI  # on diff_mean - same_mean

    @property
    def difference(self) -> float:
        return self.diff_mean - self.same_mean


def _sd(x: np.ndarray) -> float:
    return float(x.std(ddof=1)) if x.size > 1 else 0.0


def family_contrast(
    scores: Mapping[tuple[str, str], float | LfeScore],
    families: Mapping[str, str],
    level: float = 0.99,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> FamilyContrast:
    """Same-family vs different-family pair scores, with a bootstrap CI on their gap.

    Each replicate resamples languages with replacement inside every family; a
    pair enters with weight count(l1) * count(l2). Replicates in which either
    group is empty are discarded.
    """
    pairs = list(scores)
    vals = np.array([s.lfe_percent if isinstance(s, LfeScore) else float(s) for s in scores.values()])
    langs = sorted({lang for p in pairs for lang in p})
    for lang in langs:
        if not families.get(lang):
            raise MissingFamilyLabel(f"language {lang!r} has no family label")
    same = np.array([families[a] == families[b] for a, b in pairs])
    if same.all() or not same.any():
        raise MissingContrast("need both same-family and different-family pairs")

    lang_pos = {lang: i for i, lang in enumerate(langs)}
    pa = np.array([lang_pos[a] for a, _ in pairs])
    pb = np.array([lang_pos[b] for _, b in pairs])
    by_family: dict[str, list[int]] = {}
    for lang in langs:
        by_family.setdefault(families[lang], []).append(lang_pos[lang])

    rng = np.random.default_rng(seed)
    gaps = []
    for _ in range(n_resamples):
        counts = np.zeros(len(langs))
        for members in by_family.values():
            np.add.at(counts, rng.choice(members, size=len(members)), 1.0)
        w = counts[pa] * counts[pb]
        ws, wd = w[same].sum(), w[~same].sum()
        if ws == 0 or wd == 0:
            continue
        gaps.append((w[~same] @ vals[~same]) / wd - (w[same] @ vals[same]) / ws)
    if not gaps:
        raise MissingContrast("no bootstrap replicate contained both groups")
    lo, hi = _percentile(np.array(gaps), level)
    s_vals, d_vals = vals[same], vals[~same]
    ci = BootstrapCI(level, lo, hi, n_resamples, "language-within-family", seed,
                     float(d_vals.mean() - s_vals.mean()))
    return FamilyContrast(float(s_vals.mean()), _sd(s_vals), int(s_vals.size),
                          float(d_vals.mean()), _sd(d_vals), int(d_vals.size), ci)
