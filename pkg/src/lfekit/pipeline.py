"""End-to-end orchestration with a content-addressed cache.

Every stage result is stored under a key derived from the hashes of its inputs
and its own configuration, so a rerun only recomputes what changed. Thread
count never enters a key: results are identical for any ``threads`` value.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from collections import Counter
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .abx import AbxResult, abx_error
from .config import ExperimentConfig
from .corpus import UtteranceRecord, load_manifest
from .errors import LfeError, StageError
from .features import (
    FeatureMatrix,
    atomic_write,
    cache_path,
    encode_features,
    extract_features,
)
from .report import LfeReport, build_report
from .stats import LfeScore, fisher_pitman, lfe_score
from .tvspace import (
    ConditionSet,
    TvModel,
    accumulate_stats,
    decode_condition,
    decode_tv,
    encode_condition,
    encode_tv,
    extract_condition,
    train_tv,
)
from .ubm import DiagGmm, decode_gmm, encode_gmm, train_ubm

log = logging.getLogger(__name__)

CACHE_SCHEMA = 1


def digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


class Pipeline:
    """Lazily computes and caches every stage of one experiment."""

    def __init__(self, config: ExperimentConfig, threads: int = 1):
        self.config = config
        self.threads = max(1, int(threads))
        self.cache_dir = Path(config.cache_dir)
        self.counters: Counter = Counter()
        self._records: dict[tuple[str, str], list[UtteranceRecord]] = {}
        self._feats: dict[tuple[str, str], tuple[list[FeatureMatrix], str]] = {}
        self._memo: dict[str, object] = {}

    # -- bookkeeping -------------------------------------------------------
    def _hit(self, stage: str):
        self.counters[f"{stage}.hit"] += 1

    def _computed(self, stage: str):
        self.counters[f"{stage}.computed"] += 1

    def _stage(self, stage: str, subject: str, key: str, fn):
        try:
            return fn()
        except StageError:
            raise
        except (LfeError, ValueError, OSError, np.linalg.LinAlgError) as exc:
            raise StageError(stage, subject, key, exc) from exc

    def _cached_blob(self, stage: str, key: str, suffix: str, compute, encode, decode):
        if key in self._memo:
            return self._memo[key]
        path = self.cache_dir / stage / f"{key}.{suffix}"
        if path.is_file():
            self._hit(stage)
            value = decode(path.read_bytes())
        else:
            value = compute()
            atomic_write(path, encode(value))
            self._computed(stage)
            # re-read what was written so cold and warm runs see identical values
            value = decode(path.read_bytes())
        self._memo[key] = value
        return value

    # -- stages ------------------------------------------------------------
    def records(self, lang: str, split: str) -> list[UtteranceRecord]:
        if (lang, split) not in self._records:
            spec = self.config.language(lang)
            path = spec.train_manifest if split == "train" else spec.test_manifest
            self._records[(lang, split)] = self._stage("manifest", f"{lang}/{split}", path,
                                                       lambda: load_manifest(path))
        return self._records[(lang, split)]

    def features(self, lang: str, split: str) -> tuple[list[FeatureMatrix], str]:
        """Feature matrices of one split plus a digest of their exact bytes."""
        if (lang, split) in self._feats:
            return self._feats[(lang, split)]
        cfg = self.config.features
        chash = cfg.hash()
        feats, parts = [], []
        for rec in self.records(lang, split):
            path = cache_path(self.cache_dir, rec.utterance_id, chash)
            existed = path.is_file()
            fm = self._stage("features", f"{lang}/{split}/{rec.utterance_id}", chash,
                             lambda rec=rec: extract_features(rec, cfg, self.cache_dir))
            self._hit("features") if existed else self._computed("features")
            feats.append(fm)
            parts.append([rec.utterance_id, hashlib.sha256(encode_features(fm)).hexdigest()])
        out = (feats, digest(parts))
        self._feats[(lang, split)] = out
        return out

    def ubm_key(self, lang: str) -> str:
        _, fdig = self.features(lang, "train")
        return digest({"stage": "ubm", "schema": CACHE_SCHEMA, "features": fdig,
                       "cfg": asdict(self.config.ubm)})

    def ubm(self, lang: str) -> DiagGmm:
        key = self.ubm_key(lang)
        cfg = self.config.ubm

        def compute():
            feats, _ = self.features(lang, "train")
            frames = np.concatenate([fm.data for fm in feats], axis=0).astype(np.float64)
            log.info("training UBM for %s: %d frames, K=%d", lang, frames.shape[0], cfg.n_components)
            return train_ubm(frames, cfg.n_components, cfg.n_iter, cfg.seed, self.threads)

        return self._stage("train-ubm", lang, key, lambda: self._cached_blob(
            "ubm", key, "lfeg", compute, encode_gmm, lambda b: decode_gmm(b)[0]))

    def tv_key(self, lang: str) -> str:
        return digest({"stage": "tv", "schema": CACHE_SCHEMA, "ubm": self.ubm_key(lang),
                       "cfg": asdict(self.config.tv)})

    def tv(self, lang: str) -> TvModel:
        key = self.tv_key(lang)
        cfg = self.config.tv

        def compute():
            ubm = self.ubm(lang)
            feats, _ = self.features(lang, "train")
            stats = [accumulate_stats(ubm, fm, threads=self.threads) for fm in feats]
            log.info("training T for %s: %d utterances, R=%d", lang, len(stats), cfg.rank)
            return train_tv(ubm, stats, cfg.rank, cfg.n_iter, cfg.seed, self.threads)

        return self._stage("train-tv", lang, key, lambda: self._cached_blob(
            "tv", key, "lfet", compute, encode_tv, decode_tv))

    def condition_key(self, test: str, train: str) -> str:
        _, fdig = self.features(test, "test")
        return digest({"stage": "extract", "schema": CACHE_SCHEMA, "tv": self.tv_key(train),
                       "test": fdig, "condition": [test, train]})

    def condition(self, test: str, train: str) -> ConditionSet:
        key = self.condition_key(test, train)

        def compute():
            model = self.tv(train)
            feats, _ = self.features(test, "test")
            speakers = [r.speaker_id for r in self.records(test, "test")]
            return extract_condition(model, feats, speakers, (test, train),
                                     self.config.features.hash(), self.threads)

        return self._stage("extract", f"Ts({test})Tr({train})", key, lambda: self._cached_blob(
            "ivectors", key, "lfei", compute, encode_condition, decode_condition))

    def abx_key(self, test: str, train: str) -> str:
        return digest({"stage": "abx", "schema": CACHE_SCHEMA, "ivectors": self.condition_key(test, train),
                       "cfg": asdict(self.config.abx)})

    def abx(self, test: str, train: str) -> AbxResult:
        key = self.abx_key(test, train)
        cfg = self.config.abx
        # the sampling seed depends only on the test set, so all four conditions
        # of a pair score the very same triplets
        compute = lambda: abx_error(self.condition(test, train), cfg.max_triplets, cfg.seed)  # noqa: E731
        return self._stage("abx", f"Ts({test})Tr({train})", key, lambda: self._cached_blob(
            "abx", key, "txt", compute, lambda r: r.to_text().encode(),
            lambda b: AbxResult.from_text(b.decode())))

    def pair_score(self, a: str, b: str) -> tuple[LfeScore, int]:
        """LFE score and permutation p-value for one language pair (unordered)."""
        res = {(te, tr): self.abx(te, tr) for te in (a, b) for tr in (a, b)}
        try:
            score = lfe_score(res[a, a].error_rate, res[b, b].error_rate,
                              res[a, b].error_rate, res[b, a].error_rate, (a, b))
        except LfeError as exc:
            raise StageError("lfe", f"{a}-{b}", self.abx_key(a, b), exc) from exc
        familiar, unfamiliar = [], []
        for test, other in ((a, b), (b, a)):
            fam = res[test, test].cell_rates()
            unf = res[test, other].cell_rates()
            for cell in sorted(fam):
                if cell in unf:
                    familiar.append(fam[cell])
                    unfamiliar.append(unf[cell])
        st = self.config.stats
        test_res = fisher_pitman(familiar, unfamiliar, paired=st.paired,
                                 n_resamples=st.n_resamples, seed=st.seed)
        score.p_value = test_res.p_value
        n_triplets = sum(r.n_triplets for r in res.values())
        return score, n_triplets

    def pairs(self) -> list[tuple[str, str]]:
        names = [lang.name for lang in self.config.languages]
        return list(itertools.combinations(names, 2))

    def run(self) -> LfeReport:
        rows, weights, errors = [], [], {}
        for a, b in self.pairs():
            score, n = self.pair_score(a, b)
            rows.append(score)
            weights.append(n)
            for te in (a, b):
                for tr in (a, b):
                    errors[(te, tr)] = self.abx(te, tr).error_rate
        return build_report(self.config, rows, weights, errors, version=__version__)


def run_pipeline(config: ExperimentConfig, threads: int = 1) -> LfeReport:
    return Pipeline(config, threads).run()
