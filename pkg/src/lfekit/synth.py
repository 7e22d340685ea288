"""Synthetic languages written straight into the feature cache.

Each language is a Gaussian mixture over feature space. All languages share a
prototype layout; a language's layout displaces every component mean of the
prototype by N(0, distance^2). Speakers add a constant offset drawn inside a
low-rank subspace that is common to every language, and each utterance draws
its own component proportions around the language weights, so utterances differ
in "phonetic content". Two languages declared with the same ``layout`` use the
same generator; ``test_mix`` interpolates the test-set generator between two
layouts (an accent analogue).
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import (
    AbxConfig,
    ExperimentConfig,
    LanguageSpec,
    StatsConfig,
    TvConfig,
    UbmConfig,
    save_config,
)
from .corpus import UtteranceRecord, write_manifest
from .errors import InvalidSpec
from .features import FeatureConfig, FeatureMatrix, cache_path, write_feature_file


@dataclass
class SynthLanguage:
    name: str
    family: str = ""
    layout: str | None = None  # defaults to the language name
    train_as: str | None = None  # reuse another language's training set
    test_mix: tuple[str, str, float] | None = None  # (layout_a, layout_b, weight of b)

    @property
    def layout_key(self) -> str:
        return self.layout or self.name


@dataclass
class SynthSpec:
    languages: list[SynthLanguage] = field(default_factory=lambda: [SynthLanguage("A"), SynthLanguage("B")])
    dim: int = 12
    n_components: int = 16
    spread: float = 3.0
    distance: float = 1.0
    speaker_rank: int = 3
    speaker_std: float = 0.3
    dirichlet: float = 3.0
    train_speakers: int = 10
    train_utts_per_speaker: int = 35
    train_frames: int = 300
    test_speakers: int = 6
    test_utts_per_speaker: int = 10
    test_frames: int = 200
    # experiment parameters written into the generated config
    ubm_components: int = 16
    ubm_iter: int = 10
    tv_rank: int = 10
    tv_iter: int = 5
    max_triplets: int | None = 2_000_000
    n_resamples: int = 10_000

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        langs = []
        for item in d.pop("languages", []):
            item = dict(item)
            if item.get("test_mix") is not None:
                item["test_mix"] = tuple(item["test_mix"])
            try:
                langs.append(SynthLanguage(**item))
            except TypeError as exc:
                raise InvalidSpec(f"bad synthetic language {item}: {exc}") from exc
        try:
            spec = cls(**d)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from exc
        if langs:
            spec.languages = langs
        return spec

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        names = [lang.name for lang in self.languages]
        if len(names) < 2:
            raise InvalidSpec("a synthetic experiment needs at least 2 languages")
        if len(set(names)) != len(names):
            raise InvalidSpec(f"duplicate language names {names}")
        layouts = {lang.layout_key for lang in self.languages}
        for lang in self.languages:
            if lang.train_as is not None and lang.train_as not in names:
                raise InvalidSpec(f"{lang.name}: train_as refers to unknown language {lang.train_as!r}")
            if lang.test_mix is not None:
                a, b, w = lang.test_mix
                if a not in layouts or b not in layouts:
                    raise InvalidSpec(f"{lang.name}: test_mix refers to unknown layouts {a!r}, {b!r}")
                if not 0.0 <= float(w) <= 1.0:
                    raise InvalidSpec(f"{lang.name}: test_mix weight {w} outside [0, 1]")
        positive = ("dim", "n_components", "speaker_rank", "train_speakers", "train_utts_per_speaker",
                    "train_frames", "test_utts_per_speaker", "test_frames", "ubm_components", "tv_rank")
        for name in positive:
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} must be >= 1")
        if self.test_speakers < 2:
            raise InvalidSpec("test_speakers must be >= 2 for ABX")
        if self.speaker_rank > self.dim:
            raise InvalidSpec("speaker_rank cannot exceed dim")
        if min(self.spread, self.speaker_std, self.dirichlet) <= 0 or self.distance < 0:
            raise InvalidSpec("spread, speaker_std and dirichlet must be > 0, distance >= 0")


@dataclass
class Generator:
    means: np.ndarray  # (C, D)
    weights: np.ndarray  # (C,)
    scales: np.ndarray  # (C, D) within-component standard deviations


def _key(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def _rng(seed: int, *parts) -> np.random.Generator:
    entropy = [int(seed)] + [p if isinstance(p, int) else _key(str(p)) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))


class SyntheticWorld:
    def __init__(self, spec: SynthSpec, seed: int):
        self.spec = spec
        self.seed = seed
        r = _rng(seed, "prototype")
        c, d = spec.n_components, spec.dim
        self.proto = Generator(r.normal(0.0, spec.spread, (c, d)), r.dirichlet(np.full(c, 5.0)),
                               r.uniform(0.6, 1.2, (c, d)))
        self.speaker_basis = np.linalg.qr(r.normal(size=(d, spec.speaker_rank)))[0]

    def layout(self, key: str) -> Generator:
        r = _rng(self.seed, "layout", key)
        shift = r.normal(0.0, self.spec.distance, self.proto.means.shape)
        return Generator(self.proto.means + shift, self.proto.weights, self.proto.scales)

    def generator(self, lang: SynthLanguage, split: str) -> Generator:
        if split == "test" and lang.test_mix is not None:
            a, b, w = lang.test_mix
            ga, gb = self.layout(a), self.layout(b)
            w = float(w)
            return Generator((1 - w) * ga.means + w * gb.means, (1 - w) * ga.weights + w * gb.weights,
                             (1 - w) * ga.scales + w * gb.scales)
        return self.layout(lang.layout_key)

    def utterances(self, gen: Generator, rng: np.random.Generator, n_speakers: int, n_utts: int, n_frames: int):
        """Yield (speaker index, frames) for every utterance."""
        sp = self.spec
        c = sp.n_components
        for s in range(n_speakers):
            offset = self.speaker_basis @ rng.normal(0.0, sp.speaker_std, sp.speaker_rank)
            for _ in range(n_utts):
                mix = rng.dirichlet(sp.dirichlet * c * gen.weights)
                comp = rng.choice(c, size=n_frames, p=mix)
                noise = rng.standard_normal((n_frames, sp.dim))
                yield s, gen.means[comp] + offset + noise * gen.scales[comp]


def synth_experiment(spec: SynthSpec, seed: int, out_dir: str | Path, name: str = "synthetic") -> ExperimentConfig:
    """Write manifests, feature caches and a config for a synthetic experiment.

    Audio paths in the manifests are placeholders; every feature is already in
    the cache, so the pipeline never touches audio.
    """
    spec.validate()
    out = Path(out_dir)
    cache = out / "cache"
    fcfg = FeatureConfig()
    chash = fcfg.hash()
    world = SyntheticWorld(spec, seed)
    frame_s = fcfg.frame_shift_ms / 1000.0
    extra_s = (fcfg.frame_length_ms - fcfg.frame_shift_ms) / 1000.0
    manifests: dict[tuple[str, str], Path] = {}
    splits = {
        "train": (spec.train_speakers, spec.train_utts_per_speaker, spec.train_frames),
        "test": (spec.test_speakers, spec.test_utts_per_speaker, spec.test_frames),
    }
    for lang in spec.languages:
        for split, (n_spk, n_utt, n_frames) in splits.items():
            if split == "train" and lang.train_as is not None:
                continue
            gen = world.generator(lang, split)
            rng = _rng(seed, "data", lang.name, split)
            records = []
            counts: dict[int, int] = {}
            for s, frames in world.utterances(gen, rng, n_spk, n_utt, n_frames):
                spk = f"{lang.name}_{split[:2]}{s:02d}"
                counts[s] = counts.get(s, 0) + 1
                utt = f"{spk}_{counts[s] - 1:03d}"
                write_feature_file(cache_path(cache, utt, chash), FeatureMatrix(utt, frames, chash))
                records.append(UtteranceRecord(
                    utterance_id=utt, speaker_id=spk, language=_lang_code(lang.name), accent="native",
                    family=lang.family, audio_path=f"synthetic/{utt}.wav",
                    duration_s=round(len(frames) * frame_s + extra_s, 6)))
            path = out / "manifests" / f"{lang.name}_{split}.jsonl"
            write_manifest(path, records)
            manifests[(lang.name, split)] = path
    languages = []
    for lang in spec.languages:
        train_from = lang.train_as or lang.name
        languages.append(LanguageSpec(lang.name, str(manifests[(train_from, "train")].resolve()),
                                      str(manifests[(lang.name, "test")].resolve()), lang.family))
    cfg = ExperimentConfig(
        languages=languages,
        features=fcfg,
        ubm=UbmConfig(spec.ubm_components, spec.ubm_iter, seed),
        tv=TvConfig(spec.tv_rank, spec.tv_iter, seed),
        abx=AbxConfig(spec.max_triplets, seed),
        stats=StatsConfig(n_resamples=spec.n_resamples, seed=seed),
        cache_dir=str(cache.resolve()),
        output_dir=str((out / "output").resolve()),
        name=name,
    )
    save_config(cfg, out / "config.json")
    return cfg


def _lang_code(name: str) -> str:
    # manifest language fields are free-form codes; keep synthetic names as they are
    return name.lower() or "xx"


def native_pair_spec(**overrides) -> SynthSpec:
    spec = SynthSpec(languages=[SynthLanguage("A", "fam1"), SynthLanguage("B", "fam2")])
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec


def control_pair_spec(**overrides) -> SynthSpec:
    spec = native_pair_spec(**overrides)
    spec.languages = [SynthLanguage("A", "fam1", layout="shared"), SynthLanguage("B", "fam2", layout="shared")]
    return spec


def accent_spec(weight: float = 0.5, **overrides) -> SynthSpec:
    """Native pair A/B plus an accented pair.

    ``Aacc`` reuses A's training set but its test speakers come from A's layout
    moved towards B by ``weight``; ``Bacc`` mirrors it. The pair (Aacc, Bacc)
    therefore compares the A and B models on accented test sets.
    """
    spec = native_pair_spec(**overrides)
    spec.languages = [
        SynthLanguage("A", "fam1"),
        SynthLanguage("B", "fam2"),
        SynthLanguage("Aacc", "fam1", train_as="A", test_mix=("A", "B", weight)),
        SynthLanguage("Bacc", "fam2", train_as="B", test_mix=("B", "A", weight)),
    ]
    return spec
