"""Experiment configuration: one JSON document describes a whole run."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import InvalidSpec, MissingFile
from .features import FeatureConfig

PRESETS = {
    # 128 Gaussians / 150-dim i-vectors and 2048 / 400, the two published setups
    "exp1": {"ubm": {"n_components": 128}, "tv": {"rank": 150}},
    "exp2": {"ubm": {"n_components": 2048}, "tv": {"rank": 400}},
}


@dataclass(frozen=True)
class LanguageSpec:
    name: str
    train_manifest: str
    test_manifest: str
    family: str = ""


@dataclass(frozen=True)
class UbmConfig:
    n_components: int = 128
    n_iter: int = 10
    seed: int = 0


@dataclass(frozen=True)
class TvConfig:
    rank: int = 150
    n_iter: int = 5
    seed: int = 0


@dataclass(frozen=True)
class AbxConfig:
    max_triplets: int | None = 2_000_000
    seed: int = 0


@dataclass(frozen=True)
class StatsConfig:
    n_resamples: int = 10_000
    alpha_levels: tuple[float, ...] = (0.05, 0.005)
    seed: int = 0
    paired: bool = True
    ci_level: float = 0.95
    family_ci_level: float = 0.99
    weight_by_triplets: bool = False


@dataclass
class ExperimentConfig:
    languages: list[LanguageSpec]
    features: FeatureConfig = field(default_factory=FeatureConfig)
    ubm: UbmConfig = field(default_factory=UbmConfig)
    tv: TvConfig = field(default_factory=TvConfig)
    abx: AbxConfig = field(default_factory=AbxConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)
    cache_dir: str = "cache"
    output_dir: str = "output"
    name: str = "experiment"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stats"]["alpha_levels"] = list(self.stats.alpha_levels)
        return d

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("cache_dir")
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def language(self, name: str) -> LanguageSpec:
        for lang in self.languages:
            if lang.name == name:
                return lang
        raise KeyError(name)

    @property
    def families(self) -> dict[str, str]:
        return {lang.name: lang.family for lang in self.languages}

    def validate(self, check_files: bool = True) -> None:
        if len(self.languages) < 2:
            raise InvalidSpec(f"need at least 2 languages, got {len(self.languages)}")
        names = [lang.name for lang in self.languages]
        if len(set(names)) != len(names):
            raise InvalidSpec(f"duplicate language names in {names}")
        if check_files:
            for lang in self.languages:
                for path in (lang.train_manifest, lang.test_manifest):
                    if not Path(path).is_file():
                        raise MissingFile(f"{lang.name}: manifest not found: {path}")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, d: dict | None, section: str):
    d = dict(d or {})
    try:
        return cls(**d)
    except TypeError as exc:
        raise InvalidSpec(f"section {section!r}: {exc}") from exc


def config_from_dict(d: dict, base_dir: str | os.PathLike | None = None) -> ExperimentConfig:
    d = dict(d)
    preset = d.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise InvalidSpec(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        d = _merge(PRESETS[preset], d)
    base = Path(base_dir) if base_dir is not None else None

    def resolve(p: str) -> str:
        if base is None or os.path.isabs(p):
            return p
        return str(base / p)

    known = {"languages", "features", "ubm", "tv", "abx", "stats", "cache_dir", "output_dir", "name"}
    unknown = set(d) - known
    if unknown:
        raise InvalidSpec(f"unknown config keys {sorted(unknown)}")
    if "languages" not in d:
        raise InvalidSpec("config has no 'languages' list")
    langs = []
    for item in d["languages"]:
        spec = _build(LanguageSpec, item, "languages")
        langs.append(LanguageSpec(spec.name, resolve(spec.train_manifest), resolve(spec.test_manifest), spec.family))
    stats = dict(d.get("stats") or {})
    if "alpha_levels" in stats:
        stats["alpha_levels"] = tuple(stats["alpha_levels"])
    cache_dir = os.environ.get("LFE_CACHE_DIR") or resolve(d.get("cache_dir", "cache"))
    return ExperimentConfig(
        languages=langs,
        features=_build(FeatureConfig, d.get("features"), "features"),
        ubm=_build(UbmConfig, d.get("ubm"), "ubm"),
        tv=_build(TvConfig, d.get("tv"), "tv"),
        abx=_build(AbxConfig, d.get("abx"), "abx"),
        stats=_build(StatsConfig, stats, "stats"),
        cache_dir=cache_dir,
        output_dir=resolve(d.get("output_dir", "output")),
        name=d.get("name", "experiment"),
    )


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"config not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidSpec(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from exc
    return config_from_dict(raw, path.parent)


def save_config(cfg: ExperimentConfig, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
