"""Command-line entry point ``lfe-kit``.

Every stage can be run on its own; all of them share the cache configured in
the experiment config, so running ``train-ubm`` first and ``run`` later reuses
the trained models.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import load_config
from .errors import LfeError, StageError
from .pipeline import Pipeline
from .report import FORMATS, LfeReport, emit_report, report_markdown
from .synth import SynthSpec, accent_spec, control_pair_spec, native_pair_spec, synth_experiment

log = logging.getLogger("lfekit")

SYNTH_PRESETS = {"native": native_pair_spec, "control": control_pair_spec, "accent": accent_spec}


def parse_formats(text: str) -> set[str]:
    formats = {f.strip() for f in text.split(",") if f.strip()}
    unknown = formats - set(FORMATS)
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown formats {sorted(unknown)}; choose from {','.join(FORMATS)}")
    return formats


def _languages(pipe: Pipeline, chosen: list[str] | None) -> list[str]:
    names = [lang.name for lang in pipe.config.languages]
    for name in chosen or []:
        if name not in names:
            raise LfeError(f"unknown language {name!r}; config has {names}")
    return chosen or names


def _pipeline(args) -> Pipeline:
    cfg = load_config(args.config)
    cfg.validate()
    return Pipeline(cfg, args.threads)


def cmd_features(args) -> None:
    pipe = _pipeline(args)
    for lang in _languages(pipe, args.language):
        for split in ("train", "test"):
            feats, dig = pipe.features(lang, split)
            print(f"{lang}\t{split}\t{len(feats)} utterances\t{sum(f.n_frames for f in feats)} frames\t{dig}")


def cmd_train_ubm(args) -> None:
    pipe = _pipeline(args)
    for lang in _languages(pipe, args.language):
        gmm = pipe.ubm(lang)
        print(f"{lang}\tK={gmm.weights.size}\tloglik={gmm.train_log[-1]:.6f}\t{pipe.ubm_key(lang)}")


def cmd_train_tv(args) -> None:
    pipe = _pipeline(args)
    for lang in _languages(pipe, args.language):
        model = pipe.tv(lang)
        print(f"{lang}\tR={model.rank}\tobjective={model.train_log[-1]:.6f}\t{pipe.tv_key(lang)}")


def _conditions(pipe: Pipeline, args) -> list[tuple[str, str]]:
    tests = _languages(pipe, [args.test] if args.test else None)
    trains = _languages(pipe, [args.train] if args.train else None)
    return [(te, tr) for te in tests for tr in trains]


def cmd_extract(args) -> None:
    pipe = _pipeline(args)
    for te, tr in _conditions(pipe, args):
        cs = pipe.condition(te, tr)
        print(f"Ts({te})Tr({tr})\t{len(cs.utterance_ids)} i-vectors\t{pipe.condition_key(te, tr)}")


def cmd_abx(args) -> None:
    pipe = _pipeline(args)
    for te, tr in _conditions(pipe, args):
        res = pipe.abx(te, tr)
        print(f"Ts({te})Tr({tr})\t{res.error_rate:.6f}\t{res.n_triplets} triplets")


def cmd_lfe(args) -> None:
    pipe = _pipeline(args)
    pairs = [tuple(args.pair)] if args.pair else pipe.pairs()
    for a, b in pairs:
        _languages(pipe, [a, b])
        score, n = pipe.pair_score(a, b)
        print(f"{a}-{b}\ts_same={score.s_same:.6f}\ts_diff={score.s_diff:.6f}\t"
              f"LFE={score.lfe_percent:.3f}%\tp={score.p_value:.4g}\t{n} triplets")


def write_outputs(report: LfeReport, out_dir: Path, formats: set[str], extra_provenance: dict | None = None):
    """Emit the requested formats plus report.json and provenance.json."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = emit_report(report, out_dir, formats)
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    provenance = {**report.provenance, **(extra_provenance or {})}
    (out_dir / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    return written + [out_dir / "report.json", out_dir / "provenance.json"]


def cmd_run(args) -> None:
    pipe = _pipeline(args)
    report = pipe.run()
    # cache counters differ between cold and warm runs, so they stay out of report.json
    extra = {
        "cache_counters": dict(sorted(pipe.counters.items())),
        "cache_keys": {
            **{f"ubm/{n}": pipe.ubm_key(n) for n in report.languages},
            **{f"tv/{n}": pipe.tv_key(n) for n in report.languages},
            **{f"abx/{te}/{tr}": pipe.abx_key(te, tr) for te, tr in sorted(report.conditions)},
        },
    }
    out_dir = Path(args.output or pipe.config.output_dir)
    for path in write_outputs(report, out_dir, args.formats, extra):
        log.info("wrote %s", path)
    print(report_markdown(report), end="")


def cmd_report(args) -> None:
    report = LfeReport.load(args.report)
    out_dir = Path(args.output or Path(args.report).parent)
    for path in emit_report(report, out_dir, args.formats):
        print(path)


def cmd_synth(args) -> None:
    if args.spec:
        spec = SynthSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    else:
        spec = SYNTH_PRESETS[args.preset]()
    cfg = synth_experiment(spec, args.seed, args.out)
    print(Path(args.out) / "config.json")
    log.info("%d synthetic languages written to %s", len(cfg.languages), args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfe-kit", description="Language familiarity effect experiments on i-vectors.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def stage(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--threads", type=int, default=1)
        p.set_defaults(func=fn)
        return p

    for name, fn, help_text in (("features", cmd_features, "extract and cache features"),
                                ("train-ubm", cmd_train_ubm, "train one UBM per language"),
                                ("train-tv", cmd_train_tv, "train one total-variability model per language")):
        stage(name, fn, help_text).add_argument("--language", action="append",
                                                help="restrict to this language (repeatable)")
    for name, fn, help_text in (("extract", cmd_extract, "extract i-vectors for Ts(test)Tr(train)"),
                                ("abx", cmd_abx, "ABX error per condition")):
        p = stage(name, fn, help_text)
        p.add_argument("--test", help="test-set language (default: all)")
        p.add_argument("--train", help="model language (default: all)")
    p = stage("lfe", cmd_lfe, "LFE score and p-value per language pair")
    p.add_argument("--pair", nargs=2, metavar=("A", "B"))
    p = stage("run", cmd_run, "full pipeline and report")
    p.add_argument("--formats", type=parse_formats, default=set(FORMATS), help="subset of csv,markdown,svg")
    p.add_argument("--output", help="override output_dir")

    p = sub.add_parser("report", help="re-emit tables and figures from report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--formats", type=parse_formats, default=set(FORMATS))
    p.add_argument("--output")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write a synthetic experiment (features, manifests, config)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--spec", help="JSON file with SynthSpec fields")
    group.add_argument("--preset", choices=sorted(SYNTH_PRESETS), default="native")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"lfe-kit: stage {exc.stage} failed for {exc.subject} (cache key {exc.cache_key}): {exc.cause}",
              file=sys.stderr)
        return 3
    except LfeError as exc:
        print(f"lfe-kit: {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"lfe-kit: {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
