"""LFE report assembly and emission (CSV, markdown matrix, SVG bar charts)."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import LfeError, MissingContrast, MissingFamilyLabel
from .stats import BootstrapCI, FamilyContrast, LfeScore, bootstrap_mean_ci, bonferroni, family_contrast

log = logging.getLogger(__name__)

FORMATS = ("csv", "markdown", "svg")


@dataclass
class LfeReport:
    languages: list[str]
    rows: list[LfeScore]
    conditions: dict[tuple[str, str], float] = field(default_factory=dict)
    families: dict[str, str] = field(default_factory=dict)
    overall_mean: float = float("nan")
    overall_ci: BootstrapCI | None = None
    familiar_mean: float = float("nan")
    unfamiliar_mean: float = float("nan")
    family: FamilyContrast | None = None
    notices: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def row(self, a: str, b: str) -> LfeScore:
        for r in self.rows:
            if set(r.pair) == {a, b}:
                return r
        raise KeyError((a, b))

    def to_dict(self) -> dict:
        return {
            "languages": self.languages,
            "rows": [asdict(r) for r in self.rows],
            "conditions": [[te, tr, v] for (te, tr), v in sorted(self.conditions.items())],
            "families": self.families,
            "overall_mean": self.overall_mean,
            "overall_ci": asdict(self.overall_ci) if self.overall_ci else None,
            "familiar_mean": self.familiar_mean,
            "unfamiliar_mean": self.unfamiliar_mean,
            "family": asdict(self.family) if self.family else None,
            "notices": self.notices,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "LfeReport":
        rows = [LfeScore(**{**r, "pair": tuple(r["pair"])}) for r in d["rows"]]
        fam = d.get("family")
        if fam:
            fam = FamilyContrast(**{**fam, "ci": BootstrapCI(**fam["ci"])})
        ci = d.get("overall_ci")
        return cls(
            languages=list(d["languages"]),
            rows=rows,
            conditions={(te, tr): v for te, tr, v in d.get("conditions", [])},
            families=dict(d.get("families", {})),
            overall_mean=d.get("overall_mean", float("nan")),
            overall_ci=BootstrapCI(**ci) if ci else None,
            familiar_mean=d.get("familiar_mean", float("nan")),
            unfamiliar_mean=d.get("unfamiliar_mean", float("nan")),
            family=fam or None,
            notices=list(d.get("notices", [])),
            provenance=dict(d.get("provenance", {})),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LfeReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def mark_significance(rows: Sequence[LfeScore], alpha_levels: Iterable[float] = (0.05, 0.005)) -> None:
    """Bonferroni over all rows; one more star per stricter level."""
    p = [r.p_value for r in rows]
    levels = sorted(alpha_levels, reverse=True)
    sig = [bonferroni(p, a) for a in levels]
    for i, r in enumerate(rows):
        r.significant = bool(sig[0][i]) if levels else False
        r.stars = "*" * sum(1 for s in sig if s[i])


def build_report(config, rows: list[LfeScore], weights: Sequence[float], errors: dict,
                 version: str = "", created: str | None = None) -> LfeReport:
    st = config.stats
    mark_significance(rows, st.alpha_levels)
    names = [lang.name for lang in config.languages]
    families = config.families
    vals = np.array([r.lfe_percent for r in rows])
    if st.weight_by_triplets:
        w = np.asarray(weights, dtype=np.float64)
    else:
        w = np.ones(len(rows))
    report = LfeReport(
        languages=names,
        rows=rows,
        conditions=dict(errors),
        families=families,
        overall_mean=float(w @ vals / w.sum()),
        familiar_mean=float(w @ np.array([r.s_same for r in rows]) / w.sum()),
        unfamiliar_mean=float(w @ np.array([r.s_diff for r in rows]) / w.sum()),
    )
    by_lang = {n: [r.lfe_percent for r in rows if n in r.pair] for n in names}
    report.overall_ci = bootstrap_mean_ci(by_lang, st.ci_level, st.n_resamples, st.seed, unit="language")
    try:
        report.family = family_contrast({r.pair: r for r in rows}, families, st.family_ci_level,
                                        st.n_resamples, st.seed)
    except (MissingFamilyLabel, MissingContrast) as exc:
        report.notices.append(f"family contrast skipped: {exc}")
    report.provenance = {
        "config_hash": config.hash(),
        "toolkit_version": version,
        "created": created or datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    return report


def _fmt(x: float) -> str:
    return format(x, ".10g")


def report_csv(report: LfeReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["language_a", "language_b", "s_same", "s_diff", "lfe_percent", "p_value", "stars"])
    for r in report.rows:
        w.writerow([r.pair[0], r.pair[1], _fmt(r.s_same), _fmt(r.s_diff), _fmt(r.lfe_percent),
                    _fmt(r.p_value), r.stars])
    return buf.getvalue()


def report_markdown(report: LfeReport) -> str:
    langs = report.languages
    cols, rows = langs[:-1], langs[1:]
    lines = ["| | " + " | ".join(cols) + " |", "|---" * (len(cols) + 1) + "|"]
    for i, rl in enumerate(rows, start=1):
        cells = []
        for j, cl in enumerate(cols):
            if j < i:
                r = report.row(cl, rl)
                cells.append(f"{r.lfe_percent:.2f}{r.stars}")
            else:
                cells.append("")
        lines.append(f"| {rl} | " + " | ".join(cells) + " |")
    out = ["# LFE scores (%)", "", *lines, ""]
    out.append("Stars: Bonferroni-corrected permutation test (* p < .05, ** p < .005).")
    if report.overall_ci is not None:
        ci = report.overall_ci
        out.append(f"Mean LFE {report.overall_mean:.2f} ({ci.level:.0%} CI [{ci.lo:.2f}, {ci.hi:.2f}]).")
    if report.family is not None:
        f = report.family
        out.append(
            f"Same family: M={f.same_mean:.2f}, SD={f.same_sd:.2f}, N={f.same_n}; "
            f"different family: M={f.diff_mean:.2f}, SD={f.diff_sd:.2f}, N={f.diff_n}; "
            f"difference {f.difference:.2f} ({f.ci.level:.0%} CI [{f.ci.lo:.2f}, {f.ci.hi:.2f}])."
        )
    for note in report.notices:
        out.append(f"Note: {note}")
    return "\n".join(out) + "\n"


def _ci_mark(ci: BootstrapCI | None) -> str:
    return "*" if ci is not None and (ci.lo > 0 or ci.hi < 0) else ""


def _bar_svg(path: Path, labels, heights, ylabel, title, mark: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "lfekit"
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.bar(labels, heights, color=["#4c72b0", "#dd8452"])
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if mark:
        top = max(heights)
        ax.plot([0, 0, 1, 1], [top * 1.04, top * 1.08, top * 1.08, top * 1.04], color="k", lw=1)
        ax.text(0.5, top * 1.09, mark, ha="center", va="bottom")
        ax.set_ylim(top=top * 1.2)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_report(report: LfeReport, out_dir: str | os.PathLike, formats: Iterable[str] = FORMATS) -> list[Path]:
    formats = set(formats)
    unknown = formats - set(FORMATS)
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}")
    if not formats:
        return []
    if not report.rows:
        raise LfeError("cannot emit an empty report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        (out / "report.csv").write_text(report_csv(report), encoding="utf-8")
        written.append(out / "report.csv")
    if "markdown" in formats:
        (out / "report.md").write_text(report_markdown(report), encoding="utf-8")
        written.append(out / "report.md")
    if "svg" in formats:
        _bar_svg(out / "fig_abx.svg", ["familiar", "unfamiliar"],
                 [report.familiar_mean, report.unfamiliar_mean],
                 "ABX error rate", f"Mean over {len(report.rows)} pairs", _ci_mark(report.overall_ci))
        written.append(out / "fig_abx.svg")
        if report.family is not None:
            f = report.family
            _bar_svg(out / "fig_family.svg", ["same family", "different family"],
                     [f.same_mean, f.diff_mean], "LFE (%)", "LFE by language family",
                     "**" if _ci_mark(f.ci) else "")
            written.append(out / "fig_family.svg")
        else:
            log.warning("no family contrast available; fig_family.svg omitted")
            if not any("fig_family.svg" in n for n in report.notices):
                report.notices.append("fig_family.svg omitted: no family contrast")
    return written
