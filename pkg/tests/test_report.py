import itertools

import numpy as np
import pytest

from lfekit.config import ExperimentConfig, LanguageSpec, StatsConfig
from lfekit.errors import LfeError
from lfekit.report import LfeReport, build_report, emit_report, report_csv, report_markdown
from lfekit.stats import LfeScore, bonferroni

LANGS = ["en", "de", "nl", "fr", "es", "it", "fi", "et", "hu"]
FAMILIES = {"en": "ie", "de": "ie", "nl": "ie", "fr": "ie", "es": "ie", "it": "ie", "fi": "ur", "et": "ur", "hu": "ur"}


def make_report(families=FAMILIES, seed=0):
    r = np.random.default_rng(seed)
    cfg = ExperimentConfig([LanguageSpec(n, "x", "y", families.get(n, "")) for n in LANGS],
                           stats=StatsConfig(n_resamples=500))
    rows = []
    for a, b in itertools.combinations(LANGS, 2):
        same = r.uniform(0.1, 0.3)
        diff = same * (1 + r.uniform(-0.1, 0.4))
        rows.append(LfeScore((a, b), same, diff, 100 * (diff - same) / same, p_value=float(r.choice([1e-5, 0.01, 0.3]))))
    return build_report(cfg, rows, [1] * len(rows), {}, version="test", created="2020-01-01T00:00:00+00:00")


def test_36_pairs_and_markdown_shape():
    rep = make_report()
    assert len(rep.rows) == 36
    md = report_markdown(rep)
    table = [line for line in md.splitlines() if line.startswith("|")]
    header, body = table[0], table[2:]
    assert [c.strip() for c in header.strip("|").split("|")][1:] == LANGS[:-1]
    assert [row.split("|")[1].strip() for row in body] == LANGS[1:]
    assert len(body) == 8 and all(len(row.strip("|").split("|")) == 9 for row in body)
    # lower triangle: row i has i filled cells
    for i, row in enumerate(body, start=1):
        cells = [c.strip() for c in row.strip("|").split("|")[1:]]
        assert sum(bool(c) for c in cells) == i


def test_stars_follow_bonferroni():
    rep = make_report()
    p = [r.p_value for r in rep.rows]
    one, two = bonferroni(p, 0.05), bonferroni(p, 0.005)
    for row, s1, s2 in zip(rep.rows, one, two):
        assert row.stars == "*" * (s1 + s2)
        assert row.significant == s1


def test_summary_numbers():
    rep = make_report()
    vals = [r.lfe_percent for r in rep.rows]
    assert rep.overall_mean == pytest.approx(np.mean(vals))
    assert rep.overall_ci.lo <= rep.overall_mean <= rep.overall_ci.hi
    assert rep.overall_ci.unit == "language"
    assert rep.family.same_n + rep.family.diff_n == 36
    assert rep.familiar_mean == pytest.approx(np.mean([r.s_same for r in rep.rows]))
    assert rep.provenance["toolkit_version"] == "test"


def test_csv_one_row_per_pair():
    lines = report_csv(make_report()).splitlines()
    assert lines[0].startswith("language_a,language_b,s_same")
    assert len(lines) == 37


def test_emit_all_formats(tmp_path):
    rep = make_report()
    written = emit_report(rep, tmp_path)
    assert sorted(p.name for p in written) == ["fig_abx.svg", "fig_family.svg", "report.csv", "report.md"]
    svg = (tmp_path / "fig_abx.svg").read_bytes()
    emit_report(rep, tmp_path, {"svg"})
    assert (tmp_path / "fig_abx.svg").read_bytes() == svg


def test_emit_without_families(tmp_path):
    rep = make_report(families={})
    assert rep.family is None
    written = emit_report(rep, tmp_path, {"svg"})
    assert [p.name for p in written] == ["fig_abx.svg"]
    assert any("fig_family.svg" in n for n in rep.notices)


def test_empty_formats_and_errors(tmp_path):
    rep = make_report()
    assert emit_report(rep, tmp_path / "none", set()) == []
    assert not (tmp_path / "none").exists()
    with pytest.raises(ValueError):
        emit_report(rep, tmp_path, {"pdf"})
    with pytest.raises(LfeError):
        emit_report(LfeReport([], []), tmp_path, {"csv"})


def test_json_round_trip(tmp_path):
    rep = make_report()
    (tmp_path / "r.json").write_text(rep.to_json())
    back = LfeReport.load(tmp_path / "r.json")
    assert back.to_json() == rep.to_json()
