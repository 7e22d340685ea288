import json
import subprocess
import sys

import pytest

from conftest import tiny_spec
from lfekit.cli import main
from lfekit.synth import SynthLanguage, synth_experiment


@pytest.fixture
def config_path(tmp_path):
    synth_experiment(tiny_spec(), 0, tmp_path)
    return tmp_path / "config.json"


def test_run_writes_outputs(tmp_path, capsys):
    langs = [SynthLanguage(n, fam) for n, fam in (("A", "f1"), ("B", "f1"), ("C", "f2"), ("D", "f2"))]
    synth_experiment(tiny_spec(languages=langs), 0, tmp_path)
    out = tmp_path / "output"
    assert main(["run", "--config", str(tmp_path / "config.json"), "--threads", "2"]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["fig_abx.svg", "fig_family.svg", "provenance.json", "report.csv", "report.json", "report.md"]
    prov = json.loads((out / "provenance.json").read_text())
    assert prov["cache_counters"]["abx.computed"] == 16
    assert set(prov["cache_keys"]) >= {"ubm/A", "tv/B", "abx/A/B"}
    assert "# LFE scores" in capsys.readouterr().out
    assert len(json.loads((out / "report.json").read_text())["rows"]) == 6


def test_two_language_run_omits_family_figure(config_path):
    assert main(["run", "--config", str(config_path)]) == 0
    out = config_path.parent / "output"
    assert not (out / "fig_family.svg").exists()
    assert any("fig_family.svg" in n for n in json.loads((out / "report.json").read_text())["notices"])


def test_run_format_subset_and_empty(config_path, tmp_path):
    assert main(["run", "--config", str(config_path), "--formats", "csv", "--output", str(tmp_path / "o1")]) == 0
    assert sorted(p.name for p in (tmp_path / "o1").iterdir()) == ["provenance.json", "report.csv", "report.json"]
    assert main(["run", "--config", str(config_path), "--formats", "", "--output", str(tmp_path / "o2")]) == 0
    assert sorted(p.name for p in (tmp_path / "o2").iterdir()) == ["provenance.json", "report.json"]


def test_warm_rerun_report_identical_but_timestamp(config_path, tmp_path):
    main(["run", "--config", str(config_path), "--output", str(tmp_path / "a")])
    main(["run", "--config", str(config_path), "--output", str(tmp_path / "b")])
    a = json.loads((tmp_path / "a" / "report.json").read_text())
    b = json.loads((tmp_path / "b" / "report.json").read_text())
    a["provenance"].pop("created"), b["provenance"].pop("created")
    assert a == b
    warm = json.loads((tmp_path / "b" / "provenance.json").read_text())["cache_counters"]
    assert not any(k.endswith(".computed") for k in warm)
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()


def test_stage_subcommands(config_path, capsys):
    cfg = str(config_path)
    assert main(["features", "--config", cfg, "--language", "A"]) == 0
    assert main(["train-ubm", "--config", cfg]) == 0
    assert main(["train-tv", "--config", cfg]) == 0
    assert main(["extract", "--config", cfg, "--test", "A", "--train", "B"]) == 0
    assert main(["abx", "--config", cfg]) == 0
    assert main(["lfe", "--config", cfg, "--pair", "A", "B"]) == 0
    out = capsys.readouterr().out
    assert "Ts(A)Tr(B)" in out and "LFE=" in out and "R=3" in out


def test_report_subcommand(config_path, tmp_path):
    main(["run", "--config", str(config_path), "--formats", "", "--output", str(tmp_path / "r")])
    assert main(["report", "--report", str(tmp_path / "r" / "report.json"), "--formats", "markdown"]) == 0
    assert (tmp_path / "r" / "report.md").is_file()


def test_synth_subcommand(tmp_path):
    spec = tiny_spec().to_dict()
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert main(["synth", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "x"), "--seed", "4"]) == 0
    assert (tmp_path / "x" / "config.json").is_file()
    assert main(["synth", "--preset", "control", "--out", str(tmp_path / "y")]) == 0


def test_failures_exit_nonzero_with_stage(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    synth_experiment(tiny_spec(ubm_components=500), 0, tmp_path)
    assert main(["run", "--config", str(tmp_path / "config.json")]) == 3
    err = capsys.readouterr().err
    assert "stage train-ubm failed for A" in err and "cache key" in err
    assert main(["lfe", "--config", str(tmp_path / "config.json"), "--pair", "A", "Q"]) == 2
    with pytest.raises(SystemExit):
        main(["run", "--config", "x", "--formats", "pdf"])


def test_console_entry_point(config_path):
    proc = subprocess.run([sys.executable, "-m", "lfekit.cli", "abx", "--config", str(config_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "triplets" in proc.stdout
