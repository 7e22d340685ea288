import numpy as np
import pytest
from hypothesis import settings

from lfekit.corpus import UtteranceRecord

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def make_records(n_speakers, n_utts, duration=5.0, language="en", prefix="s"):
    return [
        UtteranceRecord(f"{prefix}{s:02d}_{u:03d}", f"{prefix}{s:02d}", language, "native", "indo-european",
                        f"audio/{prefix}{s:02d}_{u:03d}.wav", duration)
        for s in range(n_speakers)
        for u in range(n_utts)
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_spec(languages=None, **over):
    """A few seconds of synthetic frames per language; enough to exercise every stage."""
    from lfekit.synth import SynthLanguage, SynthSpec

    params = dict(dim=4, n_components=6, train_speakers=4, train_utts_per_speaker=8, train_frames=60,
                  test_speakers=3, test_utts_per_speaker=4, test_frames=40, ubm_components=4, ubm_iter=3,
                  tv_rank=3, tv_iter=2, n_resamples=200, speaker_rank=2)
    params.update(over)
    langs = languages or [SynthLanguage("A", "fam1"), SynthLanguage("B", "fam2")]
    return SynthSpec(languages=langs, **params)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
