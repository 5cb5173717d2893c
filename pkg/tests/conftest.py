import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from pqvae.data import SynthConfig, gen_synthetic_corpus

TINY_SYNTH = SynthConfig(n_states=8, feature_dim=4, n_sequences=24, seq_len_min=30, seq_len_max=70,
                         eval_fraction=0.2, seed=3)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small generated corpus; returns the manifest path."""
    out = tmp_path_factory.mktemp("corpus")
    gen_synthetic_corpus(TINY_SYNTH, out)
    return out / "manifest.tsv"


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
