import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """Three short simulated examples shared by training, metrics and CLI tests."""
    from stereo_aec.dataset import Corpus, DatasetConfig, generate_dataset

    out = tmp_path_factory.mktemp("small_ds")
    cfg = DatasetConfig(utterance_seconds=0.3)
    return generate_dataset(cfg, Corpus(), Corpus(), count=3, seed=7, out_dir=out)


def small_model(variant="dcdm", seed=0):
    """A narrow LCSM with the standard STFT, quick enough for multi-epoch tests."""
    from stereo_aec.model import LcsmConfig, LcsmModel

    return LcsmModel(LcsmConfig(variant, conv_channels=8, n_conv=2, lstm_hidden=8, n_lstm=1),
                     seed=seed)


ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail=""):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}  {detail}".rstrip()
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
