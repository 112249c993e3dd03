import numpy as np
import pytest

from erpdiff.dataio import SyntheticSpec, generate_synthetic
from erpdiff.epochs import ChannelLayout, EpochSet

FOUR = ("Fz", "Pz", "O1", "O2")


def small_spec(**kw) -> SyntheticSpec:
    base = dict(n_subjects=2, epochs_per_condition=30, channels=FOUR, fs=64.0, epoch_len=64,
                noise_std=1.0, ar_coef=0.5, session_shift=(0.8, 2 / 64), seed=0)
    base.update(kw)
    return SyntheticSpec(**base)


@pytest.fixture(scope="session")
def small_set() -> EpochSet:
    return generate_synthetic(small_spec())


def make_set(data, subjects, sessions, classes, fs=64.0, names=None) -> EpochSet:
    data = np.asarray(data, dtype=np.float32)
    names = names or tuple(f"C{i}" for i in range(data.shape[1]))
    return EpochSet(data, subjects, sessions, classes, fs, ChannelLayout(tuple(names)))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
