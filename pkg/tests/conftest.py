import numpy as np
import pytest
from hypothesis import settings

from fedscsn.nn.rng import Rng
from fedscsn.preprocess.pipeline import preprocess_trials
from fedscsn.synth.generate import SynthDatasetSpec, generate_dataset

settings.register_profile("default", deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return Rng(42, "test")


@pytest.fixture(scope="session")
def small_four_class():
    """Preprocessed 4-class set, 10 trials per class across 5 subjects."""
    spec = SynthDatasetSpec("tiny4", ["left_hand", "right_hand", "feet", "rest"], trials_per_class=10, seed=7)
    return preprocess_trials(*generate_dataset(spec))


@pytest.fixture(scope="session")
def small_two_class():
    spec = SynthDatasetSpec("tiny2", ["left_hand", "right_hand"], trials_per_class=10, seed=8)
    return preprocess_trials(*generate_dataset(spec))


def random_batch(rng: Rng, b: int, shape=(17, 600)) -> np.ndarray:
    return rng.normal((b, *shape)).astype(np.float32)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one "CRITERION n: PASS/FAIL detail" line for the terminal summary."""
    def record(n: int, passed: bool, detail: str) -> bool:
        line = f"CRITERION {n}: {'PASS' if passed else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
