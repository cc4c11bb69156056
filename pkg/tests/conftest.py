import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from selconf.dataset import ConfidenceTable, EvalSet, ScoredRecord

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def make_table(conf, correct, name="t"):
    ids = tuple(f"r{i}" for i in range(len(conf)))
    return ConfidenceTable(ids, np.asarray(conf, dtype=float), np.asarray(correct), name)


def make_set(logits, labels, features=None, passes=None, prefix="r"):
    logits = np.asarray(logits, dtype=float)
    n, k = logits.shape
    if features is None:
        features = np.zeros((n, 2))
    features = np.asarray(features, dtype=float)
    recs = [
        ScoredRecord(
            f"{prefix}{i}",
            features[i],
            logits[i],
            int(labels[i]),
            None if passes is None else passes[i],
        )
        for i in range(n)
    ]
    return EvalSet(tuple(recs), k, features.shape[1])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> one-line verdict, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
