import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from uncertain_ner.tagger import TaggerConfig, init_model
from uncertain_ner.tagspace import LabelScheme

settings.register_profile("default", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=300, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture
def scheme_xy():
    return LabelScheme(("X", "Y"))


@pytest.fixture
def tiny_tagger():
    """Untrained 2-type tagger with small dimensions, vocab 'abcde'."""
    scheme = LabelScheme(("X", "Y"))
    cfg = TaggerConfig(d_emb=4, d_hid=6, window=1, dropout=0.3)
    return init_model(scheme, list("abcde"), cfg, np.random.default_rng(3))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
