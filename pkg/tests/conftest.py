import numpy as np
import pytest
import torch

from liquidtail.backbone import Backbone, BackboneConfig
from liquidtail.embeddings import random_table

torch.set_num_threads(2)

_acceptance_results: list[tuple[str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and item.fspath.basename == "test_acceptance.py":
        _acceptance_results.append((item.name, "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _acceptance_results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name, status in _acceptance_results:
            terminalreporter.write_line(f"{status}  {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model(rng):
    """d=8, 2-layer model plus a 13-token table (the gradcheck-sized instance)."""
    cfg = BackboneConfig(dim=8, hidden=16, layers=2, heads=2, max_seq=16, k_max=4, alpha_freqs=4)
    model = Backbone(cfg, rng)
    model.eval()
    table = random_table(13, 8, 1.0, rng)
    return model, table
