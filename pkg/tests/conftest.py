import os

import pytest
import torch

from emoe_tracker.config import RunConfig
from emoe_tracker.eventrep import generate_fixture

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


@pytest.fixture(scope="session")
def small_fixture(tmp_path_factory):
    root = tmp_path_factory.mktemp("fixture_small")
    generate_fixture(seed=3, num_sequences=4, frames_per_seq=8, out_dir=root)
    return root


@pytest.fixture(scope="session")
def toy_fixture(tmp_path_factory):
    """The 8-sequence, 32-frame fixture used by the training checks."""
    root = tmp_path_factory.mktemp("fixture_toy")
    generate_fixture(seed=7, num_sequences=8, frames_per_seq=32, out_dir=root)
    return root


def tiny_config(**over) -> RunConfig:
    """A model small enough for per-element finite differences."""
    doc = {
        "data": {"template_size": 8, "search_size": 8},
        "model": {"dim": 8, "depth": 2, "heads": 2, "patch": 4, "head_channels": 8},
        "emoe": {"num_experts": 2},
    }
    for key, value in over.items():
        section, name = key.split("__")
        doc.setdefault(section, {})[name] = value
    return RunConfig.from_dict(doc)


@pytest.fixture
def make_tiny_config():
    return tiny_config


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one acceptance line; printed together at the end of the session."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, title, ok, detail=""):
        lines.append((number, f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}" + (f" ({detail})" if detail else "")))
        print(lines[-1][1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
