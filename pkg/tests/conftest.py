import numpy as np
import pytest
import torch

from sam2unext.data import SynthSpec, generate_synthetic, load_dataset_root
from sam2unext.model import toy_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    g = torch.Generator()
    g.manual_seed(1234)
    return g


@pytest.fixture
def tiny_cfg():
    return toy_config()


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(SynthSpec(n=8, seed=42), root)
    return root


@pytest.fixture(scope="session")
def synth_samples(synth_root):
    return load_dataset_root(synth_root)


# -- acceptance report -------------------------------------------------------

ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 11


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """Record one numbered acceptance criterion, then fail the test if it did not hold."""
    results = request.config.stash[ACCEPTANCE]

    def record(number, title, checks, elapsed, limit):
        failed = [desc for desc, ok in checks if not ok]
        if elapsed > limit:
            failed.append(f"runtime {elapsed:.1f}s over {limit}s")
        detail = "; ".join(failed) if failed else "; ".join(desc for desc, _ in checks) + f"; {elapsed:.1f}s"
        results[number] = (title, not failed, detail)
        print(f"[{'PASS' if not failed else 'FAIL'}] {number}. {title}: {detail}")
        assert not failed, detail

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[ACCEPTANCE]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in results:
            title, ok, detail = results[n]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
        else:
            terminalreporter.write_line(f"[FAIL] {n:2d}. not recorded (test errored or was deselected)")
