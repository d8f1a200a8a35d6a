import numpy as np
import pytest

from ssft.autograd import Tensor
from ssft.data import synth_dataset
from ssft.model import SsftConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return SsftConfig(num_bands=8, num_classes=3, embed_dim=8, downsample=2, heads=2)


def perturbed_params(config, seed=0, scale=0.3):
    """Double-precision params moved off their symmetric init (zero biases, unit norms)."""
    params = init_params(config, seed)
    r = np.random.default_rng(seed + 100)
    for _, t in params:
        t.data += r.normal(0.0, scale, t.shape)
    return params


@pytest.fixture
def tiny_params(tiny_config):
    return perturbed_params(tiny_config)


@pytest.fixture(scope="session")
def small_dataset():
    """3 classes, 10 per class, 16x16x8: quick enough for end-to-end unit tests."""
    return synth_dataset(3, 10, (16, 16, 8), seed=3)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- acceptance summary

_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.failed:
        key = props["criterion"]
        prev = _acceptance.get(key)
        if prev is None or prev[0] == "PASS":
            _acceptance[key] = ("PASS" if report.passed else "FAIL", props.get("summary", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(_acceptance):
        status, summary, detail = _acceptance[key]
        terminalreporter.write_line(f"[{status}] criterion {key}: {summary}" + (f" -- {detail}" if detail else ""))
