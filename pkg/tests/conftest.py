import json
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from interlacer.tensor import backward

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

HERE = Path(__file__).parent
ARTIFACTS = Path(os.environ.get("INTERLACER_ARTIFACTS", "/root/runs"))


@pytest.fixture(scope="session")
def golden():
    return json.loads((HERE / "golden.json").read_text())


def numeric_grad(loss_fn, array, eps=1e-6):
    """Central differences of ``loss_fn()`` over every entry of ``array`` (perturbed in place)."""
    g = np.zeros_like(array, dtype=np.float64)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = array[i]
        array[i] = orig + eps
        up = loss_fn()
        array[i] = orig - eps
        down = loss_fn()
        array[i] = orig
        g[i] = (up - down) / (2 * eps)
    return g


def grad_errors(build_loss, tensors, eps=1e-6, entries=None, rng=None):
    """Relative error ``|analytic - numeric| / max(|numeric|, |analytic|, floor)`` per tensor.

    ``build_loss`` returns a scalar Tensor. With ``entries`` set, only that
    many randomly chosen entries per tensor are perturbed. The error is
    taken norm-wise over the checked entries. ``floor`` is 1e-6 * |loss|:
    central differences carry roundoff of about 1e-16 * |loss| / eps, so
    gradients that are exactly zero (e.g. a bias feeding a softmax) compare
    as equal instead of as noise over noise.
    """
    for t in tensors:
        t.grad = None
    loss = build_loss()
    floor = 1e-6 * max(1.0, abs(float(loss.data)))
    backward(loss)
    analytic = [np.array(t.grad if t.grad is not None else np.zeros_like(t.data)) for t in tensors]

    def value():
        return float(build_loss().data)

    errs = []
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        assert np.shares_memory(flat, t.data), "gradient check needs contiguous parameters"
        idx = np.arange(flat.size)
        if entries is not None and flat.size > entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, entries, replace=False)
        num = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            num[n] = (up - down) / (2 * eps)
        ana = a.reshape(-1)[idx]
        denom = max(np.linalg.norm(num), np.linalg.norm(ana), floor)
        errs.append(float(np.linalg.norm(ana - num) / denom))
    return errs


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
