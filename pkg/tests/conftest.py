import numpy as np
import pytest

from dvmsr.autodiff import Tensor, backward, max_relative_error, no_grad, numerical_gradient
from dvmsr.data import Pair, degrade, synthetic_images


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tparam(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _sampled_fd(loss_fn, p, idx, h):
    flat = p.data.reshape(-1)
    out = np.empty(len(idx))
    with no_grad():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            out[n] = (fp - fm) / (2.0 * h)
    return out


def gradcheck(fn, params, h=1e-5, sample=None, seed=99):
    """Largest relative error between backprop and central differences over ``params``.

    With ``sample`` set, at most that many entries per tensor are checked.
    """
    for p in params:
        p.grad = None
    out = fn()
    # random projection makes the scalar depend on every output element
    proj = np.random.default_rng(seed).normal(size=out.shape)
    loss_fn = lambda: (fn() * Tensor(proj)).sum()
    backward(loss_fn())
    pick = np.random.default_rng(seed + 1)
    worst = 0.0
    for p in params:
        ana = p.grad if p.grad is not None else np.zeros(p.shape)
        if sample is None or p.size <= sample:
            num = numerical_gradient(loss_fn, p, h)
        else:
            idx = pick.choice(p.size, size=sample, replace=False)
            num, ana = _sampled_fd(loss_fn, p, idx, h), ana.reshape(-1)[idx]
        worst = max(worst, max_relative_error(ana, num))
    return worst


@pytest.fixture(scope="session")
def toy_pairs():
    rng = np.random.default_rng(7)
    return [Pair(f"im{i}", degrade(h, 4), h) for i, h in enumerate(synthetic_images(8, 32, rng))]
