import numpy as np
import pytest

from groves_forge.auction import AuctionInstance, HierarchicalBundles, MultiUnitDMU, UnitDemand
from groves_forge.simulators import Uniform, sample_profiles


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def burrito():
    return AuctionInstance(UnitDemand(1), [[12.0], [6.0]])


def random_instance(rng, language, n, integer=False):
    """Small random instance; integer values make exact welfare ties likely."""
    if integer:
        if isinstance(language, HierarchicalBundles):
            leaves = rng.integers(0, 5, (n, language.num_leaves)).astype(float)
            values = np.zeros((n, language.width))
            values[:, : language.num_leaves] = leaves
            for node, kids in enumerate(language.children()):
                if kids is not None:
                    values[:, node] = values[:, kids[0]] + values[:, kids[1]] + rng.integers(0, 3, n)
        else:
            values = rng.integers(0, 6, (n, language.width)).astype(float)
            if isinstance(language, MultiUnitDMU):
                values = -np.sort(-values, axis=1)
    else:
        values = sample_profiles(language, Uniform(0.0, 1.0), n, rng)
    return AuctionInstance(language, values)


LANGUAGES = [MultiUnitDMU(3), UnitDemand(3), HierarchicalBundles(4)]


def gradient_errors(net, x, eps=1e-6):
    """Relative error between backward() and central differences, per parameter.

    The scalar checked is sum(c * y) for a fixed random c.
    """
    c = np.random.default_rng(0).normal(size=x.shape[0])
    _, cache = net.forward_batch(x)
    analytic = net.backward(cache, c)
    errors = {}
    for name, p in net.params.items():
        fd = np.zeros_like(p)
        flat, out = p.reshape(-1), fd.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            up = c @ net.forward_batch(x)[0]
            flat[k] = old - eps
            down = c @ net.forward_batch(x)[0]
            flat[k] = old
            out[k] = (up - down) / (2 * eps)
        scale = max(np.linalg.norm(analytic[name]) + np.linalg.norm(fd), 1e-8)
        errors[name] = np.linalg.norm(analytic[name] - fd) / scale
    return errors
