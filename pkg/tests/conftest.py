import numpy as np
import pytest

from mlsent.data import build_vocab
from mlsent.fixtures import SyntheticSpec, make_synthetic
from mlsent.model import Classifier

TINY_ENCODER = dict(hidden_size=8, num_layers=2, num_attention_heads=2, ff_size=12, max_len=10)


@pytest.fixture(scope="session")
def small_data():
    return make_synthetic(SyntheticSpec(seed=1), 32)


@pytest.fixture(scope="session")
def small_vocab(small_data):
    return build_vocab(small_data)


@pytest.fixture
def tiny_model(small_vocab):
    def factory(head=None, seed=0, **overrides):
        head = head or {"type": "fc", "classifier_size": 6, "num_layers": 1}
        return Classifier.create(small_vocab, head, seed=seed, **{**TINY_ENCODER, **overrides})

    return factory


def finite_difference_check(loss_fn, params, rng, probes=3, h=1e-5, floor=1e-5):
    """Worst relative error between analytic and central-difference gradients over random probes.

    ``floor`` bounds the denominator: gradients that vanish identically (key
    biases under softmax shift invariance) come back from central differences
    as roundoff of order eps * loss / h, about 1e-10 here.
    """
    from mlsent import tensor as T

    grads = T.gradients(loss_fn(), params)
    worst = 0.0
    for name, p in params.items():
        for _ in range(probes):
            idx = tuple(int(rng.integers(0, s)) for s in p.shape)
            old = p.data[idx]
            p.data[idx] = old + h
            up = loss_fn().item()
            p.data[idx] = old - h
            down = loss_fn().item()
            p.data[idx] = old
            numeric = (up - down) / (2 * h)
            analytic = grads[name][idx]
            scale = max(abs(analytic) + abs(numeric), floor)
            worst = max(worst, abs(analytic - numeric) / scale)
    return worst


_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; the lines are repeated in the terminal summary."""

    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
