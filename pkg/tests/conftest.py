from pathlib import Path

import numpy as np
import pytest

from moemla.config import ModelConfig
from moemla.moe import ExpertConfig
from moemla.tensor import Tensor, backward

DATA = Path(__file__).parent / "data"


def numeric_grad(fn, arrays, eps=1e-3):
    """Central finite differences of scalar ``fn()`` w.r.t. each array (perturbed in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + eps
            up = fn()
            arr[i] = old - eps
            down = fn()
            arr[i] = old
            g[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(build, inputs, eps=1e-3):
    """Compare ``backward`` against finite differences for ``build(*tensors) -> scalar Tensor``."""
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    backward(build(*tensors))
    analytic = [t.grad for t in tensors]
    numeric = numeric_grad(lambda: build(*[Tensor(t.data) for t in tensors]).item(),
                           [t.data for t in tensors], eps)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


def toy_config(**kw) -> ModelConfig:
    base = dict(vocab_size=256, d_model=32, n_layers=2, n_heads=2, latent_dim=16,
                experts=ExpertConfig(16, 2, 4), dropout=0.0, max_seq=128)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fables_text() -> bytes:
    return (DATA / "fables.txt").read_bytes()


@pytest.fixture(scope="session")
def ten_sentences() -> bytes:
    return (DATA / "ten_sentences.txt").read_bytes()


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
