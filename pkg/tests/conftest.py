import numpy as np
import pytest

from fedsim.data import ClientShard, Dataset
from fedsim.nn_core import ACTIVATIONS, LayerSpec, init_model

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Append one 'PASS/FAIL/SKIP criterion ...' line that is echoed in the terminal summary."""
    def report(criterion: int, ok: bool | None, detail: str):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        _ACCEPTANCE_LINES.append(f"[{status}] criterion {criterion:>2}: {detail}")
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def numpy_loss(arrays, specs, x, y):
    """Mean softmax cross-entropy written without fedsim, for finite-difference checks."""
    a = x
    for k, s in enumerate(specs):
        z = a @ arrays[2 * k].T + arrays[2 * k + 1]
        if s.activation == "relu":
            a = np.maximum(z, 0.0)
        elif s.activation == "tanh":
            a = np.tanh(z)
        else:
            a = z
    m = a.max(axis=1, keepdims=True)
    lse = np.log(np.exp(a - m).sum(axis=1)) + m[:, 0]
    return float(np.mean(lse - a[np.arange(len(y)), y]))


def finite_difference_grads(model, x, y, h=1e-5):
    specs = model.specs
    arrays = [a.copy() for a in model.params()]
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            lp = numpy_loss(arrays, specs, x, y)
            a[idx] = orig - h
            lm = numpy_loss(arrays, specs, x, y)
            a[idx] = orig
            g[idx] = (lp - lm) / (2 * h)
        out.append(g)
    return out


def max_relative_error(analytic, numeric):
    worst = 0.0
    for a, b in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst


def relu_margin(model, x):
    """Smallest |pre-activation| feeding a relu; FD is only valid away from the kink."""
    a, margin = x, np.inf
    for layer in model.layers:
        z = a @ layer.weights.T + layer.biases
        if layer.activation == "relu":
            margin = min(margin, float(np.min(np.abs(z))))
            a = np.maximum(z, 0)
        elif layer.activation == "tanh":
            a = np.tanh(z)
        else:
            a = z
    return margin


def random_case(rng, max_params=1000, max_batch=8):
    """Random small MLP (<= max_params) with perturbed biases, plus a batch."""
    while True:
        n_layers = int(rng.integers(1, 4))
        dims = [int(rng.integers(1, 17)) for _ in range(n_layers + 1)]
        dims[-1] = max(dims[-1], 2)
        specs = [LayerSpec(dims[i], dims[i + 1], str(rng.choice(ACTIVATIONS))) for i in range(n_layers)]
        model = init_model(specs, int(rng.integers(2 ** 31)))
        if model.num_params > max_params:
            continue
        model = model.with_params([p + rng.normal(0, 0.1, p.shape) for p in model.params()])
        b = int(rng.integers(1, max_batch + 1))
        x = rng.normal(size=(b, dims[0]))
        y = rng.integers(0, dims[-1], size=b)
        if relu_margin(model, x) < 1e-3:
            continue
        return model, x, y


def make_shard(cid, features, labels):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    return ClientShard(cid, features, labels, np.arange(len(labels)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_ds():
    r = np.random.default_rng(7)
    x = r.uniform(size=(400, 5))
    y = r.integers(0, 4, size=400)
    return Dataset(x, y, 4)
