import numpy as np
import pytest

from contextnet import numerics as nx


def finite_difference(fn, arrays, step=1e-5):
    """Central differences of scalar ``fn(arrays)`` with respect to every entry.

    ``arrays`` are float64 numpy arrays mutated in place and restored.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            flat[i] = orig + h
            up = fn(arrays)
            flat[i] = orig - h
            down = fn(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-6)


def check_gradients(build, arrays, step=1e-5):
    """Compare tape gradients of ``build(tensors) -> scalar Tensor`` with central differences."""
    tensors = [nx.parameter(a, dtype=np.float64) for a in arrays]
    with nx.GradTape() as tape:
        loss = build(tensors)
    analytic = tape.gradient(loss, tensors)

    def evaluate(arrs):
        with nx.no_grad():
            return build([nx.Tensor(a, dtype=np.float64) for a in arrs]).item()

    numeric = finite_difference(evaluate, [t.data.copy() for t in tensors], step)
    return relative_error(analytic, numeric)


@pytest.fixture
def f64():
    with nx.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_RESULTS: dict[int, str] = {}
ACCEPTANCE_TITLES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_TITLES:
        return
    failed = {r.nodeid for key in ("failed", "error") for r in terminalreporter.stats.get(key, [])}
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_TITLES):
        line = ACCEPTANCE_RESULTS.get(number)
        if line is None:
            tag = f"criterion_{number:02d}_"
            status = "FAIL" if any(tag in nodeid for nodeid in failed) else "NOT RUN"
            line = f"criterion {number:>2} {status}  {ACCEPTANCE_TITLES[number]}: no measurement recorded"
        terminalreporter.write_line(line)
