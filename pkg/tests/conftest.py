import numpy as np
import pytest

from microcaps import tensor as T


def check_gradients(fn, *arrays, seed=0, h=1e-5, tol=1e-4):
    """Compare reverse-mode gradients of sum(fn(*inputs) * R) with central differences.

    Returns the worst relative error over all inputs.
    """
    rng = np.random.default_rng(seed)
    tensors = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    probe = rng.standard_normal(out.shape)

    def loss_value():
        return float((fn(*[T.Tensor(t.data) for t in tensors]).data * probe).sum())

    loss = T.reduce_sum(T.hadamard_multiply(out, T.Tensor(probe)))
    T.backward(loss)
    worst = 0.0
    for t in tensors:
        num = T.numerical_gradient(loss_value, t.data, h)
        err = T.relative_error(t.grad, num)
        worst = max(worst, err)
        assert err <= tol, f"gradient mismatch {err:.2e} for input of shape {t.shape}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_verdicts: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    detail = dict(item.user_properties).get("detail", "")
    _verdicts[mark.args[0]] = (mark.args[1], status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_verdicts):
        title, status, detail = _verdicts[key]
        line = f"criterion {key:<3} {status}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
