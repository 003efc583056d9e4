import pytest

from cml_escape.coupling import laplacian
from cml_escape.localmap import make_lorenz, make_perturbed_lorenz

_ACCEPTANCE = {}


@pytest.fixture
def lorenz3():
    return make_lorenz(3.0, -0.1, 0.45)


@pytest.fixture
def perturbed():
    def build(eta):
        return make_perturbed_lorenz(3.0, eta, -0.1, 0.45)

    return build


@pytest.fixture
def lap():
    return laplacian


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the test body sets ``detail`` and asserts."""
    entry = {"detail": ""}
    yield entry
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    _ACCEPTANCE[entry["name"]] = ("PASS" if ok else "FAIL", entry["detail"])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[0])):
        status, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{status}  criterion {name}  {detail}")
