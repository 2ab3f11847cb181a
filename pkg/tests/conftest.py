import hashlib
import json
import logging
import os

import numpy as np
import pytest

from smoothfeedback import example8
from smoothfeedback.core import BoxGrid, ScalarField
from smoothfeedback.synthesis import AnalyticValue

logging.getLogger("smoothfeedback").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def cfg0():
    return example8.Example8Config(alpha=0.0)


@pytest.fixture(scope="session")
def cfg10():
    return example8.Example8Config(alpha=10.0)


@pytest.fixture(scope="session")
def v0_exact(cfg0):
    return AnalyticValue(lambda Y: example8.v0(Y, cfg0), lambda Y: example8.grad_v0(Y, cfg0), name="V0")


@pytest.fixture(scope="session")
def setup0(cfg0):
    return example8.lyapunov_setup(cfg0, 1.0)


@pytest.fixture(scope="session")
def v0_grid(cfg0):
    """V0 sampled on [-4.5, 4.5]^2 with h = 0.025 (cubic)."""
    g = BoxGrid((-4.5, -4.5), (4.5, 4.5), (361, 361))
    return ScalarField(g, example8.v0(g.nodes(), cfg0), order="cubic", name="V0")


def _cache_key(cfg, mode: str) -> str:
    blob = json.dumps({k: getattr(cfg, k) for k in cfg.__dataclass_fields__}, sort_keys=True, default=str)
    return hashlib.sha256((blob + mode).encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def value_grid10(request, cfg10):
    """Alpha = 10 value grid on [-6, 6]^2 (121^2 nodes), cached across sessions.

    The computation is deterministic in the config, so the cache key is a
    hash of the config; delete ``.pytest_cache`` to force a rebuild.
    """
    cache = request.config.cache
    key = _cache_key(cfg10, "shadow")
    path = os.path.join(str(cache.mkdir("value_grid")), f"{key}.npz")
    if os.path.exists(path):
        data = np.load(path, allow_pickle=False)
        return {k: data[k] for k in data.files}
    vg = example8.value_alpha_grid(cfg10, multistart="shadow")
    out = {
        "values": vg.values,
        "converged": np.array([n.converged for n in vg.nodes]),
        "polished": np.array([n.polished for n in vg.nodes]),
        "nodes": np.array([n.y0 for n in vg.nodes]),
        "theta": np.array(vg.theta),
    }
    np.savez(path, **out)
    return out


@pytest.fixture(scope="session")
def v10_field(value_grid10, cfg10):
    return ScalarField(cfg10.grid, value_grid10["values"], order="cubic", name="V_alpha=10")


@pytest.fixture(scope="session")
def v10_fine(v10_field):
    """Cubic resampling of the alpha = 10 grid to h = 0.025 on [-4.5, 4.5]^2."""
    g = BoxGrid((-4.5, -4.5), (4.5, 4.5), (361, 361))
    return ScalarField(g, v10_field.eval(g.nodes()), order="cubic", name="V_alpha=10 fine")


# -- acceptance reporting: one pass/fail line per criterion


_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.fixture
def record(request):
    """Attach measured values to the criterion line of the current test."""
    m = request.node.get_closest_marker("criterion")
    entry = _CRITERIA.setdefault(m.args[0], {"title": m.args[1], "outcome": None, "details": []})
    return lambda text: entry["details"].append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    m = item.get_closest_marker("criterion")
    if m is None or rep.when != "call" and not rep.failed:
        return
    entry = _CRITERIA.setdefault(m.args[0], {"title": m.args[1], "outcome": None, "details": []})
    if rep.failed:
        entry["outcome"] = "FAIL"
    elif rep.when == "call" and entry["outcome"] is None:
        entry["outcome"] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"criterion {n:2d} {e['outcome'] or 'SKIP'}: {e['title']}"
                                    + (f" [{detail}]" if detail else ""))
