import numpy as np
import pytest
import torch
from hypothesis import settings

from clforecast.net import NetConfig
from clforecast.scenario import AgentTrack, MapPolyline, PolylineKind, Scenario, states_from_positions

torch.set_num_threads(1)
settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

TINY_NET = NetConfig(hidden_dim=8, n_layers=1, n_heads=2, n_modes=3, n_refinement_iters=1)


def line_track(agent_id, start, velocity, n_steps=15, dt=0.5, is_ego=False, valid=None, dims=(4.5, 2.0)):
    """Constant-velocity track; ``start`` is the position at step 0."""
    start, velocity = np.asarray(start, float), np.asarray(velocity, float)
    pos = start + velocity * dt * np.arange(n_steps)[:, None]
    rows = states_from_positions(pos, dt, prev=start - velocity * dt, valid=valid)
    return AgentTrack(agent_id, is_ego, dims[0], dims[1], rows)


def make_scenario(tracks, with_map=True, scenario_id="hand", t_in=2, t_pred=12, dt=0.5):
    polys = ()
    if with_map:
        polys = (
            MapPolyline(0, np.array([[-50.0, 0.0], [0.0, 0.0], [50.0, 0.0]]), PolylineKind.LANE_CENTER),
            MapPolyline(1, np.array([[0.0, -50.0], [0.0, 50.0]]), PolylineKind.BOUNDARY),
        )
    return Scenario(scenario_id, dt, t_in, t_pred, polys, tuple(tracks))


@pytest.fixture
def simple_scenario():
    return make_scenario([
        line_track(0, (-10, 0), (4, 0), is_ego=True),
        line_track(1, (0, -20), (0, 3)),
        line_track(2, (20, 3), (-5, 0)),
    ])


_CRITERIA: dict[str, list[tuple[str, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _CRITERIA.setdefault(mark.args[0], []).append((item.name, rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA):
        results = _CRITERIA[cid]
        ok = all(o == "passed" for _, o in results)
        names = ", ".join(n for n, _ in results)
        terminalreporter.write_line(f"{cid}: {'PASS' if ok else 'FAIL'} ({names})")
