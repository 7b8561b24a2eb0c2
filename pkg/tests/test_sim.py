import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from clforecast.generator import generate_intersection
from clforecast.rng import SeedStreams
from clforecast.sim import (
    ContractError,
    LogStates,
    SimConfig,
    SimulationError,
    SimulationMask,
    initial_context,
    rollout_count,
    sample_mask,
    simulate_segment,
    simulate_step,
)

from conftest import line_track, make_scenario


def _setup(s):
    logs = LogStates.from_scenario(s)
    return initial_context(s, logs), logs


def test_hand_finite_difference(simple_scenario):
    s = make_scenario([line_track(0, (-1, 0), (0, 0), is_ego=True), line_track(1, (9, 9), (1, 0))])
    ctx, logs = _setup(s)
    # ego sits at (-1, 0); shift so the pre-rollout position is the origin
    ctx = type(ctx)(ctx.anchor_step, ctx.agent_ids, ctx.position - torch.tensor([-1.0, 0.0]),
                    ctx.heading, ctx.velocity, ctx.valid)
    _, new = simulate_segment(ctx, torch.tensor([[1.0, 0.0]]), None, [False], logs, SimConfig(1))
    assert new.heading[0, 0].item() == 0.0
    assert new.velocity[0, 0].tolist() == [2.0, 0.0]


@pytest.mark.parametrize("t_pred, t_sim, n", [(12, 4, 2), (12, 12, 0), (12, 1, 11), (12, 5, 2), (12, 6, 1)])
def test_rollout_count(t_pred, t_sim, n):
    assert rollout_count(t_pred, t_sim) == n == (t_pred - 1) // t_sim


@pytest.mark.parametrize("t_sim", [0, 13])
def test_rollout_count_bounds(t_sim):
    with pytest.raises(ContractError):
        rollout_count(12, t_sim)


def test_sim_config_bounds():
    with pytest.raises(ContractError):
        SimConfig(13).check(12)
    SimConfig(12).check(12)


def test_mask_extremes():
    rng = np.random.default_rng(0)
    assert not any(sample_mask(rng, 50, 0.0).flags)
    assert all(sample_mask(rng, 50, 1.0).flags)


def test_mask_binomial_concentration():
    m = sample_mask(SeedStreams(3).rng("mask"), 10_000, 0.5)
    assert abs(np.mean(m.flags) - 0.5) < 0.02


def test_mask_merged_prepends_ego():
    m = SimulationMask((False, True), 0.5)
    assert m.merged() == (True, False, True)


def test_mask_deterministic():
    a = sample_mask(SeedStreams(1).rng("mask", 4), 20, 0.5)
    b = sample_mask(SeedStreams(1).rng("mask", 4), 20, 0.5)
    assert a == b


def test_mask_ratio_range():
    with pytest.raises(ContractError):
        sample_mask(np.random.default_rng(0), 3, 1.5)


def test_anchor_advances_and_window_length(simple_scenario):
    ctx, logs = _setup(simple_scenario)
    ego = logs.position[0, 3:7]
    out = simulate_step(ctx, ego, None, [False, False], logs, SimConfig(4))
    assert out.anchor_step == ctx.anchor_step + 4
    assert out.window == ctx.window == 3


def test_log_replay_bit_exact(simple_scenario):
    ctx, logs = _setup(simple_scenario)
    pred = torch.tensor([[0.5, 0.5]] * 4, dtype=torch.float64)
    out, new = simulate_segment(ctx, pred, None, [False, False], logs, SimConfig(4))
    assert torch.equal(new.position[1:], logs.position[1:, 3:7])
    assert torch.equal(new.heading[1:], logs.heading[1:, 3:7])
    assert torch.equal(new.velocity[1:], logs.velocity[1:, 3:7])
    assert torch.equal(out.position[1:], logs.position[1:, 4:7])


def test_reactive_with_log_positions_reproduces_kinematics():
    s = generate_intersection(11, 6, 0.8)
    ctx, logs = _setup(s)
    S = 4
    fut = slice(s.current_step + 1, s.current_step + 1 + S)
    scene = logs.position[1:, fut]
    flags = logs.valid[1:, s.current_step:fut.stop].all(1).tolist()
    _, new = simulate_segment(ctx, logs.position[0, fut], scene, flags, logs, SimConfig(S))
    sim = [0] + [i + 1 for i, f in enumerate(flags) if f]
    assert torch.equal(new.position[sim], logs.position[sim, fut])
    assert torch.allclose(new.velocity[sim], logs.velocity[sim, fut], atol=1e-6)
    dh = torch.remainder(new.heading[sim] - logs.heading[sim, fut] + math.pi, 2 * math.pi) - math.pi
    assert dh.abs().max() < 1e-6


@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3)), min_size=4, max_size=4))
def test_kinematic_consistency(deltas):
    s = make_scenario([line_track(0, (0, 0), (4, 0), is_ego=True), line_track(1, (30, 30), (1, 0))])
    ctx, logs = _setup(s)
    start = ctx.position[0, -1]
    pred = start + torch.tensor(np.cumsum(deltas, axis=0), dtype=torch.float64)
    cfg = SimConfig(4)
    _, new = simulate_segment(ctx, pred, None, [False], logs, cfg)
    prev = torch.cat([start[None], pred[:-1]])
    d = pred - prev
    assert torch.allclose(new.velocity[0] * s.dt, d, atol=1e-12)
    h_prev = ctx.heading[0, -1]
    for k in range(4):
        if d[k].norm() >= cfg.min_speed_for_heading * s.dt:
            assert new.heading[0, k] == torch.atan2(d[k, 1], d[k, 0])
        else:
            assert new.heading[0, k] == h_prev
        h_prev = new.heading[0, k]


def test_stationary_heading_carries_over(simple_scenario):
    ctx, logs = _setup(simple_scenario)
    p = ctx.position[0, -1]
    pred = torch.stack([p, p + torch.tensor([0.01, 0.0]), p, p])
    _, new = simulate_segment(ctx, pred, None, [False, False], logs, SimConfig(4))
    assert torch.all(new.heading[0] == ctx.heading[0, -1])


def test_non_finite_prediction_names_agent_and_step(simple_scenario):
    ctx, logs = _setup(simple_scenario)
    scene = torch.zeros(2, 4, 2, dtype=torch.float64)
    scene[1, 2, 0] = float("nan")
    with pytest.raises(SimulationError, match=r"agent 2 at step 5"):
        simulate_segment(ctx, logs.position[0, 3:7], scene, [True, True], logs, SimConfig(4))


def test_nan_rows_ignored_for_replayed_agents(simple_scenario):
    ctx, logs = _setup(simple_scenario)
    scene = torch.full((2, 4, 2), float("nan"), dtype=torch.float64)
    simulate_segment(ctx, logs.position[0, 3:7], scene, [False, False], logs, SimConfig(4))


def test_contract_errors(simple_scenario):
    ctx, logs = _setup(simple_scenario)
    with pytest.raises(ContractError, match="shape"):
        simulate_segment(ctx, torch.zeros(3, 2), None, [False, False], logs, SimConfig(4))
    with pytest.raises(ContractError, match="mask"):
        simulate_segment(ctx, torch.zeros(4, 2), None, [False], logs, SimConfig(4))
    with pytest.raises(ContractError, match="reactive"):
        simulate_segment(ctx, torch.zeros(4, 2), None, [True, False], logs, SimConfig(4))
    late = type(ctx)(14, ctx.agent_ids, ctx.position, ctx.heading, ctx.velocity, ctx.valid)
    with pytest.raises(ContractError, match="logs end"):
        simulate_segment(late, torch.zeros(1, 2), None, [False, False], logs, SimConfig(1))


def test_reactive_agent_frozen_after_log_ends():
    valid = [True] * 4 + [False] * 11  # last valid at absolute step 3
    s = make_scenario([line_track(0, (0, 0), (4, 0), is_ego=True), line_track(1, (0, 10), (2, 0), valid=valid)])
    ctx, logs = _setup(s)
    scene = torch.tensor([[[50.0, 50.0], [51.0, 50.0], [52.0, 50.0], [53.0, 50.0]]], dtype=torch.float64)
    _, new = simulate_segment(ctx, logs.position[0, 3:7], scene, [True], logs, SimConfig(4))
    assert new.position[1, 0].tolist() == [50.0, 50.0]
    assert torch.all(new.position[1, 1:] == new.position[1, 0])
    assert new.valid[1].tolist() == [True, False, False, False]


def test_detach_toggle_controls_gradient(simple_scenario):
    ctx, logs = _setup(simple_scenario)
    w = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)
    pred = logs.position[0, 3:7] * w
    for detach, has_grad in ((True, False), (False, True)):
        out = simulate_step(ctx, pred, None, [False, False], logs, SimConfig(4, detach_between_steps=detach))
        assert out.position.requires_grad is has_grad
