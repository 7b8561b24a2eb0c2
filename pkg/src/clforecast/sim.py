"""Closed-loop simulator: delta-action state updates of the dynamic context.

The ego and every reactive (masked) surrounding agent take their predicted
positions; heading and velocity are derived from positional finite
differences, starting from the position at the rollout anchor.  Every other
agent replays its log.  Predictions are detached before the update unless
``SimConfig.detach_between_steps`` is off.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .scenario import Scenario

DTYPE = torch.float64


class ContractError(ValueError):
    """Inputs violate a documented precondition."""


class SimulationError(RuntimeError):
    """A simulated agent received a non-finite predicted position."""


@dataclass(frozen=True)
class SimConfig:
    t_sim_steps: int
    detach_between_steps: bool = True
    min_speed_for_heading: float = 0.1

    def check(self, t_pred_steps: int) -> None:
        if not 1 <= self.t_sim_steps <= t_pred_steps:
            raise ContractError(f"t_sim_steps must lie in [1, {t_pred_steps}], got {self.t_sim_steps}")


@dataclass(frozen=True)
class SimulationMask:
    flags: tuple[bool, ...]
    ratio: float

    def merged(self) -> tuple[bool, ...]:
        """Mask over all agents with the ego (always simulated) first."""
        return (True,) + tuple(self.flags)


def sample_mask(rng: np.random.Generator, n_surrounding: int, ratio: float) -> SimulationMask:
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"mask ratio must be in [0, 1], got {ratio}")
    flags = rng.random(n_surrounding) < ratio
    return SimulationMask(tuple(bool(f) for f in flags), float(ratio))


def rollout_count(t_pred_steps: int, t_sim_steps: int) -> int:
    """Number of closed-loop samples per open-loop sample."""
    if not 1 <= t_sim_steps <= t_pred_steps:
        raise ContractError(f"t_sim_steps must lie in [1, {t_pred_steps}], got {t_sim_steps}")
    return (t_pred_steps - 1) // t_sim_steps


class LogStates(NamedTuple):
    """Logged states of all agents (ego first) over every step of a scenario."""

    agent_ids: tuple[int, ...]
    position: torch.Tensor  # (A, T, 2)
    heading: torch.Tensor  # (A, T)
    velocity: torch.Tensor  # (A, T, 2)
    valid: torch.Tensor  # (A, T) bool
    dt: float

    @classmethod
    def from_scenario(cls, s: Scenario) -> "LogStates":
        tracks = s.ordered_tracks()
        st = torch.as_tensor(np.stack([t.states for t in tracks]), dtype=DTYPE)
        return cls(
            agent_ids=tuple(t.agent_id for t in tracks),
            position=st[..., 0:2],
            heading=st[..., 2],
            velocity=st[..., 3:5],
            valid=st[..., 5] > 0.5,
            dt=float(s.dt),
        )


@dataclass(frozen=True, eq=False)
class DynamicContext:
    """The most recent ``t_in_steps + 1`` states of every agent, ending at ``anchor_step``."""

    anchor_step: int
    agent_ids: tuple[int, ...]
    position: torch.Tensor  # (A, W, 2)
    heading: torch.Tensor  # (A, W)
    velocity: torch.Tensor  # (A, W, 2)
    valid: torch.Tensor  # (A, W) bool

    @property
    def window(self) -> int:
        return self.position.shape[1]

    @property
    def n_agents(self) -> int:
        return self.position.shape[0]

    def detached(self) -> "DynamicContext":
        return DynamicContext(
            self.anchor_step, self.agent_ids, self.position.detach(), self.heading.detach(),
            self.velocity.detach(), self.valid,
        )


def initial_context(s: Scenario, logs: LogStates | None = None) -> DynamicContext:
    logs = logs if logs is not None else LogStates.from_scenario(s)
    w = slice(s.current_step - s.t_in_steps, s.current_step + 1)
    return DynamicContext(
        anchor_step=s.current_step,
        agent_ids=logs.agent_ids,
        position=logs.position[:, w],
        heading=logs.heading[:, w],
        velocity=logs.velocity[:, w],
        valid=logs.valid[:, w],
    )


class SegmentStates(NamedTuple):
    """States produced for steps ``anchor+1 .. anchor+t_sim_steps``."""

    position: torch.Tensor  # (A, S, 2)
    heading: torch.Tensor  # (A, S)
    velocity: torch.Tensor  # (A, S, 2)
    valid: torch.Tensor  # (A, S)


def simulate_segment(
    ctx: DynamicContext,
    ego_pred: torch.Tensor,
    scene_pred: torch.Tensor | None,
    mask: SimulationMask | Sequence[bool],
    logs: LogStates,
    cfg: SimConfig,
) -> tuple[DynamicContext, SegmentStates]:
    """Advance ``ctx`` by ``cfg.t_sim_steps``; also return the new states.

    ``ego_pred`` is ``(S, 2)`` and ``scene_pred`` ``(A-1, S, 2)`` in world
    coordinates.  Rows of ``scene_pred`` for non-reactive agents are ignored
    and may be NaN.
    """
    S = cfg.t_sim_steps
    A = ctx.n_agents
    dt = logs.dt
    flags = tuple(mask.flags) if isinstance(mask, SimulationMask) else tuple(bool(f) for f in mask)
    if len(flags) != A - 1:
        raise ContractError(f"mask has {len(flags)} flags for {A - 1} surrounding agents")
    if tuple(logs.agent_ids) != tuple(ctx.agent_ids):
        raise ContractError("logs and context list different agents")
    lo, hi = ctx.anchor_step + 1, ctx.anchor_step + S
    if hi >= logs.position.shape[1]:
        raise ContractError(f"logs end at step {logs.position.shape[1] - 1}, rollout needs step {hi}")
    ego_pred = torch.as_tensor(ego_pred, dtype=DTYPE)
    if ego_pred.shape != (S, 2):
        raise ContractError(f"ego prediction has shape {tuple(ego_pred.shape)}, expected ({S}, 2)")
    if scene_pred is None:
        if any(flags):
            raise ContractError("reactive agents requested without scene predictions")
        scene_pred = torch.full((A - 1, S, 2), float("nan"), dtype=DTYPE)
    scene_pred = torch.as_tensor(scene_pred, dtype=DTYPE)
    if scene_pred.shape != (A - 1, S, 2):
        raise ContractError(f"scene prediction has shape {tuple(scene_pred.shape)}, expected ({A - 1}, {S}, 2)")

    pred = torch.cat([ego_pred[None], scene_pred], dim=0)
    if cfg.detach_between_steps:
        pred = pred.detach()
    sim = torch.tensor((True,) + flags)
    bad = sim[:, None] & ~torch.isfinite(pred).all(-1)
    if bad.any():
        a, k = (int(v) for v in torch.nonzero(bad)[0])
        raise SimulationError(f"non-finite predicted position for agent {ctx.agent_ids[a]} at step {lo + k}")

    log_pos = logs.position[:, lo:hi + 1]
    log_head = logs.heading[:, lo:hi + 1]
    log_vel = logs.velocity[:, lo:hi + 1]
    log_valid = logs.valid[:, lo:hi + 1].clone()
    log_valid[0] = True

    thresh = cfg.min_speed_for_heading * dt
    p_prev = ctx.position[:, -1]
    h_prev = ctx.heading[:, -1]
    pos, head, vel = [], [], []
    for k in range(S):
        # reactive agents past the end of their log stay frozen
        frozen = ~log_valid[:, k]
        p_k = torch.where(frozen[:, None], p_prev, torch.where(sim[:, None], pred[:, k], p_prev))
        d = p_k - p_prev
        small = d.norm(dim=-1) < thresh
        dx = torch.where(small, torch.ones_like(d[:, 0]), d[:, 0])
        dy = torch.where(small, torch.zeros_like(d[:, 1]), d[:, 1])
        h_k = torch.where(small, h_prev, torch.atan2(dy, dx))
        v_k = d / dt
        pos.append(p_k)
        head.append(h_k)
        vel.append(v_k)
        p_prev, h_prev = p_k, h_k
    sp, sh, sv = torch.stack(pos, 1), torch.stack(head, 1), torch.stack(vel, 1)
    use = sim[:, None].expand(A, S)
    new = SegmentStates(
        position=torch.where(use[..., None], sp, log_pos),
        heading=torch.where(use, sh, log_head),
        velocity=torch.where(use[..., None], sv, log_vel),
        valid=log_valid,
    )
    W = ctx.window
    out = DynamicContext(
        anchor_step=hi,
        agent_ids=ctx.agent_ids,
        position=torch.cat([ctx.position, new.position], 1)[:, -W:],
        heading=torch.cat([ctx.heading, new.heading], 1)[:, -W:],
        velocity=torch.cat([ctx.velocity, new.velocity], 1)[:, -W:],
        valid=torch.cat([ctx.valid, new.valid], 1)[:, -W:],
    )
    return out, new


def simulate_step(ctx, ego_pred, scene_pred, mask, logs, cfg) -> DynamicContext:
    return simulate_segment(ctx, ego_pred, scene_pred, mask, logs, cfg)[0]
