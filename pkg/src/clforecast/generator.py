"""Synthetic four-way intersection scenarios.

Every agent moves at constant speed along a route made of a straight approach,
a connector through the junction (straight, or a circular arc for turns) and a
straight exit.  Routes are defined for the southern arm and rotated by
multiples of 90 degrees for the other arms.  Positions are exact samples of
the closed-form route; velocity and heading are the backward finite
difference of those samples, so tracks are kinematically consistent with the
simulator's update rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import overlap_many
from .scenario import AgentTrack, MapPolyline, PolylineKind, Scenario, states_from_positions

LANE_OFFSET = 1.75  # lane center offset from the road axis
STOP_LINE = 7.0  # distance of the junction box edge from the center
ARM_LENGTH = 60.0
ROAD_HALF_WIDTH = 3.5
VISIBLE_RADIUS = 55.0  # surrounding agents outside this box are invalid
SPEED_RANGE = (3.0, 12.0)
CLEARANCE = 0.3  # ground-truth boxes are inflated by this much when rejecting overlaps

MANEUVERS = ("straight", "left", "right")


def _rot(k: int) -> np.ndarray:
    a = k * math.pi / 2
    c, s = round(math.cos(a)), round(math.sin(a))
    return np.array([[c, -s], [s, c]], dtype=float)


def _connector_length(maneuver: str) -> float:
    if maneuver == "straight":
        return 2 * STOP_LINE
    if maneuver == "right":
        return (STOP_LINE - LANE_OFFSET) * math.pi / 2
    return (STOP_LINE + LANE_OFFSET) * math.pi / 2


@dataclass(frozen=True)
class Route:
    """Arc-length parameterized path; ``s = 0`` at the approach stop line."""

    arm: int
    maneuver: str

    @property
    def connector_length(self) -> float:
        return _connector_length(self.maneuver)

    def position(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        x = np.full(s.shape, LANE_OFFSET)
        y = -STOP_LINE + s
        lc = self.connector_length
        inside = (s > 0) & (s <= lc)
        after = s > lc
        if self.maneuver == "straight":
            pass  # the base formula covers approach, connector and exit
        elif self.maneuver == "right":
            r = STOP_LINE - LANE_OFFSET
            phi = math.pi - s / r
            x = np.where(inside, STOP_LINE + r * np.cos(phi), x)
            y = np.where(inside, -STOP_LINE + r * np.sin(phi), y)
            x = np.where(after, STOP_LINE + (s - lc), x)
            y = np.where(after, -LANE_OFFSET, y)
        else:
            r = STOP_LINE + LANE_OFFSET
            phi = s / r
            x = np.where(inside, -STOP_LINE + r * np.cos(phi), x)
            y = np.where(inside, -STOP_LINE + r * np.sin(phi), y)
            x = np.where(after, -STOP_LINE - (s - lc), x)
            y = np.where(after, LANE_OFFSET, y)
        pts = np.stack([x, y], axis=-1)
        return pts @ _rot(self.arm).T


@dataclass(frozen=True)
class AgentPlan:
    route: Route
    s0: float  # arc length at the current step
    speed: float
    length: float
    width: float

    def sample(self, n_steps: int, t_in_steps: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Positions for steps -1 .. n_steps-1 (index 0 of the result is step -1)."""
        k = np.arange(-1, n_steps)
        s = self.s0 + self.speed * (k - t_in_steps) * dt
        return self.route.position(s), s


def build_map() -> list[MapPolyline]:
    polys: list[MapPolyline] = []

    def add(points, kind):
        polys.append(MapPolyline(len(polys), np.round(np.asarray(points, dtype=float), 9), kind))

    y = np.linspace(-ARM_LENGTH, -STOP_LINE, 12)
    for arm in range(4):
        r = _rot(arm)
        add(np.column_stack([np.full_like(y, LANE_OFFSET), y]) @ r.T, PolylineKind.LANE_CENTER)
        add(np.column_stack([np.full_like(y, -LANE_OFFSET), y[::-1]]) @ r.T, PolylineKind.LANE_CENTER)
        for side in (-ROAD_HALF_WIDTH, ROAD_HALF_WIDTH):
            add(np.column_stack([np.full_like(y, side), y]) @ r.T, PolylineKind.BOUNDARY)
        cw = np.array([[-ROAD_HALF_WIDTH, -STOP_LINE + 1.0], [ROAD_HALF_WIDTH, -STOP_LINE + 1.0]])
        add(cw @ r.T, PolylineKind.CROSSWALK)
        for m in MANEUVERS:
            route = Route(arm, m)
            s = np.linspace(0.0, route.connector_length, 8)
            add(route.position(s), PolylineKind.LANE_CENTER)
    return polys


def _boxes_clear(pa, ha, la, wa, pb, hb, lb, wb, mask) -> bool:
    if not mask.any():
        return True
    hit = overlap_many(
        pa[mask, 0], pa[mask, 1], ha[mask], la + 2 * CLEARANCE, wa + 2 * CLEARANCE,
        pb[mask, 0], pb[mask, 1], hb[mask], lb + 2 * CLEARANCE, wb + 2 * CLEARANCE,
    )
    return not bool(np.any(hit))


def _path_distance(points: np.ndarray, path: np.ndarray) -> float:
    """Minimum distance from ``points`` to the polyline ``path`` (inf when empty)."""
    if len(points) == 0:
        return float("inf")
    a, b = path[:-1], path[1:]
    ab = b - a
    denom = np.maximum((ab**2).sum(-1), 1e-12)
    t = np.clip(((points[:, None, :] - a[None]) * ab[None]).sum(-1) / denom[None], 0.0, 1.0)
    proj = a[None] + t[..., None] * ab[None]
    return float(np.min(np.linalg.norm(points[:, None, :] - proj, axis=-1)))


def generate_intersection(
    seed: int,
    n_agents: int,
    density: float,
    dt: float = 0.5,
    t_in_steps: int = 2,
    t_pred_steps: int = 12,
    scenario_id: str | None = None,
) -> Scenario:
    """Generate one dense intersection scenario, deterministic in ``seed``.

    ``density`` is the probability that a surrounding agent is placed on a
    timed near-miss with the ego (its ground truth passes within 5 m of the
    ego's ground-truth path); the rest get free random placements.  Ground
    truth boxes never overlap, so a perfect predictor is collision free.
    """
    if n_agents < 2:
        raise ValueError(f"n_agents must be >= 2, got {n_agents}")
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must be in (0, 1], got {density}")
    rng = np.random.default_rng(seed)
    n_steps = t_in_steps + 1 + t_pred_steps

    ego_plan = _sample_ego_plan(rng)
    ego_pts, _ = ego_plan.sample(n_steps, t_in_steps, dt)
    ego_rows = states_from_positions(ego_pts[1:], dt, prev=ego_pts[0])
    fut = slice(t_in_steps + 1, n_steps)
    ego_future_path = ego_rows[t_in_steps:, :2]

    placed: list[tuple[AgentPlan, np.ndarray]] = [(ego_plan, ego_rows)]

    def fits(rows: np.ndarray, length: float, width: float) -> bool:
        valid = rows[:, 5] > 0.5
        for plan, other in placed:
            both = valid & (other[:, 5] > 0.5)
            if not _boxes_clear(rows[:, :2], rows[:, 2], length, width,
                                other[:, :2], other[:, 2], plan.length, plan.width, both):
                return False
        return True

    tracks_rows = []
    for _ in range(1, n_agents):
        interacting = bool(rng.random() < density)
        rows_len = float(rng.uniform(4.0, 5.0))
        rows_wid = float(rng.uniform(1.8, 2.1))
        chosen = None
        tries = 400 if interacting else 100
        for _attempt in range(tries):
            route = Route(int(rng.integers(4)), MANEUVERS[int(rng.integers(3))])
            speed = float(rng.uniform(*SPEED_RANGE))
            if interacting:
                # time the agent's pass through a point of the ego's future path
                target = ego_future_path[int(rng.integers(len(ego_future_path)))]
                ss = np.linspace(-ARM_LENGTH, 80.0, 1401)
                pts = route.position(ss)
                d = np.linalg.norm(pts - target, axis=-1)
                j = int(np.argmin(d))
                if d[j] > 3.0:
                    continue
                t_pass = float(rng.uniform(0.0, t_pred_steps * dt))
                s0 = float(ss[j] - speed * t_pass)
            else:
                s0 = float(rng.uniform(-45.0, 25.0))
            plan = AgentPlan(route, s0, speed, rows_len, rows_wid)
            pts, _ = plan.sample(n_steps, t_in_steps, dt)
            inside = np.max(np.abs(pts[1:]), axis=-1) <= VISIBLE_RADIUS
            if not inside[t_in_steps]:
                continue
            rows = states_from_positions(pts[1:], dt, prev=pts[0], valid=inside)
            rows[~inside, :5] = 0.0
            if interacting and _path_distance(rows[fut][inside[fut], :2], ego_future_path) >= 5.0:
                continue
            if fits(rows, rows_len, rows_wid):
                chosen = (plan, rows)
                break
        if chosen is None:
            continue
        placed.append(chosen)
        tracks_rows.append(chosen)

    tracks = [AgentTrack(0, True, ego_plan.length, ego_plan.width, ego_rows)]
    for i, (plan, rows) in enumerate(tracks_rows, start=1):
        tracks.append(AgentTrack(i, False, plan.length, plan.width, rows))
    return Scenario(
        scenario_id=scenario_id or f"intersection-{seed}",
        dt=dt,
        t_in_steps=t_in_steps,
        t_pred_steps=t_pred_steps,
        map=build_map(),
        tracks=tracks,
    )


def _sample_ego_plan(rng: np.random.Generator) -> AgentPlan:
    return AgentPlan(
        Route(int(rng.integers(4)), MANEUVERS[int(rng.integers(3))]),
        s0=float(rng.uniform(-25.0, 2.0)),
        speed=float(rng.uniform(*SPEED_RANGE)),
        length=4.5,
        width=2.0,
    )


def ego_route_positions(seed: int, dt: float = 0.5, t_in_steps: int = 2, t_pred_steps: int = 12) -> np.ndarray:
    """Closed-form ego positions (steps 0..T-1) of the scenario ``seed`` produces."""
    plan = _sample_ego_plan(np.random.default_rng(seed))
    pts, _ = plan.sample(t_in_steps + 1 + t_pred_steps, t_in_steps, dt)
    return pts[1:]
