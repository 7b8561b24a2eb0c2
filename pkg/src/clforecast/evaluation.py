"""Receding-horizon evaluation against log-replay surroundings.

At each replanning anchor the predictor's highest-confidence ego plan is
executed for ``t_sim_steps`` steps; every surrounding agent follows its log.
Collisions use oriented boxes from the track dimensions and the heading the
simulator derives from the executed positions.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Protocol, Sequence

import numpy as np
import torch

from .geometry import overlap_many
from .net import DecoderNet
from .scenario import Scenario
from .sim import ContractError, DynamicContext, SimConfig, simulate_segment
from .trainer import Sample, prepare_sample

METRICS = ("collision", "l2")
DEFAULT_T_SIM_S = (6.0, 3.0, 2.0, 1.5, 1.0, 0.5)
DEFAULT_SEGMENTS = ((0.5, 1.0), (4.0, 6.0))


class Predictor(Protocol):
    def plan(self, sample: Sample, ctx: DynamicContext, first_step: int) -> torch.Tensor:
        """World ego positions for future steps ``first_step .. T_pred``."""


class NetPredictor:
    """Highest-probability mode of a trained decoder."""

    def __init__(self, model: DecoderNet):
        self.model = model
        self.cfg = model.cfg

    def plan(self, sample, ctx, first_step):
        with torch.no_grad():
            Z = self.model.embed_context(sample.static, ctx, sample.dims)
            ego = self.model.decode_ego(Z, ctx, first_step)
            m = int(torch.argmax(ego.probs))
            return ego.trajectories()[m].mu


class OraclePredictor:
    """Always returns the logged ego future."""

    def plan(self, sample, ctx, first_step):
        return sample.y_ego[first_step - 1:]


@dataclass(frozen=True)
class EvalConfig:
    t_sim_steps_list: tuple[int, ...] = (12, 6, 4, 3, 2, 1)
    segment_windows: tuple[tuple[float, float], ...] = DEFAULT_SEGMENTS

    def __post_init__(self):
        if not self.t_sim_steps_list:
            raise ValueError("t_sim_steps_list must not be empty")
        if any(int(s) < 1 for s in self.t_sim_steps_list):
            raise ValueError("t_sim_steps must be >= 1")
        for a, b in self.segment_windows:
            if not 0 <= a <= b:
                raise ValueError(f"bad segment window ({a}, {b})")

    @classmethod
    def from_seconds(cls, t_sim_s: Iterable[float], dt: float = 0.5, **kw) -> "EvalConfig":
        steps = []
        for t in t_sim_s:
            k = round(t / dt)
            if k < 1 or abs(k * dt - t) > 1e-9:
                raise ValueError(f"t_sim {t} s is not a positive multiple of dt {dt}")
            steps.append(k)
        return cls(tuple(steps), **kw)


class EgoRollout(NamedTuple):
    position: torch.Tensor  # (T, 2)
    heading: torch.Tensor  # (T,)
    replans: int


def closed_loop_rollout(sample: Sample | Scenario, predictor: Predictor, t_sim_steps: int) -> EgoRollout:
    """Execute the predictor's plans every ``t_sim_steps`` until the horizon ends."""
    if isinstance(sample, Scenario):
        net_cfg = getattr(predictor, "cfg", None)
        sample = prepare_sample(sample, net_cfg or _cfg_for(sample))
    s = sample.scenario
    T = s.t_pred_steps
    if not 1 <= t_sim_steps <= T:
        raise ContractError(f"t_sim_steps must lie in [1, {T}], got {t_sim_steps}")
    ctx = sample.ctx0
    n_sur = ctx.n_agents - 1
    pos, head = [], []
    done, replans = 0, 0
    while done < T:
        S = min(t_sim_steps, T - done)
        plan = torch.as_tensor(predictor.plan(sample, ctx, done + 1))
        if plan.shape[0] < S:
            raise ContractError(f"plan covers {plan.shape[0]} steps, need {S}")
        ctx, new = simulate_segment(ctx, plan[:S], None, (False,) * n_sur, sample.logs, SimConfig(S))
        pos.append(new.position[0])
        head.append(new.heading[0])
        done += S
        replans += 1
    return EgoRollout(torch.cat(pos).detach(), torch.cat(head).detach(), replans)


def _cfg_for(s: Scenario):
    from .net import NetConfig

    return NetConfig(t_pred_steps=s.t_pred_steps, t_in_steps=s.t_in_steps, dt=s.dt)


def rollout_metrics(sample: Sample, ro: EgoRollout) -> tuple[np.ndarray, np.ndarray]:
    """Per-step collision flags and L2 errors, each ``(T,)``."""
    s = sample.scenario
    T = s.t_pred_steps
    c = s.current_step
    ego_pos = ro.position.numpy()
    l2 = np.linalg.norm(ego_pos - sample.y_ego.numpy(), axis=-1)
    tracks = s.ordered_tracks()
    ego = tracks[0]
    coll = np.zeros(T, dtype=bool)
    if len(tracks) > 1:
        st = np.stack([t.states[c + 1:c + 1 + T] for t in tracks[1:]])  # (A-1, T, 6)
        A1 = st.shape[0]
        valid = st[..., 5] > 0.5
        dims = np.array([[t.length, t.width] for t in tracks[1:]])
        ex = np.repeat(ego_pos[None, :, 0], A1, 0)
        ey = np.repeat(ego_pos[None, :, 1], A1, 0)
        eh = np.repeat(ro.heading.numpy()[None], A1, 0)
        hit = overlap_many(
            ex.ravel(), ey.ravel(), eh.ravel(),
            np.full(ex.size, ego.length), np.full(ex.size, ego.width),
            st[..., 0].ravel(), st[..., 1].ravel(), st[..., 2].ravel(),
            np.repeat(dims[:, 0], T), np.repeat(dims[:, 1], T),
        ).reshape(A1, T)
        coll = (hit & valid).any(0)
    return coll, l2


class Stat(NamedTuple):
    mean: float
    std: float
    n: int


@dataclass
class MetricsReport:
    """Per-run, per-timestep metric tallies.

    ``runs[(model, t_sim_steps, metric)]`` is ``(R, T)``: one row per
    parameter set, each entry averaged over scenarios.  Standard deviations
    are taken across runs (population form).
    """

    dt: float
    t_pred_steps: int
    n_scenarios: int
    models: list[str]
    t_sim_steps_list: list[int]
    segment_windows: list[tuple[float, float]]
    runs: dict[tuple[str, int, str], np.ndarray] = field(default_factory=dict)

    def _n(self, model, t_sim, metric) -> int:
        return self.runs[(model, t_sim, metric)].shape[0] * self.n_scenarios

    def times(self) -> np.ndarray:
        return self.dt * np.arange(1, self.t_pred_steps + 1)

    def curve(self, model: str, t_sim: int, metric: str) -> list[Stat]:
        r = self.runs[(model, t_sim, metric)]
        n = self._n(model, t_sim, metric)
        return [Stat(float(m), float(s), n) for m, s in zip(r.mean(0), r.std(0))]

    def _window_stat(self, model, t_sim, metric, cols) -> Stat:
        r = self.runs[(model, t_sim, metric)][:, cols].mean(1)
        return Stat(float(r.mean()), float(r.std()), self._n(model, t_sim, metric))

    def whole_horizon(self, model: str, t_sim: int, metric: str) -> Stat:
        return self._window_stat(model, t_sim, metric, slice(None))

    def segment_steps(self, window: tuple[float, float]) -> np.ndarray:
        t = self.times()
        return np.flatnonzero((t >= window[0] - 1e-9) & (t <= window[1] + 1e-9))

    def segment(self, model: str, t_sim: int, metric: str, window: tuple[float, float]) -> Stat:
        cols = self.segment_steps(window)
        if cols.size == 0:
            raise ValueError(f"segment {window} contains no timesteps")
        return self._window_stat(model, t_sim, metric, cols)


def evaluate(
    scenarios: Sequence[Scenario],
    predictors: Mapping[str, Sequence[Predictor]],
    cfg: EvalConfig = EvalConfig(),
) -> MetricsReport:
    """Roll out every predictor on every scenario at every replanning period."""
    if not scenarios or not predictors or any(len(v) == 0 for v in predictors.values()):
        raise ValueError("evaluation needs scenarios and at least one predictor per model")
    s0 = scenarios[0]
    T = s0.t_pred_steps
    for s in scenarios:
        if (s.t_pred_steps, s.dt) != (T, s0.dt):
            raise ContractError("all scenarios must share dt and horizon")
    for k in cfg.t_sim_steps_list:
        if k > T:
            raise ContractError(f"t_sim_steps {k} exceeds horizon {T}")
    report = MetricsReport(s0.dt, T, len(scenarios), list(predictors), list(cfg.t_sim_steps_list),
                           [tuple(w) for w in cfg.segment_windows])
    for name, preds in predictors.items():
        net_cfg = getattr(preds[0], "cfg", None) or _cfg_for(s0)
        samples = [prepare_sample(s, net_cfg) for s in scenarios]
        for k in cfg.t_sim_steps_list:
            coll = np.zeros((len(preds), T))
            l2 = np.zeros((len(preds), T))
            for r, pred in enumerate(preds):
                for smp in samples:
                    c, d = rollout_metrics(smp, closed_loop_rollout(smp, pred, k))
                    coll[r] += c
                    l2[r] += d
            report.runs[(name, k, "collision")] = coll / len(samples)
            report.runs[(name, k, "l2")] = l2 / len(samples)
    return report


def relative_improvement(a: float, b: float) -> float:
    """Improvement of ``a`` over baseline ``b`` in percent: ``(b - a) * 100 / b``."""
    if b == 0:
        return math.nan
    return (b - a) * 100.0 / b


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if x == 0:
        return "0"
    return f"{x:.9g}"


def _header(run_id: str, config_hash: str) -> str:
    return f"# run_id={run_id} config_hash={config_hash}\n"


def _write(rows: list[list], columns: list[str], run_id: str, config_hash: str) -> str:
    buf = io.StringIO()
    buf.write(_header(run_id, config_hash))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return buf.getvalue()


def per_timestep_csv(rep: MetricsReport, run_id: str = "", config_hash: str = "") -> str:
    rows = []
    for m in rep.models:
        for k in rep.t_sim_steps_list:
            for metric in METRICS:
                for t, st in zip(rep.times(), rep.curve(m, k, metric)):
                    rows.append([m, k * rep.dt, t, metric, st.mean, st.std, st.n])
    return _write(rows, ["model", "t_sim_s", "t_s", "metric", "mean", "std", "n"], run_id, config_hash)


SUMMARY_COLUMNS = ["model", "t_sim_s", "collision_mean", "collision_std", "l2_mean", "l2_std", "n"]


def summary_csv(rep: MetricsReport, run_id: str = "", config_hash: str = "") -> str:
    """Whole-horizon means per model and replanning period.

    For every model after the first, an ``improvement(<model>/<baseline>)``
    row gives the relative improvement of its means over the first model.
    """
    rows = []
    for m in rep.models:
        for k in rep.t_sim_steps_list:
            c, d = rep.whole_horizon(m, k, "collision"), rep.whole_horizon(m, k, "l2")
            rows.append([m, k * rep.dt, c.mean * 100.0, c.std * 100.0, d.mean, d.std, c.n])
    base = rep.models[0]
    for m in rep.models[1:]:
        for k in rep.t_sim_steps_list:
            a_c, b_c = rep.whole_horizon(m, k, "collision").mean, rep.whole_horizon(base, k, "collision").mean
            a_l, b_l = rep.whole_horizon(m, k, "l2").mean, rep.whole_horizon(base, k, "l2").mean
            rows.append([f"improvement({m}/{base})", k * rep.dt, relative_improvement(a_c, b_c), "",
                         relative_improvement(a_l, b_l), "", ""])
    return _write(rows, SUMMARY_COLUMNS, run_id, config_hash)


def segments_csv(rep: MetricsReport, run_id: str = "", config_hash: str = "") -> str:
    rows = []
    for m in rep.models:
        for k in rep.t_sim_steps_list:
            for w in rep.segment_windows:
                for metric in METRICS:
                    st = rep.segment(m, k, metric, w)
                    rows.append([m, k * rep.dt, w[0], w[1], metric, st.mean, st.std, st.n])
    cols = ["model", "t_sim_s", "start_s", "end_s", "metric", "mean", "std", "n"]
    return _write(rows, cols, run_id, config_hash)


def read_csv(text: str) -> list[dict[str, str]]:
    """Parse one of the report CSVs, skipping the attribution header."""
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))
