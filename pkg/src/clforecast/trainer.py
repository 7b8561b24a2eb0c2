"""Closed-loop on-policy training.

For each open-loop sample the ego and scene decoders predict from the logged
context; the simulator then advances the context ``N`` times using the
chosen ego mode and, for reactive agents, the goal-conditioned scene
prediction.  Every rollout's ego prediction is regressed against the original
ground truth with weight ``lambda_n_base ** n``; mode classification and the
scene loss use the open-loop predictions only.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch

from .losses import (
    GaussianTrajectory,
    LossConfig,
    classification_loss,
    regression_terms,
    scene_loss,
    select_best_mode,
)
from .net import DecoderNet, GoalToken, NetConfig, StaticTokens, TrajectorySet
from .rng import SeedStreams
from .scenario import GroundTruth, Scenario, extract_ground_truth
from .sim import (
    DTYPE,
    ContractError,
    DynamicContext,
    LogStates,
    SimConfig,
    SimulationMask,
    initial_context,
    rollout_count,
    sample_mask,
    simulate_step,
)

log = logging.getLogger(__name__)

POLICIES = ("on_policy", "off_policy")
SCENE_SOURCES = ("reactive", "log_replay", "hybrid")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlateauConfig:
    factor: float = 0.1
    patience: int = 3
    min_lr: float = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 5e-5
    lr_plateau: PlateauConfig = field(default_factory=PlateauConfig)
    early_stop_patience: int = 6
    t_sim_steps: int = 4
    sim_mask_ratio: float = 0.5
    policy: str = "on_policy"
    scene_source: str = "hybrid"
    loss: LossConfig = field(default_factory=LossConfig)
    net: NetConfig = field(default_factory=NetConfig)
    sim: SimConfig = field(default_factory=lambda: SimConfig(t_sim_steps=4))

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.scene_source not in SCENE_SOURCES:
            raise ValueError(f"scene_source must be one of {SCENE_SOURCES}, got {self.scene_source!r}")
        if not 1 <= self.epochs <= 60:
            raise ValueError("epochs must be in [1, 60]")
        if self.batch_size < 1 or self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("batch_size, learning_rate must be positive; weight_decay >= 0")
        if not 0.0 <= self.sim_mask_ratio <= 1.0:
            raise ValueError("sim_mask_ratio must be in [0, 1]")
        if self.sim.t_sim_steps != self.t_sim_steps:
            object.__setattr__(self, "sim", replace(self.sim, t_sim_steps=self.t_sim_steps))
        self.sim.check(self.net.t_pred_steps)

    @property
    def mask_ratio(self) -> float:
        return {"reactive": 1.0, "log_replay": 0.0, "hybrid": self.sim_mask_ratio}[self.scene_source]


class Sample(NamedTuple):
    """A scenario with everything the rollout loop needs precomputed."""

    scenario: Scenario
    logs: LogStates
    ctx0: DynamicContext
    static: StaticTokens
    dims: torch.Tensor
    gt: GroundTruth
    y_ego: torch.Tensor
    y_scene: torch.Tensor
    scene_valid: torch.Tensor


def prepare_sample(s: Scenario, net: DecoderNet | NetConfig) -> Sample:
    cfg = net.cfg if isinstance(net, DecoderNet) else net
    if (s.t_pred_steps, s.t_in_steps) != (cfg.t_pred_steps, cfg.t_in_steps) or s.dt != cfg.dt:
        raise ContractError(f"scenario {s.scenario_id} horizons do not match the network config")
    from .net.decoder import map_tokens

    logs = LogStates.from_scenario(s)
    gt = extract_ground_truth(s)
    return Sample(
        scenario=s,
        logs=logs,
        ctx0=initial_context(s, logs),
        static=map_tokens(s.map, cfg),
        dims=torch.tensor([[t.length, t.width] for t in s.ordered_tracks()], dtype=DTYPE),
        gt=gt,
        y_ego=torch.as_tensor(gt.ego, dtype=DTYPE),
        y_scene=torch.as_tensor(gt.scene, dtype=DTYPE),
        scene_valid=torch.as_tensor(gt.scene_valid),
    )


def sample_goal_tokens(rng: np.random.Generator, gt: GroundTruth, t_pred_steps: int) -> list[GoalToken]:
    """One goal per surrounding agent: a uniformly drawn valid future step and its position."""
    goals = []
    for k, aid in enumerate(gt.scene_ids):
        steps = np.flatnonzero(gt.scene_valid[k, :t_pred_steps]) + 1
        if steps.size == 0:
            continue
        g = int(steps[rng.integers(steps.size)])
        goals.append(GoalToken(int(aid), (float(gt.scene[k, g - 1, 0]), float(gt.scene[k, g - 1, 1])), g))
    return goals


@dataclass
class RolloutEntry:
    n: int
    context: DynamicContext
    ego: TrajectorySet
    scene: TrajectorySet | None
    mode: int
    reg_term: torch.Tensor


@dataclass
class RolloutRecord:
    entries: list[RolloutEntry]
    N: int
    best_mode: int
    probs: torch.Tensor
    mask: SimulationMask
    goals: list[GoalToken]
    cls_loss: torch.Tensor
    reg_loss: torch.Tensor
    scene_loss: torch.Tensor
    total: torch.Tensor

    @property
    def modes(self) -> list[int]:
        return [e.mode for e in self.entries]

    def loss_terms(self) -> dict[str, float]:
        return {
            "cls": float(self.cls_loss.detach()),
            "reg": float(self.reg_loss.detach()),
            "scene": float(self.scene_loss.detach()),
            "total": float(self.total.detach()),
        }


def rollout(
    model: DecoderNet,
    sample: Sample,
    cfg: TrainConfig,
    mask: SimulationMask,
    goals: Sequence[GoalToken],
) -> RolloutRecord:
    """Run the open-loop pass plus ``N`` closed-loop passes and assemble the losses."""
    T = model.cfg.t_pred_steps
    t_sim = cfg.t_sim_steps
    N = rollout_count(T, t_sim)
    lc = cfg.loss
    ids = sample.gt.scene_ids
    goal_ids = {g.agent_id for g in goals}
    want_scene_loss = lc.lambda_reg_scene > 0
    ctx = sample.ctx0
    entries: list[RolloutEntry] = []
    chosen_trajs: list[GaussianTrajectory] = []
    cls = sc_loss = torch.zeros((), dtype=DTYPE)
    m_star = 0
    probs = None
    for n in range(N + 1):
        first = n * t_sim + 1
        Z = model.embed_context(sample.static, ctx, sample.dims)
        ego = model.decode_ego(Z, ctx, first)
        trajs = ego.trajectories()
        means = torch.stack([t.mu for t in trajs])
        present = set(Z.agent_ids)
        reactive = [a for a, f in zip(ids, mask.flags) if f and a in present and a in goal_ids]
        if n == 0 and want_scene_loss:
            decode = [a for a in ids if a in present and a in goal_ids]
        elif n < N:
            decode = reactive
        else:
            decode = []
        scene = model.decode_scene(Z, ctx, goals, first, decode) if decode else None
        if n == 0:
            probs = ego.probs
            m_star = select_best_mode(sample.y_ego, means)
            cls = classification_loss(sample.y_ego, trajs, probs, lc.lambda_det)
            if scene is not None and want_scene_loss:
                rows = [ids.index(a) for a in scene.agent_ids]
                sc_loss = scene_loss(sample.y_scene[rows], scene.trajectories(), sample.scene_valid[rows],
                                     lc.lambda_det, n=0)
        if cfg.policy == "on_policy":
            mode = m_star
        else:
            mode = select_best_mode(sample.y_ego[first - 1:], means)
        chosen_trajs.append(trajs[mode])
        entries.append(RolloutEntry(n, ctx, ego, scene, mode, torch.zeros((), dtype=DTYPE)))
        if n < N:
            ego_pred = trajs[mode].mu[:t_sim]
            scene_pred = torch.full((len(ids), t_sim, 2), float("nan"), dtype=DTYPE)
            flags = [False] * len(ids)
            if scene is not None:
                mu_w, _ = scene.world()
                for q, a in enumerate(scene.agent_ids):
                    if a in reactive:
                        k = ids.index(a)
                        scene_pred[k] = mu_w[q, :t_sim]
                        flags[k] = True
            ctx = simulate_step(ctx, ego_pred, scene_pred, flags, sample.logs, cfg.sim)
    terms = regression_terms(sample.y_ego, chosen_trajs, t_sim, lc)
    for e, term in zip(entries, terms):
        e.reg_term = term
    reg = torch.stack(terms).sum()
    total = lc.lambda_cls * cls + lc.lambda_reg_ego * reg + lc.lambda_reg_scene * sc_loss
    if not torch.isfinite(total):
        bad = next((e.n for e in entries if not torch.isfinite(e.reg_term)), 0)
        raise TrainingError(f"non-finite loss in scenario {sample.scenario.scenario_id}, rollout {bad}")
    return RolloutRecord(entries, N, m_star, probs, mask, list(goals), cls, reg, sc_loss, total)


def draw_rollout_inputs(sample: Sample, cfg: TrainConfig, streams: SeedStreams, *keys: int):
    mask = sample_mask(streams.rng("mask", *keys), len(sample.gt.scene_ids), cfg.mask_ratio)
    goals = sample_goal_tokens(streams.rng("goal", *keys), sample.gt, sample.scenario.t_pred_steps)
    return mask, goals


def train_sample(
    model: DecoderNet,
    sample: Sample,
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer | None = None,
    streams: SeedStreams | None = None,
    keys: tuple[int, ...] = (0, 0),
) -> tuple[DecoderNet, RolloutRecord]:
    """One rollout and one parameter update on a single sample."""
    streams = streams or SeedStreams(cfg.seed)
    if optimizer is None:
        optimizer = make_optimizer(model, cfg)
    mask, goals = draw_rollout_inputs(sample, cfg, streams, *keys)
    record = rollout(model, sample, cfg, mask, goals)
    optimizer.zero_grad(set_to_none=True)
    record.total.backward()
    optimizer.step()
    return model, record


def make_optimizer(model: DecoderNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def init_model(cfg: TrainConfig) -> DecoderNet:
    with torch.random.fork_rng():
        torch.manual_seed(SeedStreams(cfg.seed).int_seed("init"))
        return DecoderNet(cfg.net)


def open_loop_loss(model: DecoderNet, samples: Sequence[Sample], cfg: TrainConfig) -> float:
    """Mean n = 0 total loss with fixed goal draws; used for LR scheduling."""
    ol = replace(cfg, t_sim_steps=model.cfg.t_pred_steps, scene_source="log_replay")
    streams = SeedStreams(cfg.seed)
    total = 0.0
    with torch.no_grad():
        for i, smp in enumerate(samples):
            mask, goals = draw_rollout_inputs(smp, ol, streams, 1_000_000, i)
            total += float(rollout(model, smp, ol, mask, goals).total)
    return total / len(samples)


class EpochRecord(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_time: float


@dataclass
class TrainResult:
    model: DecoderNet
    trace: list[EpochRecord]
    best_epoch: int


def train(
    train_set: Sequence[Scenario],
    val_set: Sequence[Scenario],
    cfg: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Deterministic training with plateau LR decay and early stopping."""
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    model = init_model(cfg)
    streams = SeedStreams(cfg.seed)
    train_samples = [prepare_sample(s, model) for s in train_set]
    val_samples = [prepare_sample(s, model) for s in val_set]
    opt = make_optimizer(model, cfg)
    pl = cfg.lr_plateau
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=pl.factor, patience=pl.patience, min_lr=pl.min_lr
    )
    trace: list[EpochRecord] = []
    best_val, best_state, best_epoch, since_best = math.inf, None, 0, 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        model.train()
        order = streams.rng("shuffle", epoch).permutation(len(train_samples))
        epoch_loss = 0.0
        for b in range(0, len(order), cfg.batch_size):
            batch = order[b:b + cfg.batch_size]
            opt.zero_grad(set_to_none=True)
            for i in batch:
                smp = train_samples[int(i)]
                mask, goals = draw_rollout_inputs(smp, cfg, streams, epoch, int(i))
                try:
                    record = rollout(model, smp, cfg, mask, goals)
                except TrainingError as e:
                    raise TrainingError(f"epoch {epoch}: {e}") from e
                (record.total / len(batch)).backward()
                epoch_loss += float(record.total.detach())
            opt.step()
        epoch_loss /= len(train_samples)
        model.eval()
        val = open_loop_loss(model, val_samples, cfg)
        if not math.isfinite(val):
            raise TrainingError(f"epoch {epoch}: non-finite validation loss")
        sched.step(val)
        lr = opt.param_groups[0]["lr"]
        rec = EpochRecord(epoch, epoch_loss, val, lr, time.perf_counter() - t0)
        trace.append(rec)
        log.info("epoch %d train %.4f val %.4f lr %.2e", epoch, epoch_loss, val, lr)
        if on_epoch:
            on_epoch(rec)
        if val < best_val:
            best_val, best_epoch, since_best = val, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            since_best += 1
        if lr <= pl.min_lr * (1 + 1e-9) and since_best >= cfg.early_stop_patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, trace, best_epoch)
