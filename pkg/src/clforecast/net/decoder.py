"""Ego and scene decoders sharing one context embedding.

Tokens are map-polyline chunks and agent histories, each with a reference
pose.  The ego decoder turns ``M`` learnable mode queries into Gaussian
trajectories plus mode probabilities; the scene decoder broadcasts one
learnable scene mode to every surrounding agent and conditions it on a goal
token.  Both predict in an agent frame: the raw head output sits on a
constant-velocity anchor, and each refinement pass predicts offsets in the
frame of the previous pass's trajectory points, which are then mapped back
to the agent frame (means by the rigid pose, covariances by rotation).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from ..losses import GaussianTrajectory, covariance_from_params, rotate_covariance, rotation
from ..scenario import MapPolyline, PolylineKind
from ..sim import DTYPE, ContractError, DynamicContext
from .attention import DecoderLayer, mlp, relative_pose_features

OUT_SCALE = 5.0  # meters per unit of raw positional head output
FEAT_SCALE = 10.0
PARAM_GROUPS = (
    "theta_static", "theta_dynamic", "theta_goal", "theta_ego", "theta_scene",
    "phi", "mode_embeddings", "scene_mode_embedding",
)
_KINDS = tuple(PolylineKind)


@dataclass(frozen=True)
class NetConfig:
    hidden_dim: int = 64
    n_layers: int = 4
    n_heads: int = 8
    n_modes: int = 5
    n_refinement_iters: int = 2
    rotate_sigma_out: bool = True
    t_pred_steps: int = 12
    t_in_steps: int = 2
    dt: float = 0.5
    sigma_min: float = 1e-4
    map_chunk_m: float = 15.0
    map_points: int = 6

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        for k in ("hidden_dim", "n_layers", "n_heads", "n_modes", "t_pred_steps", "t_in_steps"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.n_refinement_iters < 0:
            raise ValueError("n_refinement_iters must be >= 0")


class GoalToken(NamedTuple):
    agent_id: int
    goal_position: tuple[float, float]  # world frame
    goal_step: int  # future step counted from the open-loop anchor, in [1, t_pred_steps]


class StaticTokens(NamedTuple):
    features: torch.Tensor  # (P, F)
    pose: torch.Tensor  # (P, 3)


class ContextEmbedding(NamedTuple):
    z: torch.Tensor  # (K, H): agent tokens first, then map tokens
    pose: torch.Tensor  # (K, 3)
    agent_ids: tuple[int, ...]  # ids of the agent tokens, in order
    anchor_step: int
    n_map: int

    def agent_row(self, agent_id: int) -> int:
        return self.agent_ids.index(agent_id)


def map_tokens(polylines: Sequence[MapPolyline], cfg: NetConfig) -> StaticTokens:
    """Split polylines into chunks of at most ``map_chunk_m`` and featurize them."""
    feats, poses = [], []
    for poly in polylines:
        pts = np.asarray(poly.points, dtype=float)
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        n_chunks = max(1, int(np.ceil(s[-1] / cfg.map_chunk_m - 1e-9)))
        edges = np.linspace(0.0, s[-1], n_chunks + 1)
        for a, b in zip(edges[:-1], edges[1:]):
            t = np.linspace(a, b, cfg.map_points)
            chunk = np.column_stack([np.interp(t, s, pts[:, 0]), np.interp(t, s, pts[:, 1])])
            d = chunk[-1] - chunk[0]
            h = float(np.arctan2(d[1], d[0]))
            c, sn = np.cos(h), np.sin(h)
            rel = chunk - chunk[0]
            local = np.column_stack([c * rel[:, 0] + sn * rel[:, 1], -sn * rel[:, 0] + c * rel[:, 1]])
            kind = np.zeros(len(_KINDS))
            kind[_KINDS.index(poly.kind)] = 1.0
            feats.append(np.concatenate([local.reshape(-1) / FEAT_SCALE, kind]))
            poses.append([chunk[0, 0], chunk[0, 1], h])
    n_feat = 2 * cfg.map_points + len(_KINDS)
    if not feats:
        return StaticTokens(torch.zeros((0, n_feat), dtype=DTYPE), torch.zeros((0, 3), dtype=DTYPE))
    return StaticTokens(torch.tensor(np.array(feats), dtype=DTYPE), torch.tensor(np.array(poses), dtype=DTYPE))


def agent_features(ctx: DynamicContext, dims: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """History features in each agent's current frame.

    Returns ``(features (A, F), pose (A, 3), present (A,))``; agents invalid at
    the anchor are marked not present.
    """
    pos, head, vel, valid = ctx.position, ctx.heading, ctx.velocity, ctx.valid
    p0 = pos[:, -1]
    h0 = head[:, -1]
    c, s = torch.cos(h0)[:, None], torch.sin(h0)[:, None]
    d = pos - p0[:, None]
    lx = c * d[..., 0] + s * d[..., 1]
    ly = -s * d[..., 0] + c * d[..., 1]
    vx = c * vel[..., 0] + s * vel[..., 1]
    vy = -s * vel[..., 0] + c * vel[..., 1]
    dh = head - h0[:, None]
    m = valid.to(DTYPE)
    per_step = torch.stack(
        [lx / FEAT_SCALE, ly / FEAT_SCALE, torch.cos(dh), torch.sin(dh), vx / FEAT_SCALE, vy / FEAT_SCALE], -1
    ) * m[..., None]
    is_ego = torch.zeros(ctx.n_agents, 1, dtype=DTYPE)
    is_ego[0] = 1.0
    feats = torch.cat([per_step.flatten(1), m, dims / torch.tensor([5.0, 2.0], dtype=DTYPE), is_ego], -1)
    pose = torch.cat([p0, h0[:, None]], -1)
    return feats, pose, valid[:, -1]


def _safe_heading(d: torch.Tensor, prev: torch.Tensor, eps: float) -> torch.Tensor:
    small = d.norm(dim=-1) < eps
    dx = torch.where(small, torch.ones_like(d[..., 0]), d[..., 0])
    dy = torch.where(small, torch.zeros_like(d[..., 1]), d[..., 1])
    return torch.where(small, prev, torch.atan2(dy, dx))


def reference_headings(ref: torch.Tensor, eps: float = 0.05) -> torch.Tensor:
    """Heading of each reference point from its predecessor (origin before the first).

    Below ``eps`` of displacement the previous heading is kept, starting at 0.
    """
    prev = torch.zeros(ref.shape[:-2], dtype=ref.dtype)
    out = []
    last = torch.zeros_like(ref[..., 0, :])
    for k in range(ref.shape[-2]):
        prev = _safe_heading(ref[..., k, :] - last, prev, eps)
        out.append(prev)
        last = ref[..., k, :]
    return torch.stack(out, -1)


def to_world(mu: torch.Tensor, sigma: torch.Tensor, pose: torch.Tensor):
    """Map agent-frame means/covariances to the world with ``pose = (x, y, heading)``."""
    r = rotation(pose[..., 2])
    mu_w = (r[..., None, :, :] @ mu[..., None])[..., 0] + pose[..., None, :2]
    return mu_w, rotate_covariance(sigma, pose[..., 2, None], check=False)


def to_local(mu: torch.Tensor, sigma: torch.Tensor, pose: torch.Tensor):
    r = rotation(-pose[..., 2])
    mu_l = (r[..., None, :, :] @ (mu - pose[..., None, :2])[..., None])[..., 0]
    return mu_l, rotate_covariance(sigma, -pose[..., 2, None], check=False)


@dataclass(frozen=True, eq=False)
class TrajectorySet:
    """Decoder output for ``Q`` queries (modes or agents) in their agent frames."""

    mu: torch.Tensor  # (Q, L, 2)
    sigma: torch.Tensor  # (Q, L, 2, 2)
    pose: torch.Tensor  # (Q, 3) agent pose at the anchor (world)
    first_step: int
    probs: torch.Tensor | None = None  # (Q,) for ego modes
    agent_ids: tuple[int, ...] = ()

    def world(self) -> tuple[torch.Tensor, torch.Tensor]:
        return to_world(self.mu, self.sigma, self.pose)

    def trajectories(self) -> list[GaussianTrajectory]:
        mu, sigma = self.world()
        return [GaussianTrajectory(mu[q], sigma[q], self.first_step) for q in range(mu.shape[0])]


class TrajectoryHead(nn.Module):
    """Raw head plus iterative reference-point refinement."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        H, T = cfg.hidden_dim, cfg.t_pred_steps
        self.cfg = cfg
        self.raw = mlp(H, H, 5 * T, zero_last=True)
        self.ref_enc = nn.ModuleList(mlp(2 * T, H, H) for _ in range(cfg.n_refinement_iters))
        self.refine = nn.ModuleList(mlp(H, H, 5 * T, zero_last=True) for _ in range(cfg.n_refinement_iters))

    def forward(self, q: torch.Tensor, anchor: torch.Tensor):
        """``q (Q, H)``, ``anchor (Q, T, 2)`` -> agent-frame ``mu (Q, T, 2)``, ``sigma (Q, T, 2, 2)``."""
        Q, T = q.shape[0], self.cfg.t_pred_steps
        out = self.raw(q).view(Q, T, 5)
        mu = anchor + OUT_SCALE * out[..., :2]
        sigma = covariance_from_params(out[..., 2], out[..., 3], out[..., 4], self.cfg.sigma_min)
        for enc, head in zip(self.ref_enc, self.refine):
            ref = mu
            psi = reference_headings(ref)
            out = head(q + enc(ref.flatten(1) / FEAT_SCALE)).view(Q, T, 5)
            r = rotation(psi)
            mu = ref + OUT_SCALE * (r @ out[..., :2, None])[..., 0]
            sigma_q = covariance_from_params(out[..., 2], out[..., 3], out[..., 4], self.cfg.sigma_min)
            sigma = rotate_covariance(sigma_q, psi, check=False) if self.cfg.rotate_sigma_out else sigma_q
        return mu, sigma


class DecoderNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        H, T, W = cfg.hidden_dim, cfg.t_pred_steps, cfg.t_in_steps + 1
        n_map_feat = 2 * cfg.map_points + len(_KINDS)
        n_agent_feat = 7 * W + 3
        self.theta_static = mlp(n_map_feat, H, H)
        self.theta_dynamic = mlp(n_agent_feat, H, H)
        self.theta_goal = nn.ModuleDict({"pos": mlp(2, H, H), "step": nn.Embedding(T + 1, H)})
        self.theta_ego = nn.ModuleDict({
            "rel": mlp(5, H, H),
            "layers": nn.ModuleList(DecoderLayer(H, cfg.n_heads) for _ in range(cfg.n_layers)),
            "head": TrajectoryHead(cfg),
        })
        self.theta_scene = nn.ModuleDict({
            "rel": mlp(5, H, H),
            "self_rel": mlp(5, H, H),
            "layers": nn.ModuleList(DecoderLayer(H, cfg.n_heads, with_goal=True) for _ in range(cfg.n_layers)),
            "head": TrajectoryHead(cfg),
        })
        self.phi = mlp(H, H, 1, zero_last=True)
        self.mode_embeddings = nn.Parameter(torch.randn(cfg.n_modes, H) * 0.5)
        self.scene_mode_embedding = nn.Parameter(torch.randn(1, H) * 0.5)
        self.to(DTYPE)

    # -- parameter bookkeeping -------------------------------------------------
    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {g: [] for g in PARAM_GROUPS}
        for name, p in self.named_parameters():
            groups[name.split(".")[0]].append((name, p))
        return groups

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- context ---------------------------------------------------------------
    def static_tokens(self, polylines: Sequence[MapPolyline]) -> StaticTokens:
        return map_tokens(polylines, self.cfg)

    def embed_context(self, static: StaticTokens, ctx: DynamicContext, dims: torch.Tensor) -> ContextEmbedding:
        """Embed valid agent histories and map chunks; ``dims`` is ``(A, 2)`` length/width."""
        feats, pose, present = agent_features(ctx, dims)
        if not bool(present.any()) and static.features.shape[0] == 0:
            raise ContractError("empty context: no valid agent and no map")
        idx = torch.nonzero(present).flatten()
        za = self.theta_dynamic(feats[idx])
        zm = self.theta_static(static.features)
        return ContextEmbedding(
            z=torch.cat([za, zm], 0),
            pose=torch.cat([pose[idx], static.pose], 0),
            agent_ids=tuple(ctx.agent_ids[int(i)] for i in idx),
            anchor_step=ctx.anchor_step,
            n_map=static.features.shape[0],
        )

    def _anchor(self, vel: torch.Tensor) -> torch.Tensor:
        """Constant-velocity reference points ``(Q, T, 2)`` from agent-frame velocities."""
        T, dt = self.cfg.t_pred_steps, self.cfg.dt
        steps = torch.arange(1, T + 1, dtype=DTYPE) * dt
        return vel[:, None, :] * steps[None, :, None]

    @staticmethod
    def _local_velocity(ctx: DynamicContext, agent_idx: list[int]) -> torch.Tensor:
        v = ctx.velocity[agent_idx, -1]
        h = ctx.heading[agent_idx, -1]
        c, s = torch.cos(h), torch.sin(h)
        return torch.stack([c * v[:, 0] + s * v[:, 1], -s * v[:, 0] + c * v[:, 1]], -1)

    def _slice(self, mu, sigma, first_step):
        L = self.cfg.t_pred_steps - first_step + 1
        if L < 1:
            raise ContractError(f"first_step {first_step} beyond horizon {self.cfg.t_pred_steps}")
        return mu[:, :L], sigma[:, :L]

    # -- decoders --------------------------------------------------------------
    def decode_ego(self, Z: ContextEmbedding, ctx: DynamicContext, first_step: int = 1) -> TrajectorySet:
        """``M`` Gaussian trajectories for steps ``first_step .. T_pred`` plus probabilities."""
        if ctx.agent_ids[0] not in Z.agent_ids:
            raise ContractError("ego is not present in the context embedding")
        row = Z.agent_row(ctx.agent_ids[0])
        dec = self.theta_ego
        q_pose = Z.pose[row:row + 1]
        rel = dec["rel"](relative_pose_features(q_pose, Z.pose)).expand(self.cfg.n_modes, -1, -1)
        q = self.mode_embeddings + Z.z[row][None]
        for layer in dec["layers"]:
            q = layer(q, Z.z, rel)
        anchor = self._anchor(self._local_velocity(ctx, [0])).expand(self.cfg.n_modes, -1, -1)
        mu, sigma = dec["head"](q, anchor)
        mu, sigma = self._slice(mu, sigma, first_step)
        probs = torch.softmax(self.phi(q.detach()).squeeze(-1), dim=0)
        return TrajectorySet(mu, sigma, q_pose.expand(self.cfg.n_modes, -1), first_step, probs,
                             (ctx.agent_ids[0],) * self.cfg.n_modes)

    def embed_goals(self, Z: ContextEmbedding, goals: Sequence[GoalToken], rows: list[int], first_step: int):
        T = self.cfg.t_pred_steps
        pose = Z.pose[rows]
        gp = torch.tensor([g.goal_position for g in goals], dtype=DTYPE)
        d = gp - pose[:, :2]
        c, s = torch.cos(pose[:, 2]), torch.sin(pose[:, 2])
        local = torch.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], -1)
        rel_step = torch.tensor([min(max(g.goal_step - (first_step - 1), 0), T) for g in goals])
        return self.theta_goal["pos"](local / FEAT_SCALE) + self.theta_goal["step"](rel_step)

    def decode_scene(
        self,
        Z: ContextEmbedding,
        ctx: DynamicContext,
        goals: Sequence[GoalToken],
        first_step: int = 1,
        agent_ids: Sequence[int] | None = None,
    ) -> TrajectorySet:
        """One goal-conditioned trajectory per surrounding agent in ``agent_ids``.

        ``agent_ids`` defaults to every surrounding agent present in ``Z``; each
        needs a goal token.
        """
        ego_id = ctx.agent_ids[0]
        if agent_ids is None:
            agent_ids = [a for a in Z.agent_ids if a != ego_id]
        agent_ids = list(agent_ids)
        by_id = {g.agent_id: g for g in goals}
        missing = [a for a in agent_ids if a not in by_id]
        if missing:
            raise ContractError(f"missing goal token for agent(s) {missing}")
        absent = [a for a in agent_ids if a not in Z.agent_ids]
        if absent:
            raise ContractError(f"agent(s) {absent} not present in the context")
        T = self.cfg.t_pred_steps
        n = len(agent_ids)
        if n == 0:
            L = T - first_step + 1
            return TrajectorySet(torch.zeros(0, L, 2, dtype=DTYPE), torch.zeros(0, L, 2, 2, dtype=DTYPE),
                                 torch.zeros(0, 3, dtype=DTYPE), first_step, None, ())
        rows = [Z.agent_row(a) for a in agent_ids]
        ctx_idx = [ctx.agent_ids.index(a) for a in agent_ids]
        dec = self.theta_scene
        q_pose = Z.pose[rows]
        rel = dec["rel"](relative_pose_features(q_pose, Z.pose))
        self_rel = dec["self_rel"](relative_pose_features(q_pose, q_pose))
        goal = self.embed_goals(Z, [by_id[a] for a in agent_ids], rows, first_step)
        q = self.scene_mode_embedding + Z.z[rows]
        for layer in dec["layers"]:
            q = layer(q, Z.z, rel, self_rel, goal)
        anchor = self._anchor(self._local_velocity(ctx, ctx_idx))
        mu, sigma = dec["head"](q, anchor)
        mu, sigma = self._slice(mu, sigma, first_step)
        return TrajectorySet(mu, sigma, q_pose, first_step, None, tuple(agent_ids))
