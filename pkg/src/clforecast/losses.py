"""Full-covariance Gaussian losses for multimodal ego and unimodal scene predictions.

All functions take torch tensors (float64 recommended) and are differentiable
where it makes sense.  Covariances are ``(..., 2, 2)`` tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch

from .sim import ContractError


class LossValidationError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda_cls: float = 1.0
    lambda_reg_ego: float = 0.4
    lambda_reg_scene: float = 0.4
    lambda_n_base: float = 0.1
    lambda_det: float = 1.0
    sigma_min: float = 1e-4

    def __post_init__(self):
        for k in ("lambda_cls", "lambda_reg_ego", "lambda_reg_scene", "lambda_n_base", "lambda_det"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.sigma_min <= 0:
            raise ValueError("sigma_min must be > 0")

    def rollout_weight(self, n: int) -> float:
        return 1.0 if n == 0 else self.lambda_n_base ** n


class Gaussian2D(NamedTuple):
    mu: torch.Tensor  # (2,)
    sigma: torch.Tensor  # (2, 2)


@dataclass(frozen=True, eq=False)
class GaussianTrajectory:
    """Per-step Gaussians for absolute future steps ``first_step ..``."""

    mu: torch.Tensor  # (L, 2)
    sigma: torch.Tensor  # (L, 2, 2)
    first_step: int

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, k: int) -> Gaussian2D:
        return Gaussian2D(self.mu[k], self.sigma[k])


def rotation(theta: torch.Tensor) -> torch.Tensor:
    theta = torch.as_tensor(theta)
    c, s = torch.cos(theta), torch.sin(theta)
    return torch.stack([torch.stack([c, -s], -1), torch.stack([s, c], -1)], -2)


def _as64(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x


def rotate_covariance(sigma, theta, check: bool = True) -> torch.Tensor:
    """``R(theta) @ sigma @ R(theta).T``, symmetrized."""
    sigma = _as64(sigma)
    theta = torch.as_tensor(theta, dtype=sigma.dtype)
    if check:
        a, b, c, d = sigma[..., 0, 0], sigma[..., 0, 1], sigma[..., 1, 0], sigma[..., 1, 1]
        scale = sigma.abs().amax(dim=(-1, -2)).clamp(min=1.0)
        if bool(((b - c).abs() > 1e-9 * scale).any()):
            raise LossValidationError("covariance is not symmetric")
        if bool(((a <= 0) | (a * d - b * c <= 0)).any()):
            raise LossValidationError("covariance is not positive definite")
    r = rotation(theta)
    out = r @ sigma @ r.transpose(-1, -2)
    return 0.5 * (out + out.transpose(-1, -2))


def covariance_from_params(log_s1, log_s2, angle, sigma_min: float) -> torch.Tensor:
    """SPD covariance from principal log-std-devs and orientation.

    Eigenvalues (variances) are clamped below at ``sigma_min``.
    """
    v1 = torch.clamp(torch.exp(2.0 * log_s1), min=sigma_min)
    v2 = torch.clamp(torch.exp(2.0 * log_s2), min=sigma_min)
    diag = torch.diag_embed(torch.stack([v1, v2], -1))
    return rotate_covariance(diag, angle, check=False)


def nll_full_cov(y, mu, sigma, lambda_det: float = 1.0) -> torch.Tensor:
    """Mahalanobis distance plus ``lambda_det * log det(sigma)``, elementwise."""
    y, mu, sigma = _as64(y), _as64(mu), _as64(sigma)
    a, b, c, d = sigma[..., 0, 0], sigma[..., 0, 1], sigma[..., 1, 0], sigma[..., 1, 1]
    det = a * d - b * c
    if bool((det < 1e-18).any()):
        raise NumericError(f"covariance determinant {float(det.min()):.3e} below 1e-18")
    r = y - mu
    rx, ry = r[..., 0], r[..., 1]
    q = (d * rx * rx - (b + c) * rx * ry + a * ry * ry) / det
    pos = q > 0
    maha = torch.where(pos, torch.sqrt(torch.where(pos, q, torch.ones_like(q))), torch.zeros_like(q))
    return maha + lambda_det * torch.log(det)


def select_best_mode(y_ego, mode_means) -> int:
    """Index of the mode with the smallest summed L2 distance; ties go low."""
    y_ego, mode_means = _as64(y_ego), _as64(mode_means)
    dist = (mode_means.detach() - y_ego.detach()[None]).norm(dim=-1).sum(-1)
    return int(torch.argmin(dist))


def _traj_nll(y, mu, sigma, lambda_det):
    return nll_full_cov(y, mu, sigma, lambda_det).sum(-1)


def classification_loss(y_ego, modes: Sequence[GaussianTrajectory], probs, lambda_det: float = 1.0) -> torch.Tensor:
    """Probability-weighted summed NLL of the open-loop modes.

    Mode trajectories enter as constants; only ``probs`` receives gradient.
    """
    probs = _as64(probs)
    if bool((probs < 0).any()) or abs(float(probs.detach().sum()) - 1.0) > 1e-6:
        raise LossValidationError("mode probabilities must be nonnegative and sum to 1")
    if len(modes) != probs.shape[-1]:
        raise LossValidationError(f"{len(modes)} modes but {probs.shape[-1]} probabilities")
    nll = torch.stack([_traj_nll(y_ego, m.mu.detach(), m.sigma.detach(), lambda_det) for m in modes])
    return (probs * nll).sum()


def regression_terms(
    y_ego, best_mode_trajs: Sequence[GaussianTrajectory], t_sim_steps: int, cfg: LossConfig
) -> list[torch.Tensor]:
    """Weighted per-rollout NLL terms; entry ``n`` covers steps ``n*t_sim+1 .. T_pred``."""
    y_ego = _as64(y_ego)
    t_pred = y_ego.shape[0]
    out = []
    for n, traj in enumerate(best_mode_trajs):
        first = n * t_sim_steps + 1
        if traj.first_step != first or len(traj) != t_pred - first + 1:
            raise ContractError(
                f"rollout {n} covers steps {traj.first_step}..{traj.first_step + len(traj) - 1}, "
                f"expected {first}..{t_pred}"
            )
        y = y_ego[first - 1:]
        out.append(cfg.rollout_weight(n) * _traj_nll(y, traj.mu, traj.sigma, cfg.lambda_det))
    return out


def regression_loss(y_ego, best_mode_trajs, t_sim_steps: int, cfg: LossConfig) -> torch.Tensor:
    return torch.stack(regression_terms(y_ego, best_mode_trajs, t_sim_steps, cfg)).sum()


def scene_loss(y_scene, scene_trajs: Sequence[GaussianTrajectory], validity, lambda_det: float = 1.0, n: int = 0):
    """Summed NLL of open-loop scene predictions over valid ground-truth steps."""
    if n != 0:
        raise ContractError("scene loss only accepts open-loop (n = 0) predictions")
    if len(scene_trajs) == 0:
        return torch.zeros((), dtype=torch.float64)
    y_scene, validity = _as64(y_scene), torch.as_tensor(validity, dtype=torch.bool)
    total = torch.zeros((), dtype=torch.float64)
    for k, traj in enumerate(scene_trajs):
        if traj.first_step != 1:
            raise ContractError("scene loss only accepts open-loop (n = 0) predictions")
        L = len(traj)
        nll = nll_full_cov(y_scene[k, :L], traj.mu, traj.sigma, lambda_det)
        total = total + torch.where(validity[k, :L], nll, torch.zeros_like(nll)).sum()
    return total
