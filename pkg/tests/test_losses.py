import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from clforecast.losses import (
    GaussianTrajectory,
    LossConfig,
    LossValidationError,
    NumericError,
    classification_loss,
    covariance_from_params,
    nll_full_cov,
    regression_loss,
    regression_terms,
    rotate_covariance,
    scene_loss,
    select_best_mode,
)
from clforecast.sim import ContractError

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


def test_rotate_quarter_pi_hand_value():
    out = rotate_covariance(t([[4.0, 0.0], [0.0, 1.0]]), math.pi / 4)
    assert torch.allclose(out, t([[2.5, 1.5], [1.5, 2.5]]), atol=1e-12)


def test_rotate_identity_invariant():
    assert torch.allclose(rotate_covariance(torch.eye(2, dtype=D), math.pi / 3), torch.eye(2, dtype=D), atol=1e-15)


def test_rotate_output_symmetric():
    out = rotate_covariance(t([[3.0, 0.7], [0.7, 1.0]]), 0.123)
    assert torch.equal(out, out.T)


@pytest.mark.parametrize("bad", [[[1.0, 0.5], [0.0, 1.0]], [[-1.0, 0.0], [0.0, 1.0]], [[1.0, 2.0], [2.0, 1.0]]])
def test_rotate_rejects_non_spd(bad):
    with pytest.raises(LossValidationError):
        rotate_covariance(t(bad), 0.3)


angles = st.floats(-10, 10, allow_nan=False)


@st.composite
def spd(draw):
    a = draw(st.floats(0.01, 10))
    b = draw(st.floats(0.01, 10))
    th = draw(st.floats(-math.pi, math.pi))
    return covariance_from_params(t(0.5 * math.log(a)), t(0.5 * math.log(b)), t(th), 1e-6)


@given(spd(), angles, angles)
def test_rotation_composition(sigma, a, b):
    lhs = rotate_covariance(rotate_covariance(sigma, a), b)
    assert torch.allclose(lhs, rotate_covariance(sigma, a + b), atol=1e-9)


def test_nll_closed_forms():
    I = torch.eye(2, dtype=D)
    assert nll_full_cov(t([1.0, 2.0]), t([1.0, 2.0]), I).item() == 0.0
    assert nll_full_cov(t([3.0, 4.0]), t([0.0, 0.0]), I).item() == 5.0
    val = nll_full_cov(t([1.0, 0.0]), t([0.0, 0.0]), t([[4.0, 0.0], [0.0, 1.0]]))
    assert val.item() == pytest.approx(0.5 + math.log(4.0), abs=1e-14)
    assert val.item() == pytest.approx(1.8863, abs=1e-4)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.05, 5), st.floats(0, 3))
def test_nll_isotropic_closed_form(rx, ry, c, lam):
    # log det(c^2 I) = 4 ln c
    val = nll_full_cov(t([rx, ry]), t([0.0, 0.0]), c * c * torch.eye(2, dtype=D), lam).item()
    assert val == pytest.approx(math.hypot(rx, ry) / c + lam * 4 * math.log(c), rel=1e-10, abs=1e-12)


def test_nll_lambda_scales_log_det():
    s = t([[2.0, 0.3], [0.3, 1.0]])
    a = nll_full_cov(t([0.0, 0.0]), t([0.0, 0.0]), s, 1.0)
    b = nll_full_cov(t([0.0, 0.0]), t([0.0, 0.0]), s, 2.5)
    assert b.item() == pytest.approx(2.5 * a.item())


def test_nll_zero_residual_gradient_is_finite():
    mu = t([1.0, 1.0]).requires_grad_()
    nll_full_cov(t([1.0, 1.0]), mu, torch.eye(2, dtype=D)).backward()
    assert torch.all(torch.isfinite(mu.grad))


def test_nll_tiny_determinant_raises():
    with pytest.raises(NumericError):
        nll_full_cov(t([0.0, 0.0]), t([0.0, 0.0]), 1e-10 * torch.eye(2, dtype=D))


def test_covariance_from_params_clamps_variance():
    s = covariance_from_params(t(-20.0), t(0.0), t(0.0), 1e-4)
    assert torch.allclose(torch.linalg.eigvalsh(s)[0], t(1e-4))


def _traj(mu, first=1, sig=1.0):
    mu = t(mu)
    return GaussianTrajectory(mu, sig * torch.eye(2, dtype=D).expand(mu.shape[0], 2, 2).clone(), first)


def test_best_mode_single():
    assert select_best_mode(t([[0.0, 0.0]]), t([[[5.0, 5.0]]])) == 0


def test_best_mode_exact_winner():
    y = t(np.random.default_rng(0).normal(size=(12, 2)))
    modes = torch.stack([y + 1, y + 2, y, y - 0.5, y + 3])
    assert select_best_mode(y, modes) == 2


def test_best_mode_tie_lowest_index():
    y = t([[0.0, 0.0]])
    assert select_best_mode(y, t([[[1.0, 0.0]], [[0.0, 1.0]], [[-1.0, 0.0]]])) == 0


def test_best_mode_brute_force_table():
    rng = np.random.default_rng(1)
    for _ in range(100):
        y = rng.normal(size=(12, 2))
        modes = y + rng.normal(scale=2.0, size=(5, 12, 2))
        table = [sum(math.dist(modes[m, k], y[k]) for k in range(12)) for m in range(5)]
        assert select_best_mode(t(y), t(modes)) == int(np.argmin(table))


@given(st.floats(0.01, 100))
def test_best_mode_scale_invariance(c):
    rng = np.random.default_rng(2)
    y = rng.normal(size=(6, 2))
    modes = rng.normal(size=(4, 6, 2))
    assert select_best_mode(t(y * c), t(modes * c)) == select_best_mode(t(y), t(modes))


def test_classification_single_and_one_hot():
    y = t(np.zeros((4, 2)))
    modes = [_traj(np.ones((4, 2)) * k) for k in range(3)]
    per_mode = [nll_full_cov(y, m.mu, m.sigma).sum().item() for m in modes]
    assert classification_loss(y, modes[:1], t([1.0])).item() == pytest.approx(per_mode[0])
    assert classification_loss(y, modes, t([0.0, 1.0, 0.0])).item() == pytest.approx(per_mode[1])
    assert classification_loss(y, modes, t([1 / 3] * 3)).item() == pytest.approx(np.mean(per_mode))


def test_classification_gradient_only_on_probs():
    y = t(np.zeros((4, 2)))
    mu = t(np.ones((4, 2))).requires_grad_()
    modes = [GaussianTrajectory(mu, torch.eye(2, dtype=D).expand(4, 2, 2), 1)]
    logits = t([0.0]).requires_grad_()
    classification_loss(y, modes, torch.softmax(logits, 0)).backward()
    assert mu.grad is None
    assert logits.grad is not None


@pytest.mark.parametrize("probs", [[0.5, 0.6], [-0.1, 1.1]])
def test_classification_rejects_bad_probs(probs):
    modes = [_traj(np.zeros((2, 2))), _traj(np.zeros((2, 2)))]
    with pytest.raises(LossValidationError):
        classification_loss(t(np.zeros((2, 2))), modes, t(probs))


def test_regression_hand_expansion():
    rng = np.random.default_rng(3)
    y = t(rng.normal(size=(12, 2)))
    trajs = [_traj(rng.normal(size=(12 - 4 * n, 2)), 4 * n + 1, sig=1.0 + n) for n in range(3)]
    terms = regression_terms(y, trajs, 4, LossConfig())
    expect = []
    for n, w, lo in ((0, 1.0, 0), (1, 0.1, 4), (2, 0.01, 8)):
        tr = trajs[n]
        assert len(tr) == 12 - lo
        s = sum(nll_full_cov(y[lo + k], tr.mu[k], tr.sigma[k]).item() for k in range(12 - lo))
        expect.append(w * s)
    assert [x.item() for x in terms] == pytest.approx(expect, rel=1e-12)
    assert regression_loss(y, trajs, 4, LossConfig()).item() == pytest.approx(sum(expect), rel=1e-12)


def test_regression_weight_annihilation():
    rng = np.random.default_rng(4)
    y = t(rng.normal(size=(12, 2)))
    trajs = [_traj(rng.normal(size=(12 - 4 * n, 2)), 4 * n + 1) for n in range(3)]
    cfg = LossConfig(lambda_n_base=0.0)
    assert regression_loss(y, trajs, 4, cfg).item() == regression_loss(y, trajs[:1], 12, cfg).item()


def test_regression_coverage_contract():
    y = t(np.zeros((12, 2)))
    with pytest.raises(ContractError, match="rollout 1"):
        regression_loss(y, [_traj(np.zeros((12, 2))), _traj(np.zeros((7, 2)), 5)], 4, LossConfig())


def test_scene_loss_cases():
    assert scene_loss(t(np.zeros((0, 12, 2))), [], torch.zeros(0, 12, dtype=bool)).item() == 0.0
    y = t(np.arange(24.0).reshape(1, 12, 2))
    assert scene_loss(y, [_traj(y[0].numpy())], torch.ones(1, 12, dtype=bool)).item() == 0.0


def test_scene_loss_additive_and_masks_invalid():
    rng = np.random.default_rng(5)
    y = t(rng.normal(size=(2, 12, 2)))
    trajs = [_traj(rng.normal(size=(12, 2))) for _ in range(2)]
    valid = torch.ones(2, 12, dtype=bool)
    valid[1, 6:] = False
    both = scene_loss(y, trajs, valid).item()
    a = scene_loss(y[:1], trajs[:1], valid[:1]).item()
    b = scene_loss(y[1:], trajs[1:], valid[1:]).item()
    assert both == pytest.approx(a + b)
    manual = sum(nll_full_cov(y[1, k], trajs[1].mu[k], trajs[1].sigma[k]).item() for k in range(6))
    assert b == pytest.approx(manual)


def test_scene_loss_rejects_closed_loop_predictions():
    y = t(np.zeros((1, 12, 2)))
    with pytest.raises(ContractError):
        scene_loss(y, [_traj(np.zeros((8, 2)), 5)], torch.ones(1, 12, dtype=bool))
    with pytest.raises(ContractError):
        scene_loss(y, [_traj(np.zeros((12, 2)))], torch.ones(1, 12, dtype=bool), n=1)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda_cls=-1.0)
    with pytest.raises(ValueError):
        LossConfig(sigma_min=0.0)
    assert [LossConfig().rollout_weight(n) for n in range(3)] == [1.0, 0.1, pytest.approx(0.01)]


def test_non_best_mode_does_not_affect_regression():
    y = t(np.zeros((12, 2)))
    mu_other = t(np.ones((12, 2))).requires_grad_()
    best = _traj(np.zeros((12, 2)) + 0.1)
    other = GaussianTrajectory(mu_other, torch.eye(2, dtype=D).expand(12, 2, 2), 1)
    m = select_best_mode(y, torch.stack([best.mu, other.mu]))
    assert m == 0
    reg = regression_loss(y, [[best, other][m]], 12, LossConfig())
    assert not reg.requires_grad or mu_other.grad is None
