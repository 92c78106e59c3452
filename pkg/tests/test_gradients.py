import math

import numpy as np
import pytest

from acaode.analysis import fd_gradient
from acaode.config import SolverConfig
from acaode.dynamics import constant_dynamics, linear_dynamics
from acaode.errors import CacheMismatchError, NonFiniteStateError, TapeOverflowError, UnknownMethodError
from acaode.gradients import (
    CostStats,
    GradientMethod,
    LossKind,
    TerminalLoss,
    aca_backward,
    grad_aca,
    grad_adjoint,
    grad_naive,
    gradient_dispatch,
    terminal_loss_grad,
)
from acaode.solvers import CheckpointCache, get_tableau, integrate

TOY_CFG = SolverConfig(rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("method", ["aca", "adjoint", "naive"])
def test_toy_gradient_matches_closed_form(linear, method):
    """Verifies dJ/dz0 = 2 z0 e^(2kT) and dJ/dk = 2 T z0^2 e^(2kT) for J = z(T)^2 at T = 1."""
    result = gradient_dispatch(method, linear, [1.0], [1.0], 0.0, 1.0, "dopri5", TOY_CFG)
    expected = 2.0 * math.exp(2.0)
    assert result.d_loss_d_z0[0] == pytest.approx(expected, rel=1e-3)
    assert result.d_loss_d_theta[0] == pytest.approx(expected, rel=1e-3)
    assert result.loss == pytest.approx(math.exp(2.0), rel=1e-4)
    assert result.method == GradientMethod(method)


def test_aca_on_zero_dynamics_is_exact():
    """Verifies that with f = 0 the gradient of z(T)^2 at z0 = 3 is exactly 6."""
    result = grad_aca(constant_dynamics([0.0]), [3.0], [], 0.0, 1.0)
    assert result.d_loss_d_z0[0] == 6.0
    assert result.d_loss_d_theta.size == 0


def test_fixed_step_euler_naive_equals_aca_bitwise():
    """Verifies that constant-step Euler gives bitwise identical naive and ACA gradients."""
    dyn = linear_dynamics(0.7, dim=2)
    cfg = SolverConfig(adaptive=False, n_steps=16)
    naive = grad_naive(dyn, [1.0, -0.5], [0.7], 0.0, 2.0, "euler", cfg)
    aca = grad_aca(dyn, [1.0, -0.5], [0.7], 0.0, 2.0, "euler", cfg)
    assert np.array_equal(naive.d_loss_d_z0, aca.d_loss_d_z0)
    assert np.array_equal(naive.d_loss_d_theta, aca.d_loss_d_theta)
    assert naive.loss == aca.loss


def test_adjoint_costate_closed_form(linear, tight_cfg):
    """Verifies lambda(t) = lambda(T) e^(k (T - t)) along the reverse pass."""
    result = grad_adjoint(linear, [1.0], [1.0], 0.0, 1.0, "dopri5", tight_cfg)
    times, lam = result.costate()
    lam_T = -2.0 * result.z_T[0]
    expected = lam_T * np.exp(1.0 - times)
    assert times[0] == 1.0 and times[-1] == 0.0
    np.testing.assert_allclose(lam[:, 0], expected, rtol=1e-4)


def test_costate_unavailable_for_aca(linear):
    """Verifies that only the adjoint method exposes a costate trajectory."""
    result = grad_aca(linear, [1.0], [1.0], 0.0, 1.0)
    with pytest.raises(ValueError):
        result.costate()


def test_methods_agree_on_van_der_pol(vdp):
    """Verifies that the three methods agree at tight tolerance on a nonlinear problem."""
    cfg = SolverConfig(rtol=1e-9, atol=1e-9)
    grads = {
        m: gradient_dispatch(m, vdp, [2.0, 0.0], [], 0.0, 5.0, "dopri5", cfg).d_loss_d_z0
        for m in ("aca", "adjoint", "naive")
    }
    scale = float(np.max(np.abs(grads["aca"])))
    np.testing.assert_allclose(grads["aca"], grads["naive"], rtol=1e-5, atol=1e-5 * scale)
    np.testing.assert_allclose(grads["aca"], grads["adjoint"], rtol=1e-4, atol=1e-4 * scale)


def test_aca_cost_structure(vdp):
    """Verifies ACA replays exactly stages evaluations per accepted step with no rejections."""
    result = grad_aca(vdp, [2.0, 0.0], [], 0.0, 5.0, "dopri5", SolverConfig(h_init=2.0))
    stats = result.stats
    assert stats.forward_rejected > 0
    assert stats.backward_f_evals == stats.forward_accepted * get_tableau("dopri5").stages
    assert stats.reverse_rejected == 0
    assert 0 < stats.vjp_calls <= stats.backward_f_evals


def test_naive_tape_exceeds_aca_graph(vdp):
    """Verifies that the naive tape outgrows everything ACA records on a run with rejections."""
    cfg = SolverConfig(h_init=2.0)
    naive = grad_naive(vdp, [2.0, 0.0], [], 0.0, 5.0, "dopri5", cfg)
    aca = grad_aca(vdp, [2.0, 0.0], [], 0.0, 5.0, "dopri5", cfg)
    assert naive.stats.forward_rejected > 0
    assert naive.stats.peak_tape_nodes > aca.stats.recorded_nodes
    assert aca.stats.peak_tape_nodes < naive.stats.peak_tape_nodes
    np.testing.assert_array_equal(naive.z_T, aca.z_T)


def test_adjoint_reports_reverse_steps(vdp):
    """Verifies that the adjoint's reverse solve is counted."""
    result = grad_adjoint(vdp, [2.0, 0.0], [], 0.0, 5.0)
    assert result.stats.reverse_accepted > 0
    assert result.stats.backward_f_evals > 0
    assert result.cache is None


def test_naive_tape_budget(vdp):
    """Verifies that the naive method refuses to outgrow its node budget."""
    with pytest.raises(TapeOverflowError) as exc:
        grad_naive(vdp, [2.0, 0.0], [], 0.0, 5.0, "dopri5", SolverConfig(max_tape_nodes=50))
    assert exc.value.code == "TAPE_OVERFLOW"


def test_corrupted_cache_is_detected(linear):
    """Verifies that a checkpoint that does not match its replay raises CacheMismatchError."""
    _, cache = integrate(linear, [1.0], [1.0], 0.0, 1.0)
    states = np.array(cache.z_values)
    states[-1] += 1e-9
    bad = CheckpointCache(cache.time_points, states, cache.accepted_steps, cache.rejected_steps, cache.total_f_evals)
    with pytest.raises(CacheMismatchError):
        aca_backward(linear, np.array([1.0]), bad, get_tableau("dopri5"), np.array([-1.0]))


def test_unknown_method():
    """Verifies that unknown method names raise UnknownMethodError and names are case-insensitive."""
    assert GradientMethod.parse("ACA") is GradientMethod.ACA
    with pytest.raises(UnknownMethodError):
        gradient_dispatch("finite", linear_dynamics(), [1.0], [1.0], 0.0, 1.0)


def test_terminal_losses():
    """Verifies the squared-state and mean-squared-error losses and their gradients."""
    value, grad = terminal_loss_grad(LossKind.SQUARED_STATE, np.array([1.0, 2.0]))
    assert value == 5.0
    np.testing.assert_array_equal(grad, [2.0, 4.0])

    loss = TerminalLoss(LossKind.MSE_TO_TARGET, (1.0, 0.0))
    value, grad = loss(np.array([3.0, 1.0]))
    assert value == pytest.approx((4.0 + 1.0) / 2)
    np.testing.assert_allclose(grad, [2.0, 1.0])
    with pytest.raises(ValueError):
        terminal_loss_grad(LossKind.MSE_TO_TARGET, np.zeros(2))


def test_cost_stats_merge():
    """Verifies counters add and the tape peak takes the maximum."""
    a = CostStats(forward_f_evals=3, peak_tape_nodes=10, recorded_nodes=10)
    b = CostStats(forward_f_evals=4, peak_tape_nodes=7, recorded_nodes=7)
    merged = a.merge(b)
    assert merged.forward_f_evals == 7
    assert merged.peak_tape_nodes == 10
    assert merged.recorded_nodes == 17
    assert merged.total_f_evals == 7


def test_loose_tolerance_adjoint_diverges_where_aca_holds(vdp):
    """Verifies that at tolerance 1e-2 the adjoint reverse solve blows up while ACA stays near the exact gradient."""
    loose = SolverConfig(rtol=1e-2, atol=1e-2)
    flow = SolverConfig(rtol=1e-11, atol=1e-11)

    def flow_loss(x):
        z_T, _ = integrate(vdp, x, [], 0.0, 5.0, "dopri5", flow)
        return float(np.sum(z_T ** 2))

    with pytest.raises(NonFiniteStateError) as exc:
        grad_adjoint(vdp, [2.0, 0.0], [], 0.0, 5.0, "dopri5", loose)
    assert 0.0 < exc.value.t < 5.0

    aca = grad_aca(vdp, [2.0, 0.0], [], 0.0, 5.0, "dopri5", loose)
    exact = fd_gradient(flow_loss, [2.0, 0.0])
    assert np.all(np.isfinite(aca.d_loss_d_z0))
    assert np.max(np.abs(aca.d_loss_d_z0 - exact)) < 2.0
