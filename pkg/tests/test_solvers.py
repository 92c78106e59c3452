import math

import numpy as np
import pytest

from acaode.config import SolverConfig
from acaode.dynamics import Dynamics, constant_dynamics, linear_dynamics
from acaode.errors import (
    DimensionMismatchError,
    MaxStepsExceededError,
    NonFiniteStateError,
    StepUnderflowError,
)
from acaode.solvers import (
    TABLEAUX,
    ButcherTableau,
    blows_up,
    error_norm,
    initial_step,
    get_tableau,
    integrate,
    propose_step,
    step,
)

THETA = np.array([1.0])


@pytest.mark.parametrize("name", sorted(set(t.name for t in TABLEAUX.values())))
def test_catalog_tableaux_are_consistent(name):
    """Verifies row sums equal c and the weights sum to one for every catalog tableau."""
    tab = get_tableau(name)
    for row, c in zip(tab.a, tab.c):
        assert sum(row) == pytest.approx(c, abs=1e-12)
    assert sum(tab.b) == pytest.approx(1.0, abs=1e-12)
    if tab.b_hat is not None:
        assert sum(tab.b_hat) == pytest.approx(1.0, abs=1e-12)


def test_tableau_aliases_and_unknown_names():
    """Verifies rk23/rk45 aliases and the error for unknown names."""
    assert get_tableau("RK45") is TABLEAUX["dopri5"]
    assert get_tableau("rk23").name == "bogacki_shampine"
    assert get_tableau("dopri5").error_order == 4
    assert get_tableau("dopri5").order == 5
    with pytest.raises(ValueError):
        get_tableau("midpoint")


def test_invalid_tableau_rejected():
    """Verifies that a tableau whose rows do not sum to c is rejected."""
    with pytest.raises(ValueError):
        ButcherTableau("bad", a=((), (0.4,)), b=(0.5, 0.5), b_hat=None, c=(0.0, 0.5), order=2, error_order=2)


def test_euler_step():
    """Verifies one Euler step on f = z: 1 + 0.1."""
    outcome = step("euler", linear_dynamics(), 0.0, np.array([1.0]), THETA, 0.1)
    assert outcome.z_new[0] == pytest.approx(1.1, abs=1e-15)
    assert outcome.err_norm == 0.0
    assert outcome.f_evals == 1


def test_rk4_step_matches_taylor_polynomial():
    """Verifies that RK4 on f = z reproduces the degree-4 Taylor polynomial of e^h."""
    h = 0.1
    outcome = step("rk4", linear_dynamics(), 0.0, np.array([1.0]), THETA, h)
    taylor = 1 + h + h ** 2 / 2 + h ** 3 / 6 + h ** 4 / 24
    assert outcome.z_new[0] == pytest.approx(taylor, abs=1e-14)
    assert outcome.f_evals == 4


def test_dopri5_step_accuracy():
    """Verifies that one Dopri5 step of 0.1 on f = z is within 1e-9 of e^0.1."""
    outcome = step("dopri5", linear_dynamics(), 0.0, np.array([1.0]), THETA, 0.1)
    assert abs(outcome.z_new[0] - math.exp(0.1)) < 1e-9
    assert 0.0 < outcome.err_norm < 1.0


def test_backward_step():
    """Verifies that a negative step integrates backwards."""
    outcome = step("rk4", linear_dynamics(), 1.0, np.array([math.e]), THETA, -0.1)
    assert outcome.z_new[0] == pytest.approx(math.exp(0.9), rel=1e-6)


def test_step_rejects_zero_and_non_finite():
    """Verifies that h = 0 is invalid and overflowing stages raise NonFiniteStateError."""
    with pytest.raises(ValueError):
        step("euler", linear_dynamics(), 0.0, np.array([1.0]), THETA, 0.0)
    with pytest.raises(NonFiniteStateError):
        step("euler", linear_dynamics(), 0.0, np.array([1e308]), np.array([1e10]), 1.0)


def test_error_norm():
    """Verifies the RMS scaled norm and the shape check."""
    err = np.array([1e-6, 1e-6])
    z = np.zeros(2)
    assert error_norm(err, z, z, atol=1e-6, rtol=0.0) == pytest.approx(1.0)
    assert error_norm(np.zeros(2), z, z, 1e-6, 1e-3) == 0.0
    with pytest.raises(DimensionMismatchError):
        error_norm(np.zeros(2), np.zeros(3), np.zeros(2), 1e-6, 1e-3)


def test_propose_step_controller():
    """Verifies the clamped controller factor and the underflow floor."""
    cfg = SolverConfig()
    assert propose_step(0.0, 0.1, 4, cfg) == pytest.approx(1.0)
    assert propose_step(1.0, 0.1, 4, cfg) == pytest.approx(0.09)
    assert propose_step(1e12, 0.1, 4, cfg) == pytest.approx(0.02)
    assert propose_step(math.inf, -0.1, 4, cfg) == pytest.approx(-0.02)
    with pytest.raises(StepUnderflowError):
        propose_step(1e12, 1e-10, 4, cfg, h_min=1e-9)


def test_integrate_lands_exactly_on_end_time(linear):
    """Verifies the adaptive loop ends at T exactly with monotone checkpoints."""
    z_T, cache = integrate(linear, [1.0], THETA, 0.0, 1.0, "dopri5", SolverConfig(rtol=1e-8, atol=1e-8))
    assert cache.time_points[0] == 0.0
    assert cache.time_points[-1] == 1.0
    assert np.all(np.diff(cache.time_points) > 0)
    assert cache.z_values.shape == (cache.accepted_steps + 1, 1)
    assert z_T[0] == pytest.approx(math.e, rel=1e-7)
    assert not cache.z_values.flags.writeable


def test_integrate_backwards(linear, tight_cfg):
    """Verifies that T < t0 integrates in reverse time with decreasing checkpoints."""
    z_0, cache = integrate(linear, [math.e], THETA, 1.0, 0.0, "dopri5", tight_cfg)
    assert z_0[0] == pytest.approx(1.0, rel=1e-8)
    assert np.all(np.diff(cache.time_points) < 0)


def test_fixed_step_integration(linear):
    """Verifies fixed-step mode takes n_steps equal steps."""
    cfg = SolverConfig(adaptive=False, n_steps=8)
    z_T, cache = integrate(linear, [1.0], THETA, 0.0, 1.0, "euler", cfg)
    assert cache.accepted_steps == 8
    assert cache.rejected_steps == 0
    assert z_T[0] == pytest.approx((1 + 1 / 8) ** 8, rel=1e-14)


def test_adaptive_eval_accounting(counting):
    """Verifies that the reported evaluation count matches actual dynamics calls."""
    dyn = counting(linear_dynamics())
    _, cache = integrate(dyn, [1.0], THETA, 0.0, 5.0, "dopri5", SolverConfig(rtol=1e-6, atol=1e-6))
    trials = cache.accepted_steps + cache.rejected_steps
    assert cache.total_f_evals == dyn.evals
    # two for the initial step size, then six or seven per trial depending on FSAL reuse
    assert 2 + 1 + 6 * trials <= dyn.evals <= 2 + 7 * trials


def test_constant_dynamics_integrate_exactly():
    """Verifies that f = c integrates exactly forwards and backwards."""
    dyn = constant_dynamics([1.0])
    cfg = SolverConfig(adaptive=False, n_steps=4)
    z_T, _ = integrate(dyn, [0.0], [], 0.0, 1.0, "euler", cfg)
    assert z_T[0] == 1.0
    z_0, _ = integrate(dyn, z_T, [], 1.0, 0.0, "euler", cfg)
    assert z_0[0] == 0.0


def test_integrate_validates_problem(linear):
    """Verifies dimension and time-span checks."""
    with pytest.raises(DimensionMismatchError):
        integrate(linear, [1.0, 2.0], THETA, 0.0, 1.0)
    with pytest.raises(DimensionMismatchError):
        integrate(linear, [1.0], [1.0, 2.0], 0.0, 1.0)
    with pytest.raises(ValueError):
        integrate(linear, [1.0], THETA, 1.0, 1.0)


def test_max_steps_exceeded(linear):
    """Verifies the accepted-step budget."""
    with pytest.raises(MaxStepsExceededError):
        integrate(linear, [1.0], THETA, 0.0, 10.0, "dopri5", SolverConfig(rtol=1e-10, atol=1e-10, max_steps=3))


def test_initial_step_heuristic(linear):
    """Verifies the zero-derivative ceiling, a positive guess below the span and the h_init bypass."""
    cfg = SolverConfig(rtol=1e-5, atol=1e-5)
    assert initial_step(constant_dynamics([0.0]), 0.0, np.array([1.0]), np.zeros(0), cfg, 3.0, 4) == 3.0
    h = initial_step(linear, 0.0, np.array([1.0]), THETA, cfg, 1.0, 4)
    assert 0.0 < h < 1.0
    assert initial_step(linear, 0.0, np.array([1.0]), THETA, SolverConfig(h_init=0.125), 1.0, 4) == 0.125


class QuadraticDynamics(Dynamics):
    """dz/dt = c z^2, which leaves every bound in finite time."""

    def __init__(self, c: float = 1.0):
        self.c = c

    @property
    def state_dim(self) -> int:
        return 1

    @property
    def param_dim(self) -> int:
        return 0

    def eval(self, t, z, theta):
        return self.c * z * z

    def vjp(self, t, z, theta, v):
        return 2.0 * self.c * z * v, np.zeros(0)


def test_halving_tolerance_never_increases_error(linear):
    """Verifies |z(1) - e| for dz/dt = z does not grow as rtol = atol is halved from 1e-3."""
    errors = []
    for q in range(21):
        tol = 1e-3 * 2.0 ** -q
        z_T, _ = integrate(linear, [1.0], THETA, 0.0, 1.0, "dopri5", SolverConfig(rtol=tol, atol=tol))
        errors.append(abs(z_T[0] - math.e))
    assert errors[1] <= errors[0]
    assert all(b <= a for a, b in zip(errors, errors[1:])), errors


def test_undersized_first_step_is_retried(linear):
    """Verifies an accepted first step far below the controller proposal is redone at that size."""
    cfg = SolverConfig(rtol=1e-3, atol=1e-3)
    _, refined = integrate(linear, [1.0], THETA, 0.0, 1.0, "dopri5", cfg)
    unrefined = cfg.model_copy(update={"first_step_growth": 1e300})
    _, plain = integrate(linear, [1.0], THETA, 0.0, 1.0, "dopri5", unrefined)
    assert refined.rejected_steps >= 1
    assert refined.time_points[1] > plain.time_points[1]
    assert refined.accepted_steps < plain.accepted_steps

    _, fixed_start = integrate(linear, [1.0], THETA, 0.0, 1.0, "dopri5", cfg.model_copy(update={"h_init": 1e-3}))
    assert fixed_start.time_points[1] == 1e-3


def test_integration_is_deterministic(vdp):
    """Verifies repeated integrations give bitwise identical checkpoint caches."""
    cfg = SolverConfig(rtol=1e-6, atol=1e-6)
    _, first = integrate(vdp, [2.0, 0.0], [], 0.0, 5.0, "dopri5", cfg)
    _, second = integrate(vdp, [2.0, 0.0], [], 0.0, 5.0, "dopri5", cfg)
    np.testing.assert_array_equal(first.time_points, second.time_points)
    np.testing.assert_array_equal(first.z_values, second.z_values)
    assert (first.accepted_steps, first.rejected_steps, first.total_f_evals) == (
        second.accepted_steps, second.rejected_steps, second.total_f_evals
    )


@pytest.mark.parametrize("c, t0, T", [(1.0, 0.0, 2.0), (-1.0, 2.0, 0.0)])
def test_finite_time_blow_up_is_non_finite_state(c, t0, T):
    """Verifies z escaping to infinity at t = 1 raises NonFiniteStateError at t = 1, forwards and backwards."""
    with pytest.raises(NonFiniteStateError) as exc:
        integrate(QuadraticDynamics(c), [1.0], [], t0, T)
    assert exc.value.code == "NONFINITE_STATE"
    assert exc.value.t == pytest.approx(1.0, abs=1e-3)


def test_blows_up_criterion():
    """Verifies growth that would overflow before T is detected and bounded growth is not."""
    z = np.array([1e10])
    assert blows_up(z, z * z, 0.0, 1.0)
    assert not blows_up(z, -z * z, 0.0, 1.0)
    assert blows_up(z, -z * z, 1.0, 0.0)
    assert not blows_up(np.array([2.0, 0.0]), np.array([0.0, -2.0]), 0.0, 5.0)
    assert not blows_up(np.array([1.0]), None, 0.0, 1.0)
    assert blows_up(np.array([np.inf]), None, 0.0, 1.0)


def test_step_underflow_carries_time(vdp):
    """Verifies a step floor the controller cannot respect raises StepUnderflowError with the stalled time."""
    cfg = SolverConfig(rtol=1e-10, atol=1e-10, h_min=0.05)
    with pytest.raises(StepUnderflowError) as exc:
        integrate(vdp, [2.0, 0.0], [], 0.0, 5.0, "dopri5", cfg)
    assert exc.value.h_min == 0.05
    assert exc.value.t is not None
    assert 0.0 <= exc.value.t < 5.0
    assert "at t=" in str(exc.value)
