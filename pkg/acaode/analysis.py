"""
Verification Instruments.

Finite-difference gradient oracles, an empirical convergence-order estimator, and
measurements of how well reverse-time integration reconstructs the initial state
compared with replaying the forward checkpoints.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .config import FDOracleConfig, SolverConfig
from .dynamics import Dynamics
from .errors import AcaOdeError, DegenerateFitError, NonFiniteLossError
from .solvers import ButcherTableau, CheckpointCache, ValueTracer, get_tableau, integrate, stage_pass

logger = logging.getLogger("acaode.analysis")

ScalarLoss = Callable[[np.ndarray], float]


def _probe(loss_fn: ScalarLoss, x: np.ndarray) -> float:
    try:
        value = float(loss_fn(x))
    except AcaOdeError as exc:
        raise NonFiniteLossError(f"Loss probe failed: {exc}") from exc
    if not np.isfinite(value):
        raise NonFiniteLossError(f"Loss probe returned {value}")
    return value


def fd_gradient(loss_fn: ScalarLoss, theta, cfg: Optional[FDOracleConfig] = None) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time.

    Args:
        loss_fn: Deterministic scalar loss.
        theta: Point of evaluation.
        cfg: Probe half-width.

    Returns:
        (L(theta + eps e_i) - L(theta - eps e_i)) / (2 eps) for every i.

    Raises:
        NonFiniteLossError: If any probe diverges.
    """
    cfg = cfg or FDOracleConfig()
    theta = np.array(theta, dtype=float).reshape(-1)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = cfg.epsilon
        grad[i] = (_probe(loss_fn, theta + step) - _probe(loss_fn, theta - step)) / (2.0 * cfg.epsilon)
    return grad


def fd_directional(loss_fn: ScalarLoss, x, u, cfg: Optional[FDOracleConfig] = None) -> float:
    """Central difference of loss_fn at x along direction u."""
    cfg = cfg or FDOracleConfig()
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return (_probe(loss_fn, x + cfg.epsilon * u) - _probe(loss_fn, x - cfg.epsilon * u)) / (2.0 * cfg.epsilon)


def _roundoff_floor(reference: np.ndarray) -> float:
    return 1e3 * np.finfo(float).eps * max(float(np.max(np.abs(reference))), 1.0)


def loglog_slope(x: Sequence[float], errors: Sequence[float], floor: float = 0.0) -> float:
    """Least-squares slope of log(errors) against log(x).

    Raises:
        DegenerateFitError: If fewer than two points are given or any error is at or below floor.
    """
    x = np.asarray(x, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if x.size < 2:
        raise DegenerateFitError("Need at least two points for a slope")
    if np.any(~np.isfinite(errors)) or np.any(errors <= floor):
        raise DegenerateFitError(f"Errors {errors} reach round-off level {floor:.1e}; reduce the step range")
    return float(np.polyfit(np.log(x), np.log(errors), 1)[0])


@dataclass(frozen=True)
class ConvergenceReport:
    """Global errors of fixed-step runs and their fitted order.

    Attributes:
        tableau: Catalog name of the tableau.
        h_values: Step sizes.
        errors: Norm of z_numeric(T) - reference per step size.
        slope: Fitted log-log slope.
    """
    tableau: str
    h_values: List[float]
    errors: List[float]
    slope: float


def convergence_study(
    dyn: Dynamics,
    z0,
    theta,
    t0: float,
    T: float,
    tableau: Union[str, ButcherTableau],
    h_list: Sequence[float],
    reference,
) -> ConvergenceReport:
    """Measure global error against a reference solution for fixed step sizes.

    Args:
        h_list: At least four step sizes; (T - t0) / h should be an integer.
        reference: High-accuracy or closed-form z(T).

    Raises:
        DegenerateFitError: If any error is at round-off level.
    """
    tableau = get_tableau(tableau)
    if len(h_list) < 4:
        raise ValueError("convergence_study needs at least four step sizes")
    reference = np.asarray(reference, dtype=float)
    errors = []
    for h in h_list:
        n_steps = max(1, int(round(abs(T - t0) / h)))
        z_T, _ = integrate(dyn, z0, theta, t0, T, tableau, SolverConfig(adaptive=False, n_steps=n_steps))
        errors.append(float(np.linalg.norm(z_T - reference)))
    slope = loglog_slope(h_list, errors, _roundoff_floor(reference))
    logger.debug(f"{tableau.name}: errors {errors} -> slope {slope:.3f}")
    return ConvergenceReport(tableau.name, [float(h) for h in h_list], errors, slope)


def convergence_order(
    dyn: Dynamics,
    z0,
    theta,
    t0: float,
    T: float,
    tableau: Union[str, ButcherTableau],
    h_list: Sequence[float],
    reference,
) -> float:
    """Empirical order: the log-log slope of global error against h."""
    return convergence_study(dyn, z0, theta, t0, T, tableau, h_list, reference).slope


@dataclass(frozen=True)
class ReverseErrorReport:
    """Forward integration followed by reverse-time reconstruction.

    Attributes:
        forward_terminal: z(T) of the forward pass.
        reconstructed_initial: z_bar(t0) of the reverse pass.
        abs_error: Norm of z0 - z_bar(t0).
        forward_cache: Checkpoints of the forward pass.
        reverse_cache: Checkpoints of the reverse pass.
    """
    forward_terminal: np.ndarray
    reconstructed_initial: np.ndarray
    abs_error: float
    forward_cache: CheckpointCache
    reverse_cache: CheckpointCache


def reverse_reconstruction(
    dyn: Dynamics,
    z0,
    theta,
    t0: float,
    T: float,
    tableau: Union[str, ButcherTableau] = "dopri5",
    cfg: Optional[SolverConfig] = None,
) -> ReverseErrorReport:
    """Integrate t0 -> T, then integrate back T -> t0 from z(T) as the adjoint method would.

    Raises:
        NonFiniteStateError: If the reverse pass blows up (carries the failure time).
    """
    z0 = np.asarray(z0, dtype=float)
    z_T, forward = integrate(dyn, z0, theta, t0, T, tableau, cfg)
    z_back, reverse = integrate(dyn, z_T, theta, T, t0, tableau, cfg)
    return ReverseErrorReport(z_T, z_back, float(np.linalg.norm(z0 - z_back)), forward, reverse)


def replay_checkpoints(
    dyn: Dynamics, theta, cache: CheckpointCache, tableau: Union[str, ButcherTableau] = "dopri5"
) -> float:
    """Re-execute every accepted step from its checkpoint.

    Returns:
        The largest deviation between a replayed step and its cached end state.
    """
    tableau = get_tableau(tableau)
    theta = np.asarray(theta, dtype=float)
    times, states = cache.time_points, cache.z_values
    worst = 0.0
    for i in range(1, cache.accepted_steps + 1):
        z_new, _, _ = stage_pass(
            ValueTracer(), tableau, dyn, times[i - 1], states[i - 1], theta, times[i] - times[i - 1], with_error=False
        )
        worst = max(worst, float(np.max(np.abs(z_new - states[i]))))
    return worst


@dataclass(frozen=True)
class ReverseErrorSeries:
    """Reconstruction error as a function of step size or tolerance.

    Attributes:
        parameter: "h" or "tol".
        values: Step sizes or tolerances.
        errors: Norm of z0 - z_bar(t0) per value.
        slope: Fitted log-log slope of errors against values.
    """
    parameter: str
    values: List[float]
    errors: List[float]
    slope: float


def reverse_error_vs_step(
    dyn: Dynamics,
    z0,
    theta,
    t0: float,
    T: float,
    tableau: Union[str, ButcherTableau],
    h_list: Sequence[float],
) -> ReverseErrorSeries:
    """Fixed-step forward and reverse runs for each h; the slope estimates the reconstruction order."""
    z0 = np.asarray(z0, dtype=float)
    errors = []
    for h in h_list:
        cfg = SolverConfig(adaptive=False, n_steps=max(1, int(round(abs(T - t0) / h))))
        z_T, _ = integrate(dyn, z0, theta, t0, T, tableau, cfg)
        z_back, _ = integrate(dyn, z_T, theta, T, t0, tableau, cfg)
        errors.append(float(np.linalg.norm(z0 - z_back)))
    return ReverseErrorSeries("h", [float(h) for h in h_list], errors, loglog_slope(h_list, errors))


def reverse_error_vs_tolerance(
    dyn: Dynamics,
    z0,
    theta,
    t0: float,
    T: float,
    tableau: Union[str, ButcherTableau],
    tol_list: Sequence[float],
    cfg: Optional[SolverConfig] = None,
) -> ReverseErrorSeries:
    """Adaptive reverse reconstruction error for decreasing rtol = atol."""
    if any(b >= a for a, b in zip(tol_list, tol_list[1:])):
        raise ValueError("tol_list must be decreasing")
    base = cfg or SolverConfig()
    errors = [
        reverse_reconstruction(dyn, z0, theta, t0, T, tableau, base.with_tolerance(tol)).abs_error
        for tol in tol_list
    ]
    return ReverseErrorSeries("tol", [float(t) for t in tol_list], errors, loglog_slope(tol_list, errors))
