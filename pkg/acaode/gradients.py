"""
Gradient Estimators.

This module computes dJ/dtheta and dJ/dz0 for a terminal loss J(z(T)) three ways:

- naive: backpropagate through every solver operation, rejected trials and the
  step-size controller included;
- adjoint: integrate the augmented costate system backwards from T, reconstructing
  z in reverse time;
- aca: keep the accepted checkpoints of the forward pass and backpropagate through
  one re-executed step per interval.

Internally the costate follows lambda(T) = -dJ/dz(T) and the parameter gradient
accumulates -lambda^T dpsi/dtheta; every returned gradient is the true gradient of J.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Tuple, Union

import numpy as np

from .config import SolverConfig
from .dynamics import Dynamics
from .errors import CacheMismatchError, DimensionMismatchError, UnknownMethodError
from .solvers import (
    ButcherTableau,
    CheckpointCache,
    cache_from_loop,
    check_problem,
    get_tableau,
    integrate,
    run_steps,
    stage_pass,
)
from .tape import SolverTape, TapeTracer

logger = logging.getLogger("acaode.gradients")


class GradientMethod(str, Enum):
    ACA = "aca"
    ADJOINT = "adjoint"
    NAIVE = "naive"

    @classmethod
    def parse(cls, name: Union[str, "GradientMethod"]) -> "GradientMethod":
        """Parse a method name case-insensitively.

        Raises:
            UnknownMethodError: If the name is not aca, adjoint or naive.
        """
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise UnknownMethodError(f"Unknown gradient method '{name}'") from None


class LossKind(str, Enum):
    SQUARED_STATE = "squared_state"
    MSE_TO_TARGET = "mse_to_target"


def terminal_loss_grad(
    loss_kind: LossKind, z_T: np.ndarray, target: Optional[np.ndarray] = None
) -> Tuple[float, np.ndarray]:
    """Evaluate a terminal loss and its gradient dJ/dz(T).

    Args:
        loss_kind: SQUARED_STATE (sum of z(T)^2) or MSE_TO_TARGET (mean squared error).
        z_T: Final state.
        target: Target state, required for MSE_TO_TARGET.

    Returns:
        A tuple of (J, dJ/dz(T)).
    """
    z_T = np.asarray(z_T, dtype=float)
    if loss_kind == LossKind.SQUARED_STATE:
        return float(np.sum(z_T * z_T)), 2.0 * z_T
    if target is None:
        raise ValueError("MSE_TO_TARGET needs a target state")
    target = np.asarray(target, dtype=float)
    if target.shape != z_T.shape:
        raise DimensionMismatchError(f"Target shape {target.shape} differs from state shape {z_T.shape}")
    diff = z_T - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass(frozen=True)
class TerminalLoss:
    """A terminal loss bound to its kind and target; callable on z(T).

    Attributes:
        kind: The loss kind.
        target: Target state for MSE_TO_TARGET.
    """
    kind: LossKind = LossKind.SQUARED_STATE
    target: Optional[Tuple[float, ...]] = None

    def __call__(self, z_T: np.ndarray) -> Tuple[float, np.ndarray]:
        target = None if self.target is None else np.array(self.target)
        return terminal_loss_grad(self.kind, z_T, target)


LossFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def _resolve_loss(loss: Union[LossFn, LossKind, None]) -> LossFn:
    if loss is None:
        return TerminalLoss()
    if isinstance(loss, LossKind):
        return TerminalLoss(loss)
    return loss


@dataclass
class CostStats:
    """Cost counters of one gradient computation.

    Attributes:
        forward_f_evals: Dynamics evaluations of the forward pass.
        backward_f_evals: Dynamics evaluations of the backward pass.
        forward_accepted: Accepted forward steps.
        forward_rejected: Rejected forward trials.
        reverse_accepted: Accepted steps of the adjoint's reverse solve.
        reverse_rejected: Rejected trials of the adjoint's reverse solve.
        peak_tape_nodes: Largest tape held at once.
        recorded_nodes: Total tape nodes recorded over the computation.
        vjp_calls: Dynamics vjp evaluations of the backward pass.
    """
    forward_f_evals: int = 0
    backward_f_evals: int = 0
    forward_accepted: int = 0
    forward_rejected: int = 0
    reverse_accepted: int = 0
    reverse_rejected: int = 0
    peak_tape_nodes: int = 0
    recorded_nodes: int = 0
    vjp_calls: int = 0

    def merge(self, other: "CostStats") -> "CostStats":
        """Return the sum of two counters (peak_tape_nodes takes the maximum)."""
        return CostStats(
            forward_f_evals=self.forward_f_evals + other.forward_f_evals,
            backward_f_evals=self.backward_f_evals + other.backward_f_evals,
            forward_accepted=self.forward_accepted + other.forward_accepted,
            forward_rejected=self.forward_rejected + other.forward_rejected,
            reverse_accepted=self.reverse_accepted + other.reverse_accepted,
            reverse_rejected=self.reverse_rejected + other.reverse_rejected,
            peak_tape_nodes=max(self.peak_tape_nodes, other.peak_tape_nodes),
            recorded_nodes=self.recorded_nodes + other.recorded_nodes,
            vjp_calls=self.vjp_calls + other.vjp_calls,
        )

    @property
    def total_f_evals(self) -> int:
        return self.forward_f_evals + self.backward_f_evals


@dataclass(frozen=True)
class GradientResult:
    """Outcome of a gradient computation.

    Attributes:
        d_loss_d_theta: dJ/dtheta.
        d_loss_d_z0: dJ/dz0.
        loss: J(z(T)).
        stats: Cost counters.
        method: Method that produced the result.
        z_T: Final state of the forward pass.
        cache: Forward checkpoints (ACA and naive).
        reverse_cache: Reverse-time trajectory of [z_bar, lambda, g] (adjoint only).
    """
    d_loss_d_theta: np.ndarray
    d_loss_d_z0: np.ndarray
    loss: float
    stats: CostStats
    method: GradientMethod
    z_T: np.ndarray
    cache: Optional[CheckpointCache] = None
    reverse_cache: Optional[CheckpointCache] = field(default=None, repr=False)

    def costate(self) -> Tuple[np.ndarray, np.ndarray]:
        """Return (times, lambda(t)) along the adjoint's reverse pass."""
        if self.reverse_cache is None:
            raise ValueError(f"The {self.method.value} method does not integrate a costate")
        d = self.d_loss_d_z0.size
        return self.reverse_cache.time_points, self.reverse_cache.z_values[:, d:2 * d]


def aca_backward(
    dyn: Dynamics,
    theta: np.ndarray,
    cache: CheckpointCache,
    tableau: ButcherTableau,
    lam: np.ndarray,
    max_tape_nodes: int = 5_000_000,
) -> Tuple[np.ndarray, np.ndarray, CostStats]:
    """Backpropagate a costate through the checkpointed steps of one forward pass.

    Each accepted step is re-executed from its cached start state with the cached
    step size h_i = t_i - t_{i-1}; only that step's local tape exists at any time.

    Args:
        dyn: The dynamics of the forward pass.
        theta: Its parameters.
        cache: Checkpoints of the forward pass.
        tableau: Tableau of the forward pass.
        lam: Costate at the last checkpoint (lambda = -dJ/dz).
        max_tape_nodes: Node budget of each local tape.

    Returns:
        A tuple of (costate at the first checkpoint, parameter-gradient contribution, stats).

    Raises:
        CacheMismatchError: If a replayed step does not reproduce its cached state bitwise.
    """
    times, states = cache.time_points, cache.z_values
    d_theta = np.zeros(dyn.param_dim)
    stats = CostStats()
    for i in range(cache.accepted_steps, 0, -1):
        tape = SolverTape(max_tape_nodes)
        tracer = TapeTracer(tape)
        z_leaf = tracer.leaf(states[i - 1])
        th = tracer.leaf(theta)
        h = tracer.const(times[i] - times[i - 1])
        z_new, _, _ = stage_pass(tracer, tableau, dyn, times[i - 1], z_leaf, th, h, with_error=False)
        if not np.array_equal(tracer.value(z_new), states[i]):
            raise CacheMismatchError(i)
        adj = tape.backward({z_new: lam})
        g = adj[th]
        if g is not None:
            d_theta = d_theta - g
        lam = adj[z_leaf] if adj[z_leaf] is not None else np.zeros_like(lam)

        stats.backward_f_evals += tracer.f_evals
        stats.vjp_calls += tracer.vjp_calls
        stats.recorded_nodes += len(tape)
        stats.peak_tape_nodes = max(stats.peak_tape_nodes, len(tape))
    return lam, d_theta, stats


class AugmentedAdjointDynamics(Dynamics):
    """Reverse-time system on y = [z_bar, lambda, g].

    dz_bar/dt = f, dlambda/dt = -(df/dz)^T lambda, dg/dt = (df/dtheta)^T lambda.
    Integrated from T down to t0 with g(T) = 0, g(t0) = dJ/dtheta.
    """

    def __init__(self, dyn: Dynamics):
        self.dyn = dyn

    @property
    def state_dim(self) -> int:
        return 2 * self.dyn.state_dim + self.dyn.param_dim

    @property
    def param_dim(self) -> int:
        return self.dyn.param_dim

    def eval(self, t, y, theta):
        d = self.dyn.state_dim
        z_bar, lam = y[:d], y[d:2 * d]
        f = self.dyn.eval(t, z_bar, theta)
        g_z, g_theta = self.dyn.vjp(t, z_bar, theta, lam)
        return np.concatenate([f, -g_z, g_theta])

    def vjp(self, t, y, theta, v):
        raise NotImplementedError("Second derivatives of the adjoint system are not supported")


def adjoint_backward(
    dyn: Dynamics,
    theta: np.ndarray,
    z_T: np.ndarray,
    t0: float,
    T: float,
    lam: np.ndarray,
    tableau: ButcherTableau,
    cfg: SolverConfig,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, CheckpointCache]:
    """Integrate the augmented costate system from T back to t0.

    Args:
        dyn: The forward dynamics.
        theta: Its parameters.
        z_T: Final state of the forward pass.
        t0: Start time of the forward pass.
        T: End time of the forward pass.
        lam: Costate at T (lambda = -dJ/dz(T)).
        tableau: Tableau of the reverse solve.
        cfg: Solver settings of the reverse solve.

    Returns:
        A tuple of (z_bar(t0), lambda(t0), dJ/dtheta contribution, reverse cache).
    """
    d = dyn.state_dim
    y_T = np.concatenate([z_T, lam, np.zeros(dyn.param_dim)])
    y_0, reverse = integrate(AugmentedAdjointDynamics(dyn), y_T, theta, T, t0, tableau, cfg)
    return y_0[:d], y_0[d:2 * d], y_0[2 * d:], reverse


@dataclass
class Segment:
    """Forward pass of one integration interval, ready to backpropagate a costate.

    Attributes:
        method: Estimator that produced the forward pass.
        dyn: Dynamics.
        theta: Parameters.
        t0: Start time.
        T: End time.
        tableau: Tableau.
        cfg: Solver settings of the forward pass.
        z_T: State at T.
        stats: Forward cost counters.
        cache: Forward checkpoints (ACA and naive).
        reverse_cfg: Solver settings of the adjoint's reverse solve.
    """
    method: GradientMethod
    dyn: Dynamics
    theta: np.ndarray
    t0: float
    T: float
    tableau: ButcherTableau
    cfg: SolverConfig
    z_T: np.ndarray
    stats: CostStats
    cache: Optional[CheckpointCache] = None
    reverse_cfg: Optional[SolverConfig] = None
    _tape: Optional[SolverTape] = field(default=None, repr=False)
    _tracer: Optional[TapeTracer] = field(default=None, repr=False)
    _handles: Tuple[int, int, int] = (0, 0, 0)
    reverse_cache: Optional[CheckpointCache] = field(default=None, repr=False)

    def backward(self, lam: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Propagate the costate at T back to t0.

        Args:
            lam: Costate at T (lambda = -dJ/dz(T)).

        Returns:
            A tuple of (costate at t0, this interval's contribution to dJ/dtheta).
        """
        if self.method == GradientMethod.ACA:
            lam0, d_theta, stats = aca_backward(
                self.dyn, self.theta, self.cache, self.tableau, lam, self.cfg.max_tape_nodes
            )
            self.stats = self.stats.merge(stats)
            return lam0, d_theta

        if self.method == GradientMethod.ADJOINT:
            _, lam0, d_theta, reverse = adjoint_backward(
                self.dyn, self.theta, self.z_T, self.t0, self.T, lam, self.tableau, self.reverse_cfg or self.cfg
            )
            self.reverse_cache = reverse
            self.stats = self.stats.merge(
                CostStats(
                    backward_f_evals=reverse.total_f_evals,
                    reverse_accepted=reverse.accepted_steps,
                    reverse_rejected=reverse.rejected_steps,
                    vjp_calls=reverse.total_f_evals,
                )
            )
            return lam0, np.array(d_theta)

        z_out, z_leaf, theta_leaf = self._handles
        calls_before = self._tracer.vjp_calls
        adj = self._tape.backward({z_out: lam})
        self.stats.vjp_calls += self._tracer.vjp_calls - calls_before
        lam0 = adj[z_leaf] if adj[z_leaf] is not None else np.zeros_like(lam)
        adj_theta = adj[theta_leaf] if adj[theta_leaf] is not None else np.zeros(self.dyn.param_dim)
        return lam0, -adj_theta


def forward_segment(
    method: Union[str, GradientMethod],
    dyn: Dynamics,
    z0,
    theta,
    t0: float,
    T: float,
    tableau: Union[str, ButcherTableau] = "dopri5",
    cfg: Optional[SolverConfig] = None,
    reverse_cfg: Optional[SolverConfig] = None,
) -> Segment:
    """Run the forward pass of one interval the way the chosen method needs it.

    ACA keeps the checkpoint cache, the naive method keeps the full tape, and the
    adjoint method keeps only z(T).
    """
    method = GradientMethod.parse(method)
    tableau = get_tableau(tableau)
    cfg = cfg or SolverConfig()
    z0, theta = check_problem(dyn, z0, theta, t0, T)
    t0, T = float(t0), float(T)

    if method == GradientMethod.NAIVE:
        tape = SolverTape(cfg.max_tape_nodes)
        tracer = TapeTracer(tape)
        run = run_steps(tracer, dyn, z0, theta, t0, T, tableau, cfg)
        cache = cache_from_loop(run)
        stats = CostStats(
            forward_f_evals=run.f_evals,
            forward_accepted=run.accepted,
            forward_rejected=run.rejected,
            peak_tape_nodes=len(tape),
            recorded_nodes=len(tape),
        )
        logger.debug(f"Naive tape holds {len(tape)} nodes for {run.accepted + run.rejected} trial steps")
        return Segment(
            method, dyn, theta, t0, T, tableau, cfg, cache.z_values[-1], stats, cache=cache,
            _tape=tape, _tracer=tracer, _handles=(run.z, run.z_leaf, run.theta_leaf),
        )

    z_T, cache = integrate(dyn, z0, theta, t0, T, tableau, cfg)
    stats = CostStats(
        forward_f_evals=cache.total_f_evals,
        forward_accepted=cache.accepted_steps,
        forward_rejected=cache.rejected_steps,
    )
    if method == GradientMethod.ADJOINT:
        return Segment(method, dyn, theta, t0, T, tableau, cfg, z_T, stats, reverse_cfg=reverse_cfg)
    return Segment(method, dyn, theta, t0, T, tableau, cfg, z_T, stats, cache=cache)


def _terminal_gradient(
    method: GradientMethod,
    dyn: Dynamics,
    z0,
    theta,
    t0: float,
    T: float,
    tableau: Union[str, ButcherTableau],
    cfg: Optional[SolverConfig],
    loss: Union[LossFn, LossKind, None],
    reverse_cfg: Optional[SolverConfig] = None,
) -> GradientResult:
    segment = forward_segment(method, dyn, z0, theta, t0, T, tableau, cfg, reverse_cfg)
    value, seed = _resolve_loss(loss)(segment.z_T)
    lam0, d_theta = segment.backward(-seed)
    return GradientResult(
        d_loss_d_theta=d_theta,
        d_loss_d_z0=-lam0,
        loss=value,
        stats=segment.stats,
        method=method,
        z_T=segment.z_T,
        cache=segment.cache,
        reverse_cache=segment.reverse_cache,
    )


def grad_aca(
    dyn: Dynamics,
    z0,
    theta,
    t0: float,
    T: float,
    tableau: Union[str, ButcherTableau] = "dopri5",
    cfg: Optional[SolverConfig] = None,
    loss: Union[LossFn, LossKind, None] = None,
) -> GradientResult:
    """Adaptive checkpoint adjoint: checkpoint accepted steps, replay them backwards.

    Args:
        dyn: Dynamics.
        z0: Initial state.
        theta: Parameters.
        t0: Start time.
        T: End time.
        tableau: Tableau or catalog name.
        cfg: Solver settings.
        loss: Terminal loss callable, LossKind, or None for SQUARED_STATE.

    Returns:
        The GradientResult with the forward cache attached.

    Raises:
        CacheMismatchError: If a replayed step differs from its checkpoint.
    """
    return _terminal_gradient(GradientMethod.ACA, dyn, z0, theta, t0, T, tableau, cfg, loss)


def grad_adjoint(
    dyn: Dynamics,
    z0,
    theta,
    t0: float,
    T: float,
    tableau: Union[str, ButcherTableau] = "dopri5",
    cfg: Optional[SolverConfig] = None,
    loss: Union[LossFn, LossKind, None] = None,
    reverse_cfg: Optional[SolverConfig] = None,
) -> GradientResult:
    """Continuous adjoint: keep only z(T), then solve [z_bar, lambda, g] in reverse time.

    The reverse solve uses the forward tableau and, unless reverse_cfg is given,
    the forward tolerances. The reverse trajectory is attached as reverse_cache.
    """
    return _terminal_gradient(GradientMethod.ADJOINT, dyn, z0, theta, t0, T, tableau, cfg, loss, reverse_cfg)


def grad_naive(
    dyn: Dynamics,
    z0,
    theta,
    t0: float,
    T: float,
    tableau: Union[str, ButcherTableau] = "dopri5",
    cfg: Optional[SolverConfig] = None,
    loss: Union[LossFn, LossKind, None] = None,
) -> GradientResult:
    """Naive method: one tape over the whole solve, controller included.

    The initial step size is a constant of the graph. Raises TapeOverflowError
    when the tape outgrows cfg.max_tape_nodes.
    """
    return _terminal_gradient(GradientMethod.NAIVE, dyn, z0, theta, t0, T, tableau, cfg, loss)


_ESTIMATORS = {
    GradientMethod.ACA: grad_aca,
    GradientMethod.ADJOINT: grad_adjoint,
    GradientMethod.NAIVE: grad_naive,
}


def gradient_dispatch(
    method: Union[str, GradientMethod],
    dyn: Dynamics,
    z0,
    theta,
    t0: float,
    T: float,
    tableau: Union[str, ButcherTableau] = "dopri5",
    cfg: Optional[SolverConfig] = None,
    loss: Union[LossFn, LossKind, None] = None,
) -> GradientResult:
    """Uniform entry point over the three estimators.

    Raises:
        UnknownMethodError: If method is not aca, adjoint or naive.
    """
    return _ESTIMATORS[GradientMethod.parse(method)](dyn, z0, theta, t0, T, tableau, cfg, loss)
