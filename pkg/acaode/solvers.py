"""
Runge-Kutta Solvers.

This module contains the explicit Runge-Kutta tableau catalog, the one-step map,
the error norm and step-size controller, and the adaptive integration loop that
records the checkpoint cache consumed by the adaptive checkpoint adjoint.

The loop is written once against a small tracer interface. Plain integration runs
it with ``ValueTracer`` (handles are the values themselves); the naive gradient
runs the very same loop with a recording tracer from ``acaode.tape``. Both tracers
call the numerical kernels defined here, so forward values agree bitwise.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import SolverConfig
from .dynamics import Dynamics, as_params, as_state
from .errors import (
    DimensionMismatchError,
    MaxRejectsExceededError,
    MaxStepsExceededError,
    NonFiniteStateError,
    StepUnderflowError,
)

logger = logging.getLogger("acaode.solvers")

_TOL = 1e-12


@dataclass(frozen=True)
class ButcherTableau:
    """Coefficients of an explicit Runge-Kutta method.

    Attributes:
        name: Catalog name.
        a: Stage-coupling rows; row i holds a[i][0..i-1].
        b: Solution weights.
        b_hat: Embedded weights, or None for fixed-step methods.
        c: Stage abscissae.
        order: Order of the propagated solution.
        error_order: Order of the embedded estimate, fed to the step-size controller.
        fsal: Whether the last stage equals the first stage of the next step.
    """
    name: str
    a: Tuple[Tuple[float, ...], ...]
    b: Tuple[float, ...]
    b_hat: Optional[Tuple[float, ...]]
    c: Tuple[float, ...]
    order: int
    error_order: int
    fsal: bool = False

    def __post_init__(self):
        s = len(self.b)
        if len(self.c) != s or len(self.a) != s:
            raise ValueError(f"{self.name}: a, b and c must describe {s} stages")
        for i, row in enumerate(self.a):
            if len(row) != i:
                raise ValueError(f"{self.name}: row {i} of a must have {i} entries (explicit method)")
            if abs(sum(row) - self.c[i]) > _TOL:
                raise ValueError(f"{self.name}: row {i} of a does not sum to c[{i}]")
        if abs(sum(self.b) - 1.0) > _TOL:
            raise ValueError(f"{self.name}: weights b do not sum to 1")
        if self.b_hat is not None:
            if len(self.b_hat) != s or abs(sum(self.b_hat) - 1.0) > _TOL:
                raise ValueError(f"{self.name}: embedded weights must have {s} entries summing to 1")
        if self.fsal and (self.b[-1] != 0.0 or self.c[-1] != 1.0 or tuple(self.a[-1]) != tuple(self.b[:-1])):
            raise ValueError(f"{self.name}: FSAL requires the last row of a to equal b")

    @property
    def stages(self) -> int:
        return len(self.b)

    @property
    def is_adaptive(self) -> bool:
        return self.b_hat is not None

    @property
    def error_weights(self) -> Tuple[float, ...]:
        if self.b_hat is None:
            return tuple(0.0 for _ in self.b)
        return tuple(bi - bhi for bi, bhi in zip(self.b, self.b_hat))


def euler() -> ButcherTableau:
    return ButcherTableau("euler", a=((),), b=(1.0,), b_hat=None, c=(0.0,), order=1, error_order=1)


def rk2_heun() -> ButcherTableau:
    return ButcherTableau("rk2", a=((), (1.0,)), b=(0.5, 0.5), b_hat=None, c=(0.0, 1.0), order=2, error_order=2)


def rk4() -> ButcherTableau:
    return ButcherTableau(
        "rk4",
        a=((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
        b=(1 / 6, 1 / 3, 1 / 3, 1 / 6),
        b_hat=None,
        c=(0.0, 0.5, 0.5, 1.0),
        order=4,
        error_order=4,
    )


def heun_euler_12() -> ButcherTableau:
    """Heun's method with an embedded Euler estimate."""
    return ButcherTableau(
        "heun_euler", a=((), (1.0,)), b=(0.5, 0.5), b_hat=(1.0, 0.0), c=(0.0, 1.0), order=2, error_order=1
    )


def bogacki_shampine_23() -> ButcherTableau:
    return ButcherTableau(
        "bogacki_shampine",
        a=((), (1 / 2,), (0.0, 3 / 4), (2 / 9, 1 / 3, 4 / 9)),
        b=(2 / 9, 1 / 3, 4 / 9, 0.0),
        b_hat=(7 / 24, 1 / 4, 1 / 3, 1 / 8),
        c=(0.0, 1 / 2, 3 / 4, 1.0),
        order=3,
        error_order=2,
        fsal=True,
    )


def dormand_prince_45() -> ButcherTableau:
    b = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
    return ButcherTableau(
        "dopri5",
        a=(
            (),
            (1 / 5,),
            (3 / 40, 9 / 40),
            (44 / 45, -56 / 15, 32 / 9),
            (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
            (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
            b[:-1],
        ),
        b=b,
        b_hat=(5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40),
        c=(0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0),
        order=5,
        error_order=4,
        fsal=True,
    )


TABLEAUX: Dict[str, ButcherTableau] = {
    tab.name: tab
    for tab in (euler(), rk2_heun(), rk4(), heun_euler_12(), bogacki_shampine_23(), dormand_prince_45())
}
TABLEAUX["rk23"] = TABLEAUX["bogacki_shampine"]
TABLEAUX["rk45"] = TABLEAUX["dopri5"]


def get_tableau(name: Union[str, ButcherTableau]) -> ButcherTableau:
    """Look up a catalog tableau by (case-insensitive) name; tableaux pass through."""
    if isinstance(name, ButcherTableau):
        return name
    try:
        return TABLEAUX[name.lower()]
    except KeyError:
        raise ValueError(f"Unknown tableau '{name}'. Known: {sorted(TABLEAUX)}") from None


@dataclass(frozen=True)
class StepOutcome:
    """Result of one Runge-Kutta step.

    Attributes:
        z_new: Propagated state.
        err_norm: Scaled error estimate (0 for fixed-step tableaux).
        stage_derivatives: The stage values k_i.
        f_evals: Dynamics evaluations performed by this step.
    """
    z_new: np.ndarray
    err_norm: float
    stage_derivatives: List[np.ndarray]
    f_evals: int


@dataclass(frozen=True)
class CheckpointCache:
    """Accepted discretization points of one forward integration.

    Attributes:
        time_points: Strictly monotone times [t0, ..., T].
        z_values: States at time_points, one row per point.
        accepted_steps: Number of accepted steps N.
        rejected_steps: Number of rejected trial steps.
        total_f_evals: Dynamics evaluations, rejected trials and step initialisation included.
    """
    time_points: np.ndarray
    z_values: np.ndarray
    accepted_steps: int
    rejected_steps: int
    total_f_evals: int


def linear_combination(terms: Sequence[Tuple[float, np.ndarray]]) -> Optional[np.ndarray]:
    """Return sum(c * k) over terms with non-zero c, or None if every c is zero."""
    acc = None
    for coef, k in terms:
        if coef == 0.0:
            continue
        term = coef * k
        acc = term if acc is None else acc + term
    return acc


def error_norm(err_vec: np.ndarray, z_old: np.ndarray, z_new: np.ndarray, atol: float, rtol: float) -> float:
    """Mixed absolute/relative RMS norm of a local error estimate.

    Args:
        err_vec: The embedded error estimate.
        z_old: State at the start of the step.
        z_new: Proposed state at the end of the step.
        atol: Absolute tolerance.
        rtol: Relative tolerance.

    Returns:
        RMS of err_vec / (atol + rtol * max(|z_old|, |z_new|)); <= 1 meets tolerance.
    """
    err_vec = np.asarray(err_vec, dtype=float)
    z_old = np.asarray(z_old, dtype=float)
    z_new = np.asarray(z_new, dtype=float)
    if not err_vec.shape == z_old.shape == z_new.shape:
        raise DimensionMismatchError(f"Shapes differ: {err_vec.shape}, {z_old.shape}, {z_new.shape}")
    scale = atol + rtol * np.maximum(np.abs(z_old), np.abs(z_new))
    return float(np.sqrt(np.mean((err_vec / scale) ** 2)))


def controller_factor(err_norm: float, order_p: int, cfg: SolverConfig) -> Tuple[float, float]:
    """Return (clamped factor, unclamped factor)."""
    if err_norm == 0.0:
        return cfg.max_factor, math.inf
    raw = cfg.safety * err_norm ** (-1.0 / (order_p + 1))
    return min(cfg.max_factor, max(cfg.min_factor, raw)), raw


def propose_step(
    err_norm: float, h: float, order_p: int, cfg: SolverConfig, h_min: Optional[float] = None
) -> float:
    """Propose the next step size from the current error estimate.

    Args:
        err_norm: Scaled error of the last trial (may be inf for a diverged trial).
        h: Step size of the last trial; its sign is preserved.
        order_p: Order of the embedded error estimate.
        cfg: Controller safety factor and clamps.
        h_min: Step floor; defaults to cfg.h_min (no floor when both are None).

    Returns:
        h * clamp(safety * err_norm^(-1/(order_p+1)), min_factor, max_factor).

    Raises:
        StepUnderflowError: If the proposal falls below the step floor.
    """
    if h == 0:
        raise ValueError("Step size must be non-zero")
    if err_norm < 0:
        raise ValueError(f"Error norm must be non-negative, got {err_norm}")
    factor, _ = controller_factor(err_norm, order_p, cfg)
    h_new = h * factor
    floor = h_min if h_min is not None else cfg.h_min
    if floor is not None and abs(h_new) < floor:
        logger.debug(f"Step proposal {h_new:.3e} below floor {floor:.3e}")
        raise StepUnderflowError(h_new, floor)
    return h_new


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


def initial_step(
    dyn: Dynamics, t0: float, z0: np.ndarray, theta: np.ndarray, cfg: SolverConfig, T: float, order: int
) -> float:
    """Choose an initial step magnitude with the two-evaluation heuristic.

    A first guess is the ratio of the scaled state norm to the scaled derivative
    norm; one explicit Euler trial estimates the second derivative and refines it.

    Returns:
        A step magnitude in (h_min, |T - t0|]; cfg.h_init when given.
    """
    span = abs(T - t0)
    if cfg.h_init is not None:
        return cfg.h_init
    direction = 1.0 if T > t0 else -1.0
    scale = cfg.atol + np.abs(z0) * cfg.rtol
    f0 = dyn.eval(t0, z0, theta)
    d0 = _rms(z0 / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = dyn.eval(t0 + direction * h0, z0 + direction * h0 * f0, theta)
    d2 = _rms((f1 - f0) / scale) / h0
    if d1 == 0.0 and d2 == 0.0:
        return span
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    h = min(100 * h0, h1, span)
    return max(h, cfg.resolved_h_min(span))


class ValueTracer:
    """Tracer whose handles are plain values."""

    def __init__(self):
        self.f_evals = 0

    def leaf(self, x):
        return x

    const = leaf

    def value(self, x):
        return x

    def eval(self, dyn, t, z, theta):
        self.f_evals += 1
        return dyn.eval(t, z, theta)

    def lincomb(self, terms):
        return linear_combination(terms)

    def axpy(self, z, h, acc):
        return z + h * acc

    def scale(self, h, acc):
        return h * acc

    def error_norm(self, err, z_old, z_new, atol, rtol):
        return error_norm(err, z_old, z_new, atol, rtol)

    def propose(self, en, h, order_p, cfg, h_min):
        return propose_step(math.inf if en is None else en, h, order_p, cfg, h_min)

    def shift(self, t, h):
        t_new = t + h
        return t_new, t_new - t

    def span_to(self, T, t):
        return T - t


def _advance(tracer, z, h, coeffs, ks):
    acc = tracer.lincomb(list(zip(coeffs, ks)))
    return z if acc is None else tracer.axpy(z, h, acc)


def stage_pass(tracer, tableau: ButcherTableau, dyn: Dynamics, t: float, z, theta, h, k1=None, with_error=True):
    """Run every stage of one step and return (z_new, err, stage handles)."""
    hv = float(tracer.value(h))
    ks = []
    z_new = None
    last = tableau.stages - 1
    for i in range(tableau.stages):
        if i == 0:
            ks.append(k1 if k1 is not None else tracer.eval(dyn, t, z, theta))
            continue
        if tableau.fsal and i == last:
            z_new = _advance(tracer, z, h, tableau.b, ks)
            zi = z_new
        else:
            zi = _advance(tracer, z, h, tableau.a[i], ks)
        ks.append(tracer.eval(dyn, t + tableau.c[i] * hv, zi, theta))
    if z_new is None:
        z_new = _advance(tracer, z, h, tableau.b, ks)
    err = None
    if with_error and tableau.is_adaptive:
        acc = tracer.lincomb(list(zip(tableau.error_weights, ks)))
        if acc is not None:
            err = tracer.scale(h, acc)
    return z_new, err, ks


def _fsal_reusable(tableau: ButcherTableau, t: float, h: float, t_new: float) -> bool:
    return tableau.fsal and t + tableau.c[-1] * h == t_new


_LOG_MAX = math.log(np.finfo(float).max)


def blows_up(z: np.ndarray, f: Optional[np.ndarray], t: float, T: float) -> bool:
    """Whether the local growth rate of |z| would overflow it before reaching T.

    The rate is d/dt log|z| = <z, f> / <z, z> taken along the direction of
    integration; a solution diverges when rate * |T - t| exceeds the headroom
    left before the largest finite float.
    """
    zz = float(np.dot(z, z))
    if not math.isfinite(zz):
        return True
    if f is None or zz == 0.0:
        return False
    direction = 1.0 if T > t else -1.0
    rate = direction * float(np.dot(z, f)) / zz
    if not math.isfinite(rate):
        return True
    return rate > 0 and rate * abs(T - t) > _LOG_MAX - 0.5 * math.log(zz)


def _stalled(exc: StepUnderflowError, z: np.ndarray, f: Optional[np.ndarray], T: float, last_finite: bool):
    """Classify a step underflow: a finite-time blow-up becomes NonFiniteStateError."""
    if not last_finite or blows_up(z, f, exc.t, T):
        logger.debug(f"Solution diverges at t={exc.t:.6g} ({exc})")
        return NonFiniteStateError(f"Solution diverges at t={exc.t:.6g}: {exc}", t=exc.t)
    return exc


def _undersized(err_norm: float, tableau: ButcherTableau, cfg: SolverConfig) -> bool:
    """Whether an accepted automatic first step is far smaller than the controller wants."""
    _, raw = controller_factor(err_norm, tableau.error_order, cfg)
    return raw > cfg.first_step_growth


@dataclass
class LoopResult:
    """Handles and bookkeeping of one run of the stepping loop."""
    z: object
    z_leaf: object
    theta_leaf: object
    times: List[float]
    states: List[np.ndarray]
    accepted: int
    rejected: int
    f_evals: int


def run_steps(
    tracer,
    dyn: Dynamics,
    z0: np.ndarray,
    theta: np.ndarray,
    t0: float,
    T: float,
    tableau: ButcherTableau,
    cfg: SolverConfig,
) -> LoopResult:
    """Integrate with any tracer; returns the final state handle and the accepted points."""
    span = T - t0
    z = z_leaf = tracer.leaf(z0)
    th = tracer.leaf(theta)
    times = [t0]
    states = [z0]
    accepted = rejected = 0
    extra_evals = 0

    if not (cfg.adaptive and tableau.is_adaptive):
        n = cfg.n_steps
        h_nom = span / n
        k1 = None
        for i in range(1, n + 1):
            tv = times[-1]
            t_next = T if i == n else t0 + i * h_nom
            hv = t_next - tv
            z_new, _, ks = stage_pass(tracer, tableau, dyn, tv, z, th, tracer.const(hv), k1=k1, with_error=False)
            zv = tracer.value(z_new)
            if not np.all(np.isfinite(zv)):
                raise NonFiniteStateError(f"Non-finite state after fixed step to t={t_next}", t=t_next)
            k1 = ks[-1] if _fsal_reusable(tableau, tv, hv, t_next) else None
            z = z_new
            times.append(t_next)
            states.append(zv)
            accepted += 1
        return LoopResult(z, z_leaf, th, times, states, accepted, rejected, tracer.f_evals)

    direction = 1.0 if span > 0 else -1.0
    h_min = cfg.resolved_h_min(span)
    if cfg.h_init is None:
        extra_evals = 2
    h0 = initial_step(dyn, t0, z0, theta, cfg, T, tableau.order)
    h = tracer.const(direction * h0)
    t = tracer.const(t0)
    k1 = None
    refine = cfg.h_init is None
    while times[-1] != T:
        if accepted >= cfg.max_steps:
            raise MaxStepsExceededError(f"Exceeded {cfg.max_steps} accepted steps before reaching T={T}")
        tv = times[-1]
        zv_start = states[-1]
        rejects = 0
        while True:
            if abs(tracer.value(h)) >= abs(T - tv):
                t_new, t_new_v = tracer.const(T), T
                h_eff = tracer.span_to(T, t)
            else:
                t_new, h_eff = tracer.shift(t, h)
                t_new_v = tracer.value(t_new)
                if t_new_v == tv:
                    f_start = None if k1 is None else tracer.value(k1)
                    raise _stalled(StepUnderflowError(tracer.value(h), h_min, t=tv), zv_start, f_start, T, True)
            z_new, err, ks = stage_pass(tracer, tableau, dyn, tv, z, th, h_eff, k1=k1)
            k1 = ks[0]
            zv = tracer.value(z_new)
            finite = bool(np.all(np.isfinite(zv)))
            en = None
            if finite:
                en = tracer.const(0.0) if err is None else tracer.error_norm(err, z, z_new, cfg.atol, cfg.rtol)
                if not math.isfinite(tracer.value(en)):
                    en = None
            ok = en is not None and tracer.value(en) <= 1.0
            refining = refine and t_new_v != T and rejects < cfg.max_rejects_per_step
            if ok and not (refining and _undersized(tracer.value(en), tableau, cfg)):
                break
            rejected += 1
            rejects += 1
            ev = math.inf if en is None else tracer.value(en)
            action = "Retrying first" if ok else "Rejected"
            logger.debug(f"{action} step t={tv:.6g} h={tracer.value(h_eff):.3e} err={ev:.3e}")
            if rejects > cfg.max_rejects_per_step:
                if not finite:
                    raise NonFiniteStateError(f"Non-finite trial state at t={tv:.6g} after {rejects} rejections", t=tv)
                raise MaxRejectsExceededError(f"Step at t={tv} rejected {rejects} times", t=tv)
            try:
                h = tracer.propose(en, h_eff, tableau.error_order, cfg, h_min)
            except StepUnderflowError as exc:
                stalled = StepUnderflowError(exc.h, exc.h_min, t=tv)
                raise _stalled(stalled, zv_start, tracer.value(k1), T, finite) from exc

        hv = tracer.value(h_eff)
        if t_new_v != T:
            try:
                h = tracer.propose(en, h_eff, tableau.error_order, cfg, h_min)
            except StepUnderflowError as exc:
                raise _stalled(StepUnderflowError(exc.h, exc.h_min, t=t_new_v), zv, None, T, True) from exc
        refine = False
        k1 = ks[-1] if _fsal_reusable(tableau, tv, hv, t_new_v) else None
        z, t = z_new, t_new
        times.append(t_new_v)
        states.append(zv)
        accepted += 1

    return LoopResult(z, z_leaf, th, times, states, accepted, rejected, tracer.f_evals + extra_evals)


def check_problem(dyn: Dynamics, z0, theta, t0: float, T: float) -> Tuple[np.ndarray, np.ndarray]:
    """Validate an initial value problem and return frozen (z0, theta)."""
    z0 = as_state(z0)
    theta = as_params(theta)
    if z0.size != dyn.state_dim:
        raise DimensionMismatchError(f"z0 has {z0.size} entries, dynamics expects {dyn.state_dim}")
    if theta.size != dyn.param_dim:
        raise DimensionMismatchError(f"theta has {theta.size} entries, dynamics expects {dyn.param_dim}")
    if not (math.isfinite(t0) and math.isfinite(T)) or T == t0:
        raise ValueError(f"Invalid time span [{t0}, {T}]")
    return z0, theta


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def cache_from_loop(run: LoopResult) -> CheckpointCache:
    return CheckpointCache(
        time_points=_freeze(np.array(run.times, dtype=float)),
        z_values=_freeze(np.stack(run.states)),
        accepted_steps=run.accepted,
        rejected_steps=run.rejected,
        total_f_evals=run.f_evals,
    )


def step(
    tableau: Union[str, ButcherTableau],
    dyn: Dynamics,
    t: float,
    z: np.ndarray,
    theta: np.ndarray,
    h: float,
    cfg: Optional[SolverConfig] = None,
    k1: Optional[np.ndarray] = None,
) -> StepOutcome:
    """Take one Runge-Kutta step of size h (negative h steps backwards in time).

    Args:
        tableau: Tableau or catalog name.
        dyn: Dynamics to integrate.
        t: Start time.
        z: Start state.
        theta: Dynamics parameters.
        h: Non-zero step size.
        cfg: Tolerances used for the error norm (defaults to SolverConfig()).
        k1: First stage from a previous FSAL step, saving one evaluation.

    Returns:
        The StepOutcome.

    Raises:
        NonFiniteStateError: If the step produces NaN or Inf.
    """
    if h == 0:
        raise ValueError("Step size must be non-zero")
    tableau = get_tableau(tableau)
    cfg = cfg or SolverConfig()
    tracer = ValueTracer()
    z_new, err, ks = stage_pass(tracer, tableau, dyn, t, z, theta, h, k1=k1)
    if not np.all(np.isfinite(z_new)) or (err is not None and not np.all(np.isfinite(err))):
        raise NonFiniteStateError(f"Non-finite stage values in step from t={t}", t=t)
    en = 0.0 if err is None else error_norm(err, z, z_new, cfg.atol, cfg.rtol)
    return StepOutcome(z_new=z_new, err_norm=en, stage_derivatives=ks, f_evals=tracer.f_evals)


def integrate(
    dyn: Dynamics,
    z0,
    theta,
    t0: float,
    T: float,
    tableau: Union[str, ButcherTableau] = "dopri5",
    cfg: Optional[SolverConfig] = None,
) -> Tuple[np.ndarray, CheckpointCache]:
    """Integrate dz/dt = f(t, z, theta) from t0 to T.

    Embedded tableaux step adaptively (unless cfg.adaptive is False): rejected trials
    shrink h until the error norm is at most 1, accepted steps may grow h, and the
    final step is truncated to land on T exactly. An automatically sized first step
    that the controller would grow by more than cfg.first_step_growth is retried at
    the proposed size. Fixed-step tableaux take cfg.n_steps equal steps.

    Args:
        dyn: Dynamics to integrate.
        z0: Initial state.
        theta: Dynamics parameters.
        t0: Start time.
        T: End time (T < t0 integrates backwards).
        tableau: Tableau or catalog name.
        cfg: Solver settings (defaults to SolverConfig()).

    Returns:
        A tuple of z(T) and the CheckpointCache of accepted points.

    Raises:
        MaxStepsExceededError, MaxRejectsExceededError, StepUnderflowError (with the
        time t of the stalled step), NonFiniteStateError when the solution diverges
        (non-finite trials, or a step underflow while |z| grows fast enough to
        overflow before T), and any error raised by the dynamics.
    """
    tableau = get_tableau(tableau)
    cfg = cfg or SolverConfig()
    z0, theta = check_problem(dyn, z0, theta, t0, T)
    run = run_steps(ValueTracer(), dyn, z0, theta, float(t0), float(T), tableau, cfg)
    cache = cache_from_loop(run)
    logger.debug(
        f"Integrated {tableau.name} over [{t0}, {T}]: {run.accepted} accepted, "
        f"{run.rejected} rejected, {run.f_evals} evals"
    )
    return cache.z_values[-1], cache
