"""
Trajectory Fitting.

This module contains the trajectory dataset, the segmented trajectory loss with
its gradient, the Adam and SGD update rules, the learning-rate schedule and the
full-batch fitting loop, plus the generator of the three-body reference dataset.
"""

import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .config import OptimizerConfig, OptimizerKind, SolverConfig
from .dynamics import (
    ASTRONOMICAL_G,
    N_BODIES,
    SPACE_DIM,
    Dynamics,
    three_body_dynamics,
)
from .errors import AcaOdeError, DimensionMismatchError, DivergedError
from .gradients import CostStats, GradientMethod, forward_segment
from .solvers import ButcherTableau, get_tableau, integrate

logger = logging.getLogger("acaode.optimize")

REFERENCE_MASSES = (1.0, 2.0, 3.0)
GENERATION_TOLERANCE = 1e-10
REFERENCE_DATASET_NAME = "three_body_reference.txt"
REFERENCE_SAMPLES_PER_YEAR = 1000


def lr_schedule(initial_lr: float, decay: float, epoch: int) -> float:
    """Learning rate at an epoch: initial_lr * decay**epoch."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return initial_lr * decay ** epoch


@dataclass(frozen=True)
class AdamMoments:
    """First and second moment estimates carried between Adam steps."""
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> "AdamMoments":
        return cls(np.zeros(size), np.zeros(size))


def adam_step(
    theta: np.ndarray,
    grad: np.ndarray,
    moments: AdamMoments,
    step_index: int,
    lr: float,
    cfg: OptimizerConfig,
) -> Tuple[np.ndarray, AdamMoments]:
    """One bias-corrected Adam update.

    Args:
        theta: Current parameters.
        grad: Loss gradient at theta.
        moments: Moments from the previous step (zeros before the first).
        step_index: 1-based step counter used for bias correction.
        lr: Learning rate.
        cfg: Adam decay rates and epsilon.

    Returns:
        A tuple of (new parameters, new moments).
    """
    if step_index < 1:
        raise ValueError(f"step_index must be >= 1, got {step_index}")
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if theta.shape != grad.shape:
        raise DimensionMismatchError(f"theta {theta.shape} and grad {grad.shape} differ")
    m = cfg.adam_beta1 * moments.m + (1.0 - cfg.adam_beta1) * grad
    v = cfg.adam_beta2 * moments.v + (1.0 - cfg.adam_beta2) * grad * grad
    m_hat = m / (1.0 - cfg.adam_beta1 ** step_index)
    v_hat = v / (1.0 - cfg.adam_beta2 ** step_index)
    return theta - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps), AdamMoments(m, v)


def sgd_step(theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return np.asarray(theta, dtype=float) - lr * np.asarray(grad, dtype=float)


@dataclass(frozen=True)
class TrajectoryDataset:
    """Observed trajectory sampled at increasing times.

    Attributes:
        times: Sample times.
        states: Observed states, one row per sample.
        train_end: Samples with time <= train_end form the training split.
    """
    times: np.ndarray
    states: np.ndarray
    train_end: float = 1.0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if times.ndim != 1 or times.size < 1:
            raise ValueError("A dataset needs at least one sample time")
        if states.shape[0] != times.size:
            raise DimensionMismatchError(f"{times.size} times but {states.shape[0]} states")
        if np.any(np.diff(times) <= 0):
            raise ValueError("Sample times must be strictly increasing")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(states))):
            raise ValueError("Dataset contains non-finite values")
        times.setflags(write=False)
        states.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    def __len__(self) -> int:
        return self.times.size

    @property
    def z0(self) -> np.ndarray:
        return self.states[0]

    @property
    def train_mask(self) -> np.ndarray:
        return self.times <= self.train_end

    def train(self) -> "TrajectoryDataset":
        """The training split (samples up to train_end)."""
        mask = self.train_mask
        return TrajectoryDataset(self.times[mask], self.states[mask], self.train_end)


def observed_coordinates(state_dim: int, positions_only: bool = True) -> slice:
    """Coordinates compared by trajectory losses: the position half of the state, or all of it."""
    return slice(0, state_dim // 2) if positions_only else slice(0, state_dim)


def simulate_trajectory(
    dyn: Dynamics,
    theta,
    z0,
    times,
    tableau: Union[str, ButcherTableau] = "dopri5",
    cfg: Optional[SolverConfig] = None,
) -> np.ndarray:
    """Integrate segment by segment through the sample times.

    Returns:
        States at every sample time, one row per time (row 0 is z0).

    Raises:
        DivergedError: If a segment fails, with the offending interval attached.
    """
    times = np.asarray(times, dtype=float)
    states = [np.asarray(z0, dtype=float)]
    for t_a, t_b in zip(times[:-1], times[1:]):
        try:
            z_b, _ = integrate(dyn, states[-1], theta, t_a, t_b, tableau, cfg)
        except AcaOdeError as exc:
            raise DivergedError(f"Integration failed on [{t_a}, {t_b}]: {exc}", interval=(t_a, t_b)) from exc
        states.append(z_b)
    return np.stack(states)


def trajectory_mse(
    dyn: Dynamics,
    theta,
    dataset: TrajectoryDataset,
    tableau: Union[str, ButcherTableau] = "dopri5",
    cfg: Optional[SolverConfig] = None,
    positions_only: bool = True,
) -> float:
    """Mean squared error of the model trajectory from the dataset's first observation."""
    predicted = simulate_trajectory(dyn, theta, dataset.z0, dataset.times, tableau, cfg)
    obs = observed_coordinates(dyn.state_dim, positions_only)
    diff = predicted[:, obs] - dataset.states[:, obs]
    return float(np.mean(diff * diff))


def trajectory_mse_loss(
    dyn: Dynamics,
    theta,
    z0,
    dataset: TrajectoryDataset,
    tableau: Union[str, ButcherTableau] = "dopri5",
    cfg: Optional[SolverConfig] = None,
    method: Union[str, GradientMethod] = GradientMethod.ACA,
    positions_only: bool = True,
) -> Tuple[float, np.ndarray, CostStats]:
    """Trajectory MSE and its parameter gradient.

    The model is integrated piecewise between consecutive sample times. The loss is
    the mean, over samples and observed coordinates, of the squared error; gradients
    are carried back through each segment with the chosen method.

    Args:
        dyn: Model dynamics.
        theta: Model parameters.
        z0: Initial state (the dataset's first observation).
        dataset: Observations.
        tableau: Tableau or catalog name.
        cfg: Solver settings.
        method: aca, adjoint or naive.
        positions_only: Compare only the position half of the state.

    Returns:
        A tuple of (loss, dJ/dtheta, aggregated cost counters).

    Raises:
        DivergedError: If a segment fails, with the offending interval attached.
    """
    method = GradientMethod.parse(method)
    tableau = get_tableau(tableau)
    theta = np.asarray(theta, dtype=float)
    n = len(dataset)
    if n == 1:
        return 0.0, np.zeros(dyn.param_dim), CostStats()

    obs = observed_coordinates(dyn.state_dim, positions_only)
    denom = n * len(range(dyn.state_dim)[obs])
    segments = []
    seeds: List[np.ndarray] = []
    loss = 0.0
    z = np.asarray(z0, dtype=float)
    times = dataset.times
    for i in range(1, n):
        try:
            segment = forward_segment(method, dyn, z, theta, times[i - 1], times[i], tableau, cfg)
        except AcaOdeError as exc:
            raise DivergedError(
                f"Segment [{times[i - 1]}, {times[i]}] failed: {exc}", interval=(times[i - 1], times[i])
            ) from exc
        diff = np.zeros(dyn.state_dim)
        diff[obs] = segment.z_T[obs] - dataset.states[i, obs]
        loss += float(np.sum(diff * diff)) / denom
        seeds.append(2.0 * diff / denom)
        segments.append(segment)
        z = segment.z_T

    lam = np.zeros(dyn.state_dim)
    grad = np.zeros(dyn.param_dim)
    stats = CostStats()
    for segment, seed in zip(reversed(segments), reversed(seeds)):
        lam, d_theta = segment.backward(lam - seed)
        grad = grad + d_theta
        stats = stats.merge(segment.stats)
    return loss, grad, stats


@dataclass
class FitReport:
    """Outcome of a fitting run.

    Attributes:
        final_theta: Parameters after the last epoch.
        loss_history: Training loss per epoch, evaluated before that epoch's update.
        train_mse: MSE over the training split at final_theta.
        test_mse: MSE over the whole dataset at final_theta.
        grad_stats: Cost counters aggregated over all epochs.
        method: Gradient method used.
    """
    final_theta: np.ndarray
    loss_history: List[float] = field(default_factory=list)
    train_mse: float = math.nan
    test_mse: float = math.nan
    grad_stats: CostStats = field(default_factory=CostStats)
    method: GradientMethod = GradientMethod.ACA


def fit(
    dyn: Dynamics,
    dataset: TrajectoryDataset,
    opt_cfg: OptimizerConfig,
    solver_cfg: SolverConfig,
    method: Union[str, GradientMethod],
    theta0,
    tableau: Union[str, ButcherTableau] = "dopri5",
    positions_only: bool = True,
    log_every: int = 10,
) -> FitReport:
    """Full-batch gradient descent on the training split.

    The test MSE integrates the fitted model from the single initial observation
    over the whole dataset.

    Args:
        dyn: Model dynamics.
        dataset: Observations; the training split must contain at least one sample.
        opt_cfg: Optimizer and learning-rate schedule.
        solver_cfg: Solver settings.
        method: Gradient method.
        theta0: Initial parameters.
        tableau: Tableau or catalog name.
        positions_only: Compare only the position half of the state.
        log_every: Epoch interval of INFO progress messages.

    Returns:
        The FitReport.

    Raises:
        DivergedError: On a failed segment or non-finite loss, with the epoch index.
    """
    method = GradientMethod.parse(method)
    train = dataset.train()
    if len(train) < 1:
        raise ValueError("The training split is empty")
    theta = np.array(theta0, dtype=float)
    moments = AdamMoments.zeros(theta.size)
    report = FitReport(final_theta=theta, method=method)

    for epoch in range(opt_cfg.epochs):
        lr = lr_schedule(opt_cfg.initial_lr, opt_cfg.decay, epoch)
        try:
            loss, grad, stats = trajectory_mse_loss(
                dyn, theta, train.z0, train, tableau, solver_cfg, method, positions_only
            )
        except DivergedError as exc:
            raise DivergedError(str(exc), epoch=epoch, interval=exc.interval) from exc
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise DivergedError(f"Non-finite loss or gradient at epoch {epoch}", epoch=epoch)
        report.loss_history.append(loss)
        report.grad_stats = report.grad_stats.merge(stats)
        logger.debug(f"epoch {epoch}: loss={loss:.6e} lr={lr:.4g}")
        if log_every and epoch % log_every == 0:
            logger.info(f"[{method.value}] epoch {epoch}/{opt_cfg.epochs} loss={loss:.6e}")

        if opt_cfg.kind == OptimizerKind.ADAM:
            theta, moments = adam_step(theta, grad, moments, epoch + 1, lr, opt_cfg)
        else:
            theta = sgd_step(theta, grad, lr)

    report.final_theta = theta
    report.train_mse = trajectory_mse(dyn, theta, train, tableau, solver_cfg, positions_only)
    report.test_mse = trajectory_mse(dyn, theta, dataset, tableau, solver_cfg, positions_only)
    logger.info(f"[{method.value}] fit done: train_mse={report.train_mse:.3e} test_mse={report.test_mse:.3e}")
    return report


@dataclass(frozen=True)
class OrbitSpec:
    """Near-circular orbit of one body about the heavy central body.

    Attributes:
        radius: Distance from the central body.
        angle: Azimuth in the x-y plane.
        dz: Offset out of the plane.
        speed_scale: Speed as a multiple of the circular-orbit speed.
        vz_scale: Out-of-plane velocity as a fraction of that speed.
    """
    radius: float
    angle: float
    dz: float
    speed_scale: float
    vz_scale: float


REFERENCE_CENTRE = (0.012, -0.021, 0.008)
REFERENCE_ORBITS = (
    OrbitSpec(radius=2.25, angle=0.6, dz=0.015, speed_scale=1.0, vz_scale=0.004),
    OrbitSpec(radius=4.75, angle=2.8, dz=-0.02, speed_scale=0.98, vz_scale=-0.006),
)


def layout_state(centre, orbits, masses=REFERENCE_MASSES, G: float = ASTRONOMICAL_G) -> np.ndarray:
    """Hierarchical three-body state from a central position and two orbits, in the centre-of-mass frame.

    Body 2 sits at centre; body 0 orbits it alone and body 1 orbits bodies 0 and 2 together.
    """
    masses = np.asarray(masses, dtype=float)
    r = np.zeros((N_BODIES, SPACE_DIM))
    v = np.zeros((N_BODIES, SPACE_DIM))
    r[2] = np.asarray(centre, dtype=float)
    for body, orbit, enclosed in ((0, orbits[0], masses[2]), (1, orbits[1], masses[2] + masses[0])):
        cos, sin = math.cos(orbit.angle), math.sin(orbit.angle)
        r[body] = r[2] + orbit.radius * np.array([cos, sin, 0.0])
        r[body, 2] += orbit.dz
        speed = math.sqrt(G * enclosed / orbit.radius) * orbit.speed_scale
        v[body] = speed * np.array([-sin, cos, 0.0])
        v[body, 2] += orbit.vz_scale * speed
    total = masses.sum()
    r -= (masses[:, None] * r).sum(axis=0) / total
    v -= (masses[:, None] * v).sum(axis=0) / total
    return np.concatenate([r.ravel(), v.ravel()])


def reference_initial_state(
    seed: Optional[int] = None, masses=REFERENCE_MASSES, G: float = ASTRONOMICAL_G
) -> np.ndarray:
    """Hierarchical three-body initial condition in the centre-of-mass frame.

    Without a seed this is the fixed reference layout behind the packaged dataset.
    A seed draws a perturbed variant: the heaviest body near the origin, the lightest
    at radius 2-2.5 and the middle one at radius 4.5-5.
    """
    if seed is None:
        return layout_state(REFERENCE_CENTRE, REFERENCE_ORBITS, masses, G)
    rng = np.random.default_rng(seed)
    centre = rng.uniform(-0.05, 0.05, SPACE_DIM)
    orbits = []
    for r_lo, r_hi in ((2.0, 2.5), (4.5, 5.0)):
        orbits.append(
            OrbitSpec(
                radius=rng.uniform(r_lo, r_hi),
                angle=rng.uniform(0.0, 2.0 * np.pi),
                dz=rng.uniform(-0.05, 0.05),
                speed_scale=rng.uniform(0.95, 1.05),
                vz_scale=rng.uniform(-0.02, 0.02),
            )
        )
    return layout_state(centre, orbits, masses, G)


def generate_reference_dataset(
    seed: Optional[int] = None,
    samples_per_year: int = 1000,
    horizon: float = 2.0,
    train_end: float = 1.0,
    masses=REFERENCE_MASSES,
    G: float = ASTRONOMICAL_G,
) -> TrajectoryDataset:
    """Simulate the reference three-body system with Dopri5 at tight tolerance."""
    n = int(round(samples_per_year * horizon))
    times = np.arange(n + 1) / samples_per_year
    cfg = SolverConfig(rtol=GENERATION_TOLERANCE, atol=GENERATION_TOLERANCE)
    z0 = reference_initial_state(seed, masses, G)
    states = simulate_trajectory(three_body_dynamics(G), np.asarray(masses, dtype=float), z0, times, "dopri5", cfg)
    logger.info(f"Generated three-body reference trajectory: {times.size} samples over {horizon} years")
    return TrajectoryDataset(times, states, train_end)


def _columns() -> List[str]:
    names = ["time"]
    for kind in ("r", "v"):
        for body in range(1, N_BODIES + 1):
            names.extend(f"{kind}{body}{axis}" for axis in "xyz")
    return names


def save_dataset(dataset: TrajectoryDataset, path: Path) -> Path:
    """Write a dataset as a whitespace-separated table with a header line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = np.column_stack([dataset.times, dataset.states])
    np.savetxt(path, table, header=" ".join(_columns()[: table.shape[1]]), fmt="%.17g")
    return path


def load_dataset(path: Path, train_end: float = 1.0) -> TrajectoryDataset:
    """Read a dataset written by save_dataset."""
    table = np.atleast_2d(np.loadtxt(path, comments="#"))
    return TrajectoryDataset(table[:, 0], table[:, 1:], train_end)


def load_reference_dataset(train_end: float = 1.0, samples_per_year: Optional[int] = None) -> TrajectoryDataset:
    """Load the packaged reference trajectory (reference layout, 1000 samples per year over two years).

    Args:
        train_end: End of the training window.
        samples_per_year: Keep only this many samples per year; must divide 1000.
    """
    with resources.as_file(resources.files("acaode.data") / REFERENCE_DATASET_NAME) as path:
        dataset = load_dataset(path, train_end)
    if samples_per_year is None:
        return dataset
    if samples_per_year <= 0 or REFERENCE_SAMPLES_PER_YEAR % samples_per_year:
        raise ValueError(f"samples_per_year must divide {REFERENCE_SAMPLES_PER_YEAR}, got {samples_per_year}")
    stride = REFERENCE_SAMPLES_PER_YEAR // samples_per_year
    return TrajectoryDataset(dataset.times[::stride], dataset.states[::stride], train_end)
