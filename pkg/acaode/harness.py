"""
Experiment Harness.

Runs the desk-scale studies (toy gradient accuracy, van der Pol reversibility,
convergence orders, finite-difference gradient checks and the three-body fit),
collects one ResultRow per grid cell and metric, and writes a versioned CSV file
with a one-line JSON manifest next to it.

Grid cells run concurrently on worker threads; rows are sorted deterministically
before they are written.
"""

import asyncio
import csv
import json
import logging
import math
import re
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .analysis import (
    convergence_study,
    fd_directional,
    fd_gradient,
    replay_checkpoints,
    reverse_error_vs_step,
    reverse_reconstruction,
)
from .config import ExperimentConfig, ExperimentKind, FDOracleConfig, OptimizerConfig, SolverConfig
from .dynamics import (
    Dynamics,
    LogParameterized,
    fc_dynamics,
    linear_dynamics,
    three_body_dynamics,
    van_der_pol_dynamics,
)
from .errors import AcaOdeError
from .gradients import CostStats, GradientResult, LossKind, TerminalLoss, gradient_dispatch
from .optimize import (
    REFERENCE_MASSES,
    TrajectoryDataset,
    fit,
    load_dataset,
    load_reference_dataset,
    reference_initial_state,
    trajectory_mse,
)
from .solvers import get_tableau, integrate

logger = logging.getLogger("acaode.harness")

SCHEMA_VERSION = 1
DIVERGED = "diverged"

TOY_TOLERANCE = 1e-5
TOY_IDENTITY_TOLERANCE = 1e-10
FIT_TOLERANCE = 1e-5
GRADCHECK_HORIZON = 0.1
GRADCHECK_THRESHOLDS = {"aca": 1e-3, "naive": 1e-3, "adjoint": 1e-2}
VDP_INITIAL_STATE = (2.0, 0.0)
VDP_LOOSE_TOLERANCE = 1e-2
VDP_FLOW_TOLERANCE = 1e-11
VDP_GRADIENT_HORIZON = 3.0
VDP_GRADIENT_TARGET = (1.0, 0.0)
SAMPLES_PER_PHASE = 50


@dataclass(frozen=True)
class ResultRow:
    """One measurement of one grid cell.

    Attributes:
        schema_version: CSV schema version.
        experiment: Experiment identifier.
        method: Gradient method, or "forward" for solver-only measurements.
        tableau: Tableau catalog name.
        tolerance: rtol = atol of the run (NaN for fixed-step runs).
        setting: Cell coordinates, e.g. "T=3" or "problem=linear".
        metric: Metric name.
        value: Metric value (NaN when the cell diverged).
        reference: Analytic value, threshold or nominal order (NaN if none).
        flag: Empty, or "diverged".
        forward_f_evals: Dynamics evaluations of the forward pass.
        backward_f_evals: Dynamics evaluations of the backward pass.
        forward_accepted: Accepted forward steps.
        forward_rejected: Rejected forward trials.
        reverse_accepted: Accepted steps of a reverse-time solve.
        peak_tape_nodes: Largest tape held at once.
        wall_time: Seconds spent in the cell.
    """
    schema_version: int
    experiment: str
    method: str
    tableau: str
    tolerance: float
    setting: str
    metric: str
    value: float
    reference: float = math.nan
    flag: str = ""
    forward_f_evals: int = 0
    backward_f_evals: int = 0
    forward_accepted: int = 0
    forward_rejected: int = 0
    reverse_accepted: int = 0
    peak_tape_nodes: int = 0
    wall_time: float = 0.0


RESULT_COLUMNS = tuple(f.name for f in fields(ResultRow))


@dataclass
class ExperimentResult:
    """Rows and acceptance checks of one experiment run.

    Attributes:
        experiment: Experiment identifier.
        rows: Sorted result rows.
        checks: Acceptance check name -> passed.
        summary: Small JSON-friendly digest of the run.
    """
    experiment: str
    rows: List[ResultRow]
    checks: Dict[str, bool] = field(default_factory=dict)
    summary: Dict[str, object] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def values(self, metric: str, method: Optional[str] = None) -> Dict[str, float]:
        """Map setting -> value for one metric (and optionally one method)."""
        return {
            r.setting: r.value
            for r in self.rows
            if r.metric == metric and (method is None or r.method == method)
        }


@dataclass(frozen=True)
class Cell:
    """A unit of grid work producing rows for one (method, tableau, tolerance, setting).

    Attributes:
        experiment: Experiment identifier.
        method: Gradient method label.
        tableau: Tableau catalog name.
        tolerance: Solver tolerance (NaN for fixed-step cells).
        setting: Cell coordinates.
        metrics: Metric names the cell reports; used for NaN rows on divergence.
        compute: Produces the cell's rows.
    """
    experiment: str
    method: str
    tableau: str
    tolerance: float
    setting: str
    metrics: Tuple[str, ...]
    compute: Callable[["Cell"], List[ResultRow]]

    def row(self, metric: str, value: float, reference: float = math.nan, stats: Optional[CostStats] = None,
            setting: Optional[str] = None, flag: str = "") -> ResultRow:
        stats = stats or CostStats()
        return ResultRow(
            schema_version=SCHEMA_VERSION,
            experiment=self.experiment,
            method=self.method,
            tableau=self.tableau,
            tolerance=self.tolerance,
            setting=self.setting if setting is None else setting,
            metric=metric,
            value=float(value),
            reference=float(reference),
            flag=flag,
            forward_f_evals=stats.forward_f_evals,
            backward_f_evals=stats.backward_f_evals,
            forward_accepted=stats.forward_accepted,
            forward_rejected=stats.forward_rejected,
            reverse_accepted=stats.reverse_accepted,
            peak_tape_nodes=stats.peak_tape_nodes,
        )


def _execute(cell: Cell) -> List[ResultRow]:
    start = time.perf_counter()
    try:
        rows = cell.compute(cell)
    except AcaOdeError as exc:
        logger.warning(f"{cell.experiment}: cell {cell.method}/{cell.tableau}/{cell.setting} diverged: {exc}")
        rows = [cell.row(metric, math.nan, flag=DIVERGED) for metric in cell.metrics]
    elapsed = time.perf_counter() - start
    return [replace(r, wall_time=elapsed) for r in rows]


def run_concurrently(jobs: Sequence[Callable[[], object]]) -> List[object]:
    """Run callables on worker threads and return their results in submission order."""

    async def gather():
        return await asyncio.gather(*(asyncio.to_thread(job) for job in jobs))

    return list(asyncio.run(gather()))


_NUMBER = re.compile(r"([-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)")


def _natural_key(setting: str):
    parts = []
    for token in _NUMBER.split(setting):
        if not token:
            continue
        if _NUMBER.fullmatch(token):
            parts.append((0, float(token), ""))
        else:
            parts.append((1, 0.0, token))
    return tuple(parts)


def sort_rows(rows: Sequence[ResultRow]) -> List[ResultRow]:
    """Deterministic order: method, tableau, tolerance, setting (numbers compared numerically), metric."""

    def key(r: ResultRow):
        tol = (1, 0.0) if math.isnan(r.tolerance) else (0, r.tolerance)
        return (r.method, r.tableau, tol, _natural_key(r.setting), r.metric)

    return sorted(rows, key=key)


def run_grid(cells: Sequence[Cell]) -> List[ResultRow]:
    """Execute every cell concurrently and return the sorted rows."""
    batches = run_concurrently([lambda c=c: _execute(c) for c in cells])
    return sort_rows([row for batch in batches for row in batch])


def _fmt(x: float) -> str:
    return f"{x:.6g}"


# ---------------------------------------------------------------------------
# toy gradient
# ---------------------------------------------------------------------------


def toy_reference_gradient(z0: float, k: float, T: float) -> float:
    """dJ/dz0 of J = z(T)^2 for dz/dt = k z: 2 z0 exp(2 k T)."""
    return 2.0 * z0 * math.exp(2.0 * k * T)


def run_toy_gradient(cfg: ExperimentConfig) -> ExperimentResult:
    """|dJ/dz0 - 2 z0 exp(2kT)| for every method and horizon.

    For linear dynamics the checkpoint replay differentiates the forward
    discretization exactly, so its dz0-gradient equals 2 J / z0 to round-off; that
    residual is recorded as "discrete_identity_residual" and gates the run. The
    ACA-versus-adjoint error ordering goes to the summary for information only.
    """
    solver_cfg = cfg.solver_config(TOY_TOLERANCE)
    dyn = linear_dynamics(cfg.k)
    theta = np.array([cfg.k])

    def compute(cell: Cell, T: float) -> List[ResultRow]:
        result = gradient_dispatch(
            cell.method, dyn, [cfg.z0], theta, 0.0, T, cfg.tableau, solver_cfg, LossKind.SQUARED_STATE
        )
        reference = toy_reference_gradient(cfg.z0, cfg.k, T)
        rows = [cell.row("abs_error_dz0", abs(result.d_loss_d_z0[0] - reference), reference, result.stats)]
        if cell.method == "aca" and cfg.z0 != 0.0 and result.loss != 0.0:
            discrete = 2.0 * result.loss / cfg.z0
            residual = abs(result.d_loss_d_z0[0] - discrete) / abs(discrete)
            rows.append(cell.row("discrete_identity_residual", residual, 0.0, result.stats))
        return rows

    def toy_metrics(method: str) -> Tuple[str, ...]:
        if method == "aca" and cfg.z0 != 0.0:
            return ("abs_error_dz0", "discrete_identity_residual")
        return ("abs_error_dz0",)

    cells = [
        Cell(cfg.experiment.value, method, cfg.tableau, solver_cfg.rtol, f"T={_fmt(T)}", toy_metrics(method),
             lambda cell, T=T: compute(cell, T))
        for method in cfg.methods
        for T in cfg.horizons
    ]
    rows = run_grid(cells)
    result = ExperimentResult(cfg.experiment.value, rows)

    errors = {m: result.values("abs_error_dz0", m) for m in cfg.methods}
    if "aca" in errors and cfg.z0 != 0.0:
        residuals = result.values("discrete_identity_residual", "aca")
        result.checks["aca_discrete_identity"] = bool(residuals) and all(
            r <= TOY_IDENTITY_TOLERANCE for r in residuals.values()
        )
    if "aca" in errors and "adjoint" in errors:
        result.summary["aca_le_adjoint"] = all(
            errors["aca"][s] <= errors["adjoint"][s] for s in errors["aca"] if s in errors["adjoint"]
        )
    if "aca" in errors and 1.0 in cfg.horizons:
        rel = errors["aca"]["T=1"] / toy_reference_gradient(cfg.z0, cfg.k, 1.0)
        result.checks["aca_rel_error_T1"] = bool(rel < 1e-3)
    return result


# ---------------------------------------------------------------------------
# van der Pol reversibility
# ---------------------------------------------------------------------------


def _trajectory_rows(cell: Cell, phase: str, times: np.ndarray, states: np.ndarray) -> List[ResultRow]:
    stride = max(1, int(math.ceil(len(times) / SAMPLES_PER_PHASE)))
    picks = list(range(0, len(times), stride))
    if picks[-1] != len(times) - 1:
        picks.append(len(times) - 1)
    rows = []
    for i in picks:
        setting = f"{cell.setting};phase={phase};t={_fmt(times[i])}"
        rows.extend(cell.row(f"y{j + 1}", states[i, j], setting=setting) for j in range(states.shape[1]))
    return rows


def run_vdp_reverse(cfg: ExperimentConfig) -> ExperimentResult:
    """Adjoint-style reverse reconstruction against checkpoint replay on the van der Pol oscillator.

    A second study takes dJ/dz0 of an MSE-to-target loss with every method at a loose
    tolerance and compares it with central differences of the loss integrated at a
    tight tolerance, i.e. the gradient of the exact flow.
    """
    solver_cfg = cfg.solver_config()
    dyn = van_der_pol_dynamics(cfg.mu)
    theta = dyn.default_params()
    z0 = np.array(VDP_INITIAL_STATE)
    y0 = f"y0=({_fmt(z0[0])},{_fmt(z0[1])})"
    horizon = cfg.vdp_horizon

    def adjoint_reverse(cell: Cell) -> List[ResultRow]:
        report = reverse_reconstruction(dyn, z0, theta, 0.0, horizon, cfg.tableau, solver_cfg)
        stats = CostStats(
            forward_f_evals=report.forward_cache.total_f_evals,
            backward_f_evals=report.reverse_cache.total_f_evals,
            forward_accepted=report.forward_cache.accepted_steps,
            forward_rejected=report.forward_cache.rejected_steps,
            reverse_accepted=report.reverse_cache.accepted_steps,
        )
        rows = [cell.row("reconstruction_error", report.abs_error, stats=stats)]
        rows += _trajectory_rows(cell, "forward", report.forward_cache.time_points, report.forward_cache.z_values)
        rows += _trajectory_rows(cell, "reverse", report.reverse_cache.time_points, report.reverse_cache.z_values)
        return rows

    def checkpoint_replay(cell: Cell) -> List[ResultRow]:
        _, cache = integrate(dyn, z0, theta, 0.0, horizon, cfg.tableau, solver_cfg)
        error = replay_checkpoints(dyn, theta, cache, cfg.tableau)
        stats = CostStats(
            forward_f_evals=cache.total_f_evals,
            forward_accepted=cache.accepted_steps,
            forward_rejected=cache.rejected_steps,
        )
        return [cell.row("reconstruction_error", error, stats=stats)]

    def reverse_order(cell: Cell) -> List[ResultRow]:
        series = reverse_error_vs_step(dyn, z0, theta, 0.0, cfg.vdp_slope_horizon, "rk4", cfg.h_list)
        rows = [
            cell.row("reverse_error", err, setting=f"{cell.setting};h={_fmt(h)}")
            for h, err in zip(series.values, series.errors)
        ]
        rows.append(cell.row("reverse_error_slope", series.slope, reference=4.0))
        return rows

    loose_cfg = SolverConfig(rtol=VDP_LOOSE_TOLERANCE, atol=VDP_LOOSE_TOLERANCE)
    flow_cfg = SolverConfig(rtol=VDP_FLOW_TOLERANCE, atol=VDP_FLOW_TOLERANCE)
    target_loss = TerminalLoss(LossKind.MSE_TO_TARGET, VDP_GRADIENT_TARGET)

    def flow_loss(x: np.ndarray) -> float:
        z_T, _ = integrate(dyn, x, theta, 0.0, VDP_GRADIENT_HORIZON, cfg.tableau, flow_cfg)
        return target_loss(z_T)[0]

    flow_gradient = fd_gradient(flow_loss, z0, FDOracleConfig(epsilon=cfg.fd_epsilon))

    def loose_gradient(cell: Cell) -> List[ResultRow]:
        result = gradient_dispatch(
            cell.method, dyn, z0, theta, 0.0, VDP_GRADIENT_HORIZON, cfg.tableau, loose_cfg, target_loss
        )
        error = float(np.max(np.abs(result.d_loss_d_z0 - flow_gradient)))
        return [cell.row("loose_gradient_error", error, float(np.max(np.abs(flow_gradient))), result.stats)]

    experiment = cfg.experiment.value
    cells = [
        Cell(experiment, "adjoint", cfg.tableau, solver_cfg.rtol, f"{y0};T={_fmt(horizon)}",
             ("reconstruction_error",), adjoint_reverse),
        Cell(experiment, "aca", cfg.tableau, solver_cfg.rtol, f"{y0};T={_fmt(horizon)}",
             ("reconstruction_error",), checkpoint_replay),
        Cell(experiment, "adjoint", "rk4", math.nan, f"{y0};T={_fmt(cfg.vdp_slope_horizon)}",
             ("reverse_error_slope",), reverse_order),
    ]
    target = ",".join(_fmt(x) for x in VDP_GRADIENT_TARGET)
    gradient_setting = f"{y0};T={_fmt(VDP_GRADIENT_HORIZON)};target=({target})"
    cells += [
        Cell(experiment, method, cfg.tableau, VDP_LOOSE_TOLERANCE, gradient_setting, ("loose_gradient_error",),
             loose_gradient)
        for method in cfg.methods
    ]
    rows = run_grid(cells)
    result = ExperimentResult(experiment, rows)

    def single(metric: str, method: str) -> float:
        values = list(result.values(metric, method).values())
        return values[0] if values else math.nan

    adjoint_error = single("reconstruction_error", "adjoint")
    replay_error = single("reconstruction_error", "aca")
    slope = single("reverse_error_slope", "adjoint")
    result.checks["adjoint_error_visible"] = bool(adjoint_error > 1e-3 * np.linalg.norm(z0))
    result.checks["replay_exact"] = bool(replay_error == 0.0)
    result.checks["reverse_error_slope_rk4"] = bool(3.5 <= slope <= 4.5)
    if "aca" in cfg.methods and "adjoint" in cfg.methods:
        loose_aca = single("loose_gradient_error", "aca")
        loose_adjoint = single("loose_gradient_error", "adjoint")
        result.checks["aca_beats_adjoint_loose"] = bool(loose_aca < loose_adjoint)
    result.summary["initial_state"] = list(VDP_INITIAL_STATE)
    return result


# ---------------------------------------------------------------------------
# convergence orders
# ---------------------------------------------------------------------------


def convergence_steps(tableau_name: str) -> List[float]:
    """Step sizes of the convergence study: 2^-1..2^-5 for order >= 5, else 2^-3..2^-8."""
    if get_tableau(tableau_name).order >= 5:
        return [2.0 ** -p for p in range(1, 6)]
    return [2.0 ** -p for p in range(3, 9)]


def run_convergence(cfg: ExperimentConfig) -> ExperimentResult:
    """Fixed-step global error on dz/dt = z over [0, 1] and the fitted order per tableau."""
    dyn = linear_dynamics(1.0)
    theta = np.array([1.0])
    reference = np.array([math.e])

    def compute(cell: Cell) -> List[ResultRow]:
        tableau = get_tableau(cell.tableau)
        report = convergence_study(dyn, [1.0], theta, 0.0, 1.0, tableau, convergence_steps(cell.tableau), reference)
        rows = [
            cell.row("global_error", err, setting=f"h={_fmt(h)}")
            for h, err in zip(report.h_values, report.errors)
        ]
        rows.append(cell.row("slope", report.slope, reference=tableau.order))
        return rows

    cells = [
        Cell(cfg.experiment.value, "forward", get_tableau(name).name, math.nan, "f=z;T=1", ("slope",), compute)
        for name in cfg.tableaux
    ]
    rows = run_grid(cells)
    result = ExperimentResult(cfg.experiment.value, rows)
    for r in rows:
        if r.metric == "slope":
            result.checks[f"order_{r.tableau}"] = bool(abs(r.value - r.reference) <= 0.3)
    return result


# ---------------------------------------------------------------------------
# finite-difference gradient checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradcheckProblem:
    """A terminal-loss problem probed along random directions.

    Attributes:
        name: Problem identifier.
        dyn: Dynamics.
        z0: Initial state.
        theta: Parameters.
        T: End time.
        loss: Terminal loss.
    """
    name: str
    dyn: Dynamics
    z0: np.ndarray
    theta: np.ndarray
    T: float
    loss: TerminalLoss

    @property
    def size(self) -> int:
        return self.z0.size + self.theta.size

    def loss_at(self, x: np.ndarray, tableau: str, cfg: SolverConfig) -> float:
        d = self.z0.size
        z_T, _ = integrate(self.dyn, x[:d], x[d:], 0.0, self.T, tableau, cfg)
        return self.loss(z_T)[0]

    def joint_gradient(self, result: GradientResult) -> np.ndarray:
        return np.concatenate([result.d_loss_d_z0, result.d_loss_d_theta])


def gradcheck_problems(cfg: ExperimentConfig) -> List[GradcheckProblem]:
    """Linear, FC-network and three-body problems, seeded from cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    fc = fc_dynamics(hidden=cfg.hidden)
    z_ref = reference_initial_state(cfg.seed)
    fc_target = z_ref + rng.normal(scale=0.1, size=z_ref.size)
    body_target = z_ref + rng.normal(scale=0.1, size=z_ref.size)
    return [
        GradcheckProblem("linear", linear_dynamics(cfg.k), np.array([cfg.z0]), np.array([cfg.k]), 1.0,
                         TerminalLoss(LossKind.SQUARED_STATE)),
        GradcheckProblem("fc", fc, z_ref, fc.init_params(cfg.seed), GRADCHECK_HORIZON,
                         TerminalLoss(LossKind.MSE_TO_TARGET, tuple(fc_target))),
        GradcheckProblem("three_body", three_body_dynamics(), z_ref, np.array(REFERENCE_MASSES), GRADCHECK_HORIZON,
                         TerminalLoss(LossKind.MSE_TO_TARGET, tuple(body_target))),
    ]


def probe_directions(seed: int, index: int, size: int, probes: int) -> np.ndarray:
    """Random unit directions, one per row."""
    u = np.random.default_rng([seed, index]).normal(size=(probes, size))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def run_gradcheck(cfg: ExperimentConfig) -> ExperimentResult:
    """Directional agreement of each method with central finite differences."""
    solver_cfg = cfg.solver_config(cfg.gradcheck_tol)
    fd_cfg = FDOracleConfig(epsilon=cfg.fd_epsilon)
    problems = gradcheck_problems(cfg)
    directions = [probe_directions(cfg.seed, i, p.size, cfg.probes) for i, p in enumerate(problems)]

    def oracle(problem: GradcheckProblem, u: np.ndarray):
        x = np.concatenate([problem.z0, problem.theta])
        try:
            return np.array([
                fd_directional(lambda y: problem.loss_at(y, cfg.tableau, solver_cfg), x, direction, fd_cfg)
                for direction in u
            ])
        except AcaOdeError as exc:
            logger.warning(f"gradcheck: finite differences failed on {problem.name}: {exc}")
            return None

    logger.info(f"gradcheck: {cfg.probes} finite-difference probes on {len(problems)} problems")
    fd_values = run_concurrently([lambda p=p, u=u: oracle(p, u) for p, u in zip(problems, directions)])

    def compute(cell: Cell, problem: GradcheckProblem, u: np.ndarray, fd: Optional[np.ndarray]):
        threshold = GRADCHECK_THRESHOLDS[cell.method]
        if fd is None:
            return [cell.row("max_rel_error", math.nan, threshold, flag=DIVERGED)]
        result = gradient_dispatch(
            cell.method, problem.dyn, problem.z0, problem.theta, 0.0, problem.T, cfg.tableau, solver_cfg,
            problem.loss,
        )
        analytic = u @ problem.joint_gradient(result)
        rel = float(np.max(np.abs(analytic - fd)) / np.max(np.abs(fd)))
        logger.debug(f"gradcheck {problem.name}/{cell.method}: max relative error {rel:.3e}")
        return [cell.row("max_rel_error", rel, threshold, result.stats)]

    cells = [
        Cell(cfg.experiment.value, method, cfg.tableau, solver_cfg.rtol, f"problem={problem.name}",
             ("max_rel_error",), lambda cell, p=problem, u=u, fd=fd: compute(cell, p, u, fd))
        for problem, u, fd in zip(problems, directions, fd_values)
        for method in cfg.methods
    ]
    rows = run_grid(cells)
    result = ExperimentResult(cfg.experiment.value, rows)
    for r in rows:
        result.checks[f"{r.method}_{r.setting.split('=', 1)[1]}"] = bool(r.value < r.reference)
    return result


# ---------------------------------------------------------------------------
# three-body fit
# ---------------------------------------------------------------------------


def reference_dataset(cfg: ExperimentConfig) -> TrajectoryDataset:
    """The dataset at cfg.dataset, or the packaged reference trajectory at cfg.samples_per_year."""
    if cfg.dataset is not None:
        logger.info(f"Loading three-body dataset from {cfg.dataset}")
        return load_dataset(cfg.dataset)
    logger.info(f"Loading packaged three-body reference ({cfg.samples_per_year} samples per year)")
    return load_reference_dataset(samples_per_year=cfg.samples_per_year)


def run_three_body_fit(cfg: ExperimentConfig) -> ExperimentResult:
    """Fit the masses ("ode") or an FC network ("node") to the reference trajectory with each method."""
    dataset = reference_dataset(cfg)
    solver_cfg = cfg.solver_config(FIT_TOLERANCE)
    opt_cfg = OptimizerConfig(initial_lr=cfg.initial_lr, decay=cfg.decay, epochs=cfg.epochs, seed=cfg.seed)
    true_masses = np.array(REFERENCE_MASSES)
    experiment = cfg.experiment.value

    if cfg.model == "ode":
        dyn = LogParameterized(three_body_dynamics())
        theta0 = np.log(cfg.mass_scale_init * true_masses)
        metrics = ("train_mse", "test_mse", "mass_max_rel_error")
    else:
        dyn = fc_dynamics(hidden=cfg.hidden)
        theta0 = dyn.init_params(cfg.seed)
        metrics = ("train_mse", "test_mse")
    baseline = math.nan
    if cfg.model == "node":
        baseline = trajectory_mse(dyn, np.zeros(dyn.param_dim), dataset, cfg.tableau, solver_cfg)
        logger.info(f"Free-motion baseline test MSE: {baseline:.3e}")

    def compute(cell: Cell) -> List[ResultRow]:
        report = fit(dyn, dataset, opt_cfg, solver_cfg, cell.method, theta0, cfg.tableau)
        rows = [
            cell.row("train_mse", report.train_mse, stats=report.grad_stats),
            cell.row("test_mse", report.test_mse, baseline, report.grad_stats),
        ]
        if cfg.model == "ode":
            masses = np.exp(report.final_theta)
            rel = np.abs(masses - true_masses) / true_masses
            rows += [cell.row(f"mass_{i + 1}", m, true_masses[i]) for i, m in enumerate(masses)]
            rows.append(cell.row("mass_max_rel_error", float(np.max(rel)), 0.01))
        return rows

    cells = [
        Cell(experiment, method, cfg.tableau, solver_cfg.rtol, f"model={cfg.model};epochs={cfg.epochs}",
             metrics, compute)
        for method in cfg.methods
    ]
    rows = run_grid(cells)
    result = ExperimentResult(experiment, rows)
    if "aca" in cfg.methods:
        aca = {r.metric: r.value for r in rows if r.method == "aca"}
        if cfg.model == "ode":
            result.checks["aca_masses_within_1pct"] = bool(aca.get("mass_max_rel_error", math.nan) <= 0.01)
            result.checks["aca_test_mse"] = bool(aca.get("test_mse", math.nan) <= 0.003)
        else:
            result.checks["aca_beats_free_motion"] = bool(aca.get("test_mse", math.nan) < baseline)
    result.summary["dataset_samples"] = len(dataset)
    return result


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


RUNNERS: Dict[ExperimentKind, Callable[[ExperimentConfig], ExperimentResult]] = {
    ExperimentKind.TOY_GRADIENT: run_toy_gradient,
    ExperimentKind.VDP_REVERSE: run_vdp_reverse,
    ExperimentKind.CONVERGENCE: run_convergence,
    ExperimentKind.GRADCHECK: run_gradcheck,
    ExperimentKind.THREE_BODY_FIT: run_three_body_fit,
}


def write_results(result: ExperimentResult, cfg: ExperimentConfig) -> Tuple[Path, Path]:
    """Write {experiment}.csv and its {experiment}.manifest.json sidecar into cfg.output_dir."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{result.experiment}.csv"
    manifest_path = out / f"{result.experiment}.manifest.json"

    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in result.rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(row).items()})

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "experiment": result.experiment,
        "version": __version__,
        "seed": cfg.seed,
        "rows": len(result.rows),
        "columns": list(RESULT_COLUMNS),
        "checks": result.checks,
        "config": cfg.model_dump(mode="json"),
    }
    manifest_path.write_text(json.dumps(manifest) + "\n")
    logger.info(f"Wrote {len(result.rows)} rows to {csv_path}")
    return csv_path, manifest_path


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Run one experiment, write its results and log failed checks."""
    logger.info(f"Running {cfg.experiment.value} (methods={cfg.methods}, tableau={cfg.tableau}, seed={cfg.seed})")
    start = time.perf_counter()
    result = RUNNERS[cfg.experiment](cfg)
    result.summary.update(
        experiment=result.experiment,
        rows=len(result.rows),
        checks=result.checks,
        passed=result.passed,
        wall_time=time.perf_counter() - start,
    )
    if write:
        csv_path, _ = write_results(result, cfg)
        result.summary["csv"] = str(csv_path)
    for name, ok in result.checks.items():
        if not ok:
            logger.warning(f"{result.experiment}: check '{name}' failed")
    logger.info(f"{result.experiment} finished: {'passed' if result.passed else 'FAILED'}")
    return result


def validate_output(directory: Path) -> List[str]:
    """Check every result CSV in a directory against the schema and its manifest.

    Returns:
        Human-readable problems; empty when everything validates.
    """
    directory = Path(directory)
    problems: List[str] = []
    csv_files = sorted(directory.glob("*.csv"))
    if not csv_files:
        return [f"No result files in {directory}"]

    for csv_path in csv_files:
        with csv_path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            header = tuple(reader.fieldnames or ())
            rows = list(reader)
        if header != RESULT_COLUMNS:
            problems.append(f"{csv_path.name}: unexpected columns {header}")
            continue
        for lineno, row in enumerate(rows, start=2):
            if row["schema_version"] != str(SCHEMA_VERSION):
                problems.append(f"{csv_path.name}:{lineno}: schema_version {row['schema_version']}")
            if row["flag"] not in ("", DIVERGED):
                problems.append(f"{csv_path.name}:{lineno}: unknown flag '{row['flag']}'")
            try:
                float(row["value"])
                float(row["tolerance"])
                float(row["reference"])
            except ValueError:
                problems.append(f"{csv_path.name}:{lineno}: non-numeric value")

        manifest_path = csv_path.with_name(f"{csv_path.stem}.manifest.json")
        if not manifest_path.exists():
            problems.append(f"{csv_path.name}: missing manifest")
            continue
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            problems.append(f"{manifest_path.name}: invalid JSON ({exc})")
            continue
        if manifest.get("schema_version") != SCHEMA_VERSION:
            problems.append(f"{manifest_path.name}: schema_version {manifest.get('schema_version')}")
        if manifest.get("rows") != len(rows):
            problems.append(f"{manifest_path.name}: declares {manifest.get('rows')} rows, CSV has {len(rows)}")
        if manifest.get("experiment") != csv_path.stem:
            problems.append(f"{manifest_path.name}: experiment '{manifest.get('experiment')}'")
    return problems


def load_manifest_config(path: Path) -> ExperimentConfig:
    """Rebuild the ExperimentConfig echoed in a manifest."""
    manifest = json.loads(Path(path).read_text())
    return ExperimentConfig(**manifest["config"])
