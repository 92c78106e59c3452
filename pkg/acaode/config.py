"""
Configuration Models.

Solver, optimizer, oracle and experiment settings are pydantic models whose
validators encode the invariants the integrators and runners rely on. Experiment
settings can also be read from a flat ``key = value`` text file.
"""

import logging
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger("acaode.config")


class SolverConfig(BaseModel):
    """Settings for one integration: tolerances and controller safeguards.

    Attributes:
        rtol: Relative tolerance folded into the error norm.
        atol: Absolute tolerance folded into the error norm.
        h_init: Initial step magnitude; None selects it automatically.
        first_step_growth: An accepted first trial (automatic start only) whose controller
            would grow it by more than this factor is retried at the proposed size.
        safety: Safety factor of the step-size controller.
        min_factor: Smallest allowed ratio h_new / h.
        max_factor: Largest allowed ratio h_new / h.
        max_rejects_per_step: Rejections tolerated before a step is abandoned.
        max_steps: Accepted steps tolerated before an integration is abandoned.
        h_min: Step floor; None means 1e-12 * |T - t0|.
        adaptive: False forces fixed stepping even for embedded pairs.
        n_steps: Number of steps used by fixed stepping.
        max_tape_nodes: Node budget of the naive method's tape.
    """
    model_config = ConfigDict(frozen=True)

    rtol: float = Field(1e-3, gt=0)
    atol: float = Field(1e-6, gt=0)
    h_init: Optional[float] = Field(None, gt=0)
    first_step_growth: float = Field(5.0, gt=1)
    safety: float = Field(0.9, gt=0, lt=1)
    min_factor: float = Field(0.2, gt=0, lt=1)
    max_factor: float = Field(10.0, gt=1)
    max_rejects_per_step: int = Field(20, ge=1)
    max_steps: int = Field(1_000_000, ge=1)
    h_min: Optional[float] = Field(None, gt=0)
    adaptive: bool = True
    n_steps: int = Field(100, ge=1)
    max_tape_nodes: int = Field(5_000_000, ge=1)

    def resolved_h_min(self, span: float) -> float:
        """Return the step floor for an integration covering ``span`` time units."""
        if self.h_min is not None:
            return self.h_min
        return 1e-12 * abs(span)

    def with_tolerance(self, tol: float) -> "SolverConfig":
        """Return a copy with rtol = atol = tol."""
        return self.model_copy(update={"rtol": tol, "atol": tol})


class OptimizerKind(str, Enum):
    ADAM = "adam"
    SGD = "sgd"


class OptimizerConfig(BaseModel):
    """Optimizer and learning-rate schedule for fitting.

    Attributes:
        kind: ADAM or SGD.
        initial_lr: Learning rate at epoch 0.
        decay: Multiplicative decay per epoch (lr = initial_lr * decay**epoch).
        epochs: Number of full-batch epochs.
        adam_beta1: First-moment decay.
        adam_beta2: Second-moment decay.
        adam_eps: Denominator guard.
        seed: Seed for any randomised initialisation.
    """
    model_config = ConfigDict(frozen=True)

    kind: OptimizerKind = OptimizerKind.ADAM
    initial_lr: float = Field(0.1, gt=0)
    decay: float = Field(0.99, gt=0, le=1)
    epochs: int = Field(100, ge=1)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    seed: int = 0


class FDOracleConfig(BaseModel):
    """Finite-difference oracle settings.

    Attributes:
        epsilon: Probe half-width.
        scheme: Difference scheme; only central differences are supported.
    """
    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(1e-5, gt=0)
    scheme: Literal["central"] = "central"


class ExperimentKind(str, Enum):
    TOY_GRADIENT = "toy_gradient"
    VDP_REVERSE = "vdp_reverse"
    CONVERGENCE = "convergence"
    THREE_BODY_FIT = "three_body_fit"
    GRADCHECK = "gradcheck"


GRADIENT_METHOD_NAMES = ("aca", "adjoint", "naive")

_LIST_FIELDS = ("methods", "horizons", "h_list", "tableaux")


class ExperimentConfig(BaseModel):
    """Settings for one harness run.

    Tolerances left as None fall back to the experiment's default
    (1e-5 for the toy and three-body studies, 1e-7 for gradcheck, solver defaults
    for the van der Pol study).

    Attributes:
        experiment: Which study to run.
        methods: Gradient methods to compare.
        tableau: Catalog name of the solver tableau.
        rtol: Relative tolerance override.
        atol: Absolute tolerance override.
        seed: Seed for every random choice in the run.
        output_dir: Directory receiving CSV files and manifests.
        horizons: End times of the toy gradient study.
        k: Rate of the toy linear dynamics.
        z0: Initial value of the toy linear dynamics.
        mu: van der Pol parameter.
        vdp_horizon: Horizon of the van der Pol reconstruction demo.
        vdp_slope_horizon: Horizon of the fixed-step reconstruction-order study.
        h_list: Step sizes of the fixed-step reconstruction-order study.
        tableaux: Tableaux measured by the convergence study.
        probes: Random directions per gradcheck problem.
        fd_epsilon: Finite-difference half-width.
        gradcheck_tol: Solver tolerance of the gradcheck problems.
        model: Three-body model ("ode" fits masses, "node" fits an FC network).
        epochs: Fitting epochs.
        initial_lr: Initial learning rate.
        decay: Learning-rate decay per epoch.
        samples_per_year: Observation density of the three-body dataset; subsamples the
            packaged 1000-per-year trajectory, so it must divide 1000.
        mass_scale_init: Initial masses as a multiple of the true masses.
        hidden: Hidden width of the NODE model.
        dataset: Optional path of a dataset written by save_dataset, used instead of
            the packaged reference trajectory.
    """
    experiment: ExperimentKind
    methods: List[str] = Field(default_factory=lambda: list(GRADIENT_METHOD_NAMES))
    tableau: str = "dopri5"
    rtol: Optional[float] = Field(None, gt=0)
    atol: Optional[float] = Field(None, gt=0)
    seed: int = 0
    output_dir: Path = Path("results")

    horizons: List[float] = Field(default_factory=lambda: [float(t) for t in range(1, 11)])
    k: float = 1.0
    z0: float = 1.0

    mu: float = 0.15
    vdp_horizon: float = Field(25.0, gt=0)
    vdp_slope_horizon: float = Field(10.0, gt=0)
    h_list: List[float] = Field(default_factory=lambda: [2.0 ** -p for p in range(4, 10)])

    tableaux: List[str] = Field(default_factory=lambda: ["euler", "rk2", "rk4", "dopri5"])

    probes: int = Field(100, ge=1)
    fd_epsilon: float = Field(1e-5, gt=0)
    gradcheck_tol: float = Field(1e-7, gt=0)

    model: Literal["ode", "node"] = "ode"
    epochs: int = Field(100, ge=1)
    initial_lr: float = Field(0.1, gt=0)
    decay: float = Field(0.99, gt=0, le=1)
    samples_per_year: int = Field(1000, ge=2)
    mass_scale_init: float = Field(2.0, gt=0)
    hidden: int = Field(64, ge=1)
    dataset: Optional[Path] = None

    @field_validator(*_LIST_FIELDS, mode="before")
    @classmethod
    def split_comma_lists(cls, value):
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    @field_validator("methods")
    @classmethod
    def check_methods(cls, value: List[str]) -> List[str]:
        methods = [m.lower() for m in value]
        unknown = [m for m in methods if m not in GRADIENT_METHOD_NAMES]
        if unknown:
            raise ValueError(f"Unknown gradient methods: {unknown}")
        if not methods:
            raise ValueError("At least one gradient method is required")
        return methods

    @field_validator("samples_per_year")
    @classmethod
    def check_samples_per_year(cls, value: int) -> int:
        if 1000 % value:
            raise ValueError(f"samples_per_year must divide 1000, got {value}")
        return value

    @model_validator(mode="after")
    def check_tableaux(self) -> "ExperimentConfig":
        from .solvers import TABLEAUX

        for name in [self.tableau, *self.tableaux]:
            if name.lower() not in TABLEAUX:
                raise ValueError(f"Unknown tableau '{name}'")
        return self

    def solver_config(self, default_tol: Optional[float] = None) -> SolverConfig:
        """Build the SolverConfig for this run, applying tolerance overrides."""
        updates: Dict[str, float] = {}
        if default_tol is not None:
            updates = {"rtol": default_tol, "atol": default_tol}
        if self.rtol is not None:
            updates["rtol"] = self.rtol
        if self.atol is not None:
            updates["atol"] = self.atol
        return SolverConfig(**updates)


def load_config_file(path: Path) -> Dict[str, str]:
    """Read a flat ``key = value`` configuration file.

    Blank lines and lines starting with ``#`` are ignored; keys are normalised to
    snake_case so that ``vdp-horizon`` and ``vdp_horizon`` are equivalent.

    Args:
        path: Location of the file.

    Returns:
        A dict of raw string values, validated later by ExperimentConfig.

    Raises:
        ValueError: If a non-comment line has no ``=``.
    """
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got '{raw}'")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    logger.debug(f"Loaded {len(values)} keys from {path}")
    return values
