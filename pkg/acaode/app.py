"""
acaode Application.

This module defines the command-line interface that runs the experiment harness,
and the MCP server that exposes the same experiments to AI agents.
"""

import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from fastmcp import FastMCP

from . import __version__, harness
from .config import ExperimentConfig, ExperimentKind, load_config_file
from .solvers import TABLEAUX

logger = logging.getLogger("acaode.app")

SUBCOMMANDS = {
    "toy-gradient": ExperimentKind.TOY_GRADIENT,
    "vdp-reverse": ExperimentKind.VDP_REVERSE,
    "convergence": ExperimentKind.CONVERGENCE,
    "gradcheck": ExperimentKind.GRADCHECK,
    "three-body": ExperimentKind.THREE_BODY_FIT,
}

# file keys accepted as aliases of ExperimentConfig fields
KEY_ALIASES = {"method": "methods", "out": "output_dir", "tol": None}


def tableau_catalog() -> List[Dict[str, object]]:
    """Describe every tableau in the catalog (aliases excluded)."""
    seen = {}
    for tableau in TABLEAUX.values():
        seen.setdefault(tableau.name, {
            "name": tableau.name,
            "stages": tableau.stages,
            "order": tableau.order,
            "error_order": tableau.error_order,
            "adaptive": tableau.is_adaptive,
            "fsal": tableau.fsal,
        })
    return list(seen.values())


def normalise_keys(values: Dict[str, object]) -> Dict[str, object]:
    """Map config-file spellings onto ExperimentConfig field names.

    ``tol`` sets both rtol and atol.
    """
    out: Dict[str, object] = {}
    for key, value in values.items():
        key = key.replace("-", "_")
        if key == "tol":
            out["rtol"] = out["atol"] = value
            continue
        out[KEY_ALIASES.get(key) or key] = value
    return out


def build_config(
    experiment: ExperimentKind,
    file_values: Optional[Dict[str, object]] = None,
    overrides: Optional[Dict[str, object]] = None,
) -> ExperimentConfig:
    """Merge defaults < file values < overrides into a validated ExperimentConfig.

    Raises:
        pydantic.ValidationError: If a merged value is invalid.
    """
    values: Dict[str, object] = {}
    values.update(normalise_keys(file_values or {}))
    values.update(normalise_keys({k: v for k, v in (overrides or {}).items() if v is not None}))
    values["experiment"] = experiment
    return ExperimentConfig(**values)


def read_config_source(path: Path) -> Dict[str, object]:
    """Read a ``key = value`` file, or the config echoed in a result manifest (``*.json``)."""
    path = Path(path)
    if path.suffix == ".json":
        return dict(json.loads(path.read_text())["config"])
    return dict(load_config_file(path))


# --- MCP Server Definition ---
mcp = FastMCP("acaode Gradient Lab")


@mcp.tool()
def get_help() -> str:
    """Returns a guide to the experiments acaode can run and how to read their results.

    Read this if you are unsure how to proceed.

    Returns:
        A formatted markdown string containing the user guide.
    """
    return """
# acaode Guide for AI Agents

acaode integrates ODEs with explicit Runge-Kutta solvers and differentiates the
result three ways: **aca** (adaptive checkpoint adjoint), **adjoint** (reverse-time
costate solve) and **naive** (backpropagation through every solver operation).

## Recommended Workflow

1.  **Pick a solver**: `list_tableaux` (or the resource `acaode://tableaux`) shows
    each tableau's order, stage count and whether it adapts its step size.

2.  **Run an experiment** with `run_experiment(experiment=..., methods="aca,adjoint")`:
    *   `toy_gradient`: error of dJ/dz0 against 2 z0 exp(2kT) for T = 1..10.
    *   `vdp_reverse`: reverse-time reconstruction error of the adjoint on the
        van der Pol oscillator versus exact checkpoint replay.
    *   `convergence`: fitted global-error order per tableau on dz/dt = z.
    *   `gradcheck`: agreement with central finite differences on random directions.
    *   `three_body_fit`: recover the masses of a three-body system (minutes).
    Extra settings go in `overrides`, e.g. `{"horizons": "1,2,3", "epochs": "20"}`.

3.  **Read the summary**: `checks` maps each acceptance check to true/false and
    `csv` points at the written results. Rows flagged `diverged` hold NaN.

## Interpreting Results

*   ACA errors at or below the adjoint's on the toy problem are expected.
*   A non-zero `reconstruction_error` for the adjoint with zero for aca is the
    point of the van der Pol study, not a bug.
    """


@mcp.tool()
def list_tableaux() -> str:
    """List the Butcher tableaux available to every experiment.

    Returns:
        A JSON-formatted string describing each tableau.
    """
    return json.dumps(tableau_catalog(), indent=2)


@mcp.tool()
async def run_experiment(
    experiment: str,
    methods: Optional[str] = None,
    tableau: str = "dopri5",
    seed: int = 0,
    output_dir: str = "results",
    overrides: Optional[Dict[str, str]] = None,
) -> str:
    """Run one experiment and return its summary.

    Args:
        experiment: toy_gradient, vdp_reverse, convergence, gradcheck or three_body_fit.
        methods: Comma-separated gradient methods (default: all three).
        tableau: Tableau catalog name.
        seed: Random seed.
        output_dir: Directory receiving the CSV and manifest.
        overrides: Further ExperimentConfig keys as strings.

    Returns:
        A JSON-formatted summary, or an error message string.
    """
    try:
        values = dict(overrides or {})
        values.update(methods=methods, tableau=tableau, seed=seed, output_dir=output_dir)
        cfg = build_config(ExperimentKind(experiment), overrides=values)
        result = await asyncio.to_thread(harness.run_experiment, cfg)
        return json.dumps(result.summary, indent=2, default=str)
    except Exception as e:
        return f"Failed to run experiment: {str(e)}"


@mcp.resource("acaode://tableaux")
def tableaux_resource() -> str:
    """Returns the tableau catalog.

    Returns:
        A JSON-formatted string describing each tableau.
    """
    return json.dumps(tableau_catalog(), indent=2)


def _config_keys_epilog() -> str:
    lines = ["config file keys (key = value, lists comma-separated):"]
    for name, info in ExperimentConfig.model_fields.items():
        if name == "experiment":
            continue
        default = info.default_factory() if info.default_factory else info.default
        if isinstance(default, list):
            default = ",".join(f"{x:g}" if isinstance(x, float) else str(x) for x in default)
        lines.append(f"  {name} (default: {default})")
    return "\n".join(lines)


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the acaode command line.

    Returns:
        0 when every acceptance check passed (or the output validated), 1 otherwise.
    """
    import argparse

    parser = argparse.ArgumentParser(
        description="acaode experiment runner",
        epilog=_config_keys_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"acaode {__version__}")
    parser.add_argument("--log-level", default="INFO", help="Logging level (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, kind in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"Run the {kind.value} experiment")
        p.add_argument("--config", type=Path, help="key = value file, or a result manifest to reproduce")
        p.add_argument("--out", help="Output directory (default: results)")
        p.add_argument("--seed", type=int, help="Random seed (default: 0)")
        p.add_argument("--method", help="Comma-separated gradient methods (default: aca,adjoint,naive)")
        p.add_argument("--tableau", help="Tableau name (default: dopri5)")
        p.add_argument("--rtol", type=float, help="Relative tolerance override")
        p.add_argument("--atol", type=float, help="Absolute tolerance override")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="Set any config key (repeatable)")

    v = sub.add_parser("validate", help="Check result CSVs and manifests against the schema")
    v.add_argument("directory", type=Path, nargs="?", default=Path("results"), help="Output directory")

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    if args.command == "validate":
        problems = harness.validate_output(args.directory)
        for problem in problems:
            print(problem)
        if not problems:
            print(f"{args.directory}: all result files valid")
        return 1 if problems else 0

    try:
        file_values = read_config_source(args.config) if args.config else {}
        overrides: Dict[str, object] = {}
        for item in args.set:
            if "=" not in item:
                parser.error(f"--set expects KEY=VALUE, got '{item}'")
            key, value = item.split("=", 1)
            overrides[key.strip()] = value.strip()
        overrides.update(
            output_dir=args.out, seed=args.seed, methods=args.method,
            tableau=args.tableau, rtol=args.rtol, atol=args.atol,
        )
        cfg = build_config(SUBCOMMANDS[args.command], file_values, overrides)
    except (OSError, ValueError) as e:
        print(f"Invalid configuration: {e}", file=sys.stderr)
        return 1

    result = harness.run_experiment(cfg)
    for check, ok in result.checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {check}")
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
