"""
acaode - Differentiable ODE integration with checkpointed gradients.

acaode integrates parametric and neural ODEs with explicit Runge-Kutta solvers and
computes parameter gradients three ways: direct backpropagation through the solver
(naive), the continuous adjoint method, and the Adaptive Checkpoint Adjoint (ACA).
An experiment harness exposes the gradient-accuracy, reversibility, convergence and
three-body fitting studies through a CLI and an MCP tool server.
"""

__version__ = "0.1.0"
