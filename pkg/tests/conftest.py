import numpy as np
import pytest

from acaode.config import SolverConfig
from acaode.dynamics import Dynamics, linear_dynamics, van_der_pol_dynamics


class CountingDynamics(Dynamics):
    """Wraps a dynamics and counts eval and vjp calls."""

    def __init__(self, inner: Dynamics):
        self.inner = inner
        self.evals = 0
        self.vjps = 0

    @property
    def state_dim(self) -> int:
        return self.inner.state_dim

    @property
    def param_dim(self) -> int:
        return self.inner.param_dim

    def eval(self, t, z, theta):
        self.evals += 1
        return self.inner.eval(t, z, theta)

    def vjp(self, t, z, theta, v):
        self.vjps += 1
        return self.inner.vjp(t, z, theta, v)


@pytest.fixture
def linear():
    """dz/dt = z with theta = [1]."""
    return linear_dynamics(1.0)


@pytest.fixture
def vdp():
    return van_der_pol_dynamics(0.15)


@pytest.fixture
def tight_cfg():
    return SolverConfig(rtol=1e-10, atol=1e-10)


@pytest.fixture
def counting():
    """Factory wrapping any dynamics in a call counter."""
    return CountingDynamics


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def output_dir(tmp_path):
    """A fresh results directory per test."""
    out = tmp_path / "results"
    out.mkdir()
    return out
