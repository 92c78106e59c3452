"""
Differentiable Dynamics.

This module defines the interface every right-hand side f(t, z, theta) implements
(evaluation plus vector-Jacobian products with respect to the state and the
parameters) and the concrete dynamics used by the experiments: linear growth,
van der Pol, Newtonian three-body gravitation and a fully-connected network over
pairwise-distance features.

All dynamics are immutable after construction; eval and vjp are pure functions and
may be shared between concurrent integrations.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import CollinearSingularityError, DimensionMismatchError, NonFiniteStateError

logger = logging.getLogger("acaode.dynamics")

N_BODIES = 3
SPACE_DIM = 3
THREE_BODY_STATE_DIM = 2 * N_BODIES * SPACE_DIM
# positions, then for every ordered pair: difference and its 1st/2nd/3rd-power scalings
FEATURE_DIM = N_BODIES * SPACE_DIM + N_BODIES * (N_BODIES - 1) * 4 * SPACE_DIM
ASTRONOMICAL_G = 4.0 * math.pi ** 2


def as_state(values) -> np.ndarray:
    """Validate and freeze a state vector.

    Args:
        values: Anything convertible to a 1-D float array with at least one entry.

    Returns:
        A read-only float64 copy.

    Raises:
        DimensionMismatchError: If the input is not a non-empty 1-D vector.
        NonFiniteStateError: If any entry is NaN or Inf.
    """
    arr = np.atleast_1d(np.array(values, dtype=float))
    if arr.ndim != 1 or arr.size < 1:
        raise DimensionMismatchError(f"State must be a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteStateError("State contains non-finite entries")
    arr.setflags(write=False)
    return arr


def as_params(values) -> np.ndarray:
    """Validate and freeze a parameter vector (which may be empty)."""
    arr = np.array(values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteStateError("Parameters contain non-finite entries")
    arr.setflags(write=False)
    return arr


class Dynamics(ABC):
    """Interface of a differentiable right-hand side dz/dt = f(t, z, theta)."""

    @property
    @abstractmethod
    def state_dim(self) -> int:
        ...

    @property
    @abstractmethod
    def param_dim(self) -> int:
        ...

    @abstractmethod
    def eval(self, t: float, z: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Return dz/dt at (t, z) under parameters theta."""

    @abstractmethod
    def vjp(self, t: float, z: np.ndarray, theta: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return (v^T df/dz, v^T df/dtheta)."""

    def default_params(self) -> np.ndarray:
        return np.zeros(self.param_dim)


@dataclass(frozen=True)
class LinearDynamics(Dynamics):
    """f = k z, with theta = [k].

    Attributes:
        k: Default growth rate, returned by default_params().
        dim: State dimension.
    """
    k: float = 1.0
    dim: int = 1

    @property
    def state_dim(self) -> int:
        return self.dim

    @property
    def param_dim(self) -> int:
        return 1

    def default_params(self) -> np.ndarray:
        return np.array([self.k])

    def eval(self, t, z, theta):
        return theta[0] * z

    def vjp(self, t, z, theta, v):
        return theta[0] * v, np.array([np.dot(v, z)])


@dataclass(frozen=True)
class ConstantDynamics(Dynamics):
    """f = c, independent of time, state and parameters.

    Attributes:
        c: The constant derivative.
    """
    c: Tuple[float, ...] = (0.0,)

    @property
    def state_dim(self) -> int:
        return len(self.c)

    @property
    def param_dim(self) -> int:
        return 0

    def eval(self, t, z, theta):
        return np.array(self.c, dtype=float)

    def vjp(self, t, z, theta, v):
        return np.zeros_like(v), np.zeros(0)


@dataclass(frozen=True)
class VanDerPolDynamics(Dynamics):
    """dy1/dt = y2, dy2/dt = (mu - y1^2) y2 - y1, with no free parameters.

    Attributes:
        mu: Damping parameter (0.15 in the reversibility study).
    """
    mu: float = 0.15

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def param_dim(self) -> int:
        return 0

    def eval(self, t, z, theta):
        y1, y2 = z[0], z[1]
        return np.array([y2, (self.mu - y1 * y1) * y2 - y1])

    def vjp(self, t, z, theta, v):
        y1, y2 = z[0], z[1]
        # J = [[0, 1], [-2 y1 y2 - 1, mu - y1^2]]
        gz = np.array([v[1] * (-2.0 * y1 * y2 - 1.0), v[0] + v[1] * (self.mu - y1 * y1)])
        return gz, np.zeros(0)


def _pair_geometry(r: np.ndarray, eps_min: float):
    """Return separations d[i, j] = r_i - r_j and the inverse-cube / inverse-fifth distance tables."""
    d = r[:, None, :] - r[None, :, :]
    dist = np.sqrt(np.sum(d * d, axis=-1))
    n = r.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            if not dist[i, j] > eps_min:
                raise CollinearSingularityError((i, j), float(dist[i, j]))
    off = ~np.eye(n, dtype=bool)
    inv3 = np.zeros_like(dist)
    inv5 = np.zeros_like(dist)
    inv3[off] = dist[off] ** -3
    inv5[off] = dist[off] ** -5
    return d, inv3, inv5


@dataclass(frozen=True)
class ThreeBodyDynamics(Dynamics):
    """Newtonian gravitation of three point masses, theta = [m1, m2, m3].

    The state is [r_1, r_2, r_3, v_1, v_2, v_3] (18 entries).

    Attributes:
        G: Gravitational constant (4 pi^2 in AU, years and solar masses).
        eps_min: Separation below which evaluation raises CollinearSingularityError.
    """
    G: float = ASTRONOMICAL_G
    eps_min: float = 1e-8

    @property
    def state_dim(self) -> int:
        return THREE_BODY_STATE_DIM

    @property
    def param_dim(self) -> int:
        return N_BODIES

    def accelerations(self, r: np.ndarray, masses: np.ndarray) -> np.ndarray:
        """Return the (3, 3) accelerations of bodies at positions r."""
        if np.any(masses <= 0):
            raise ValueError(f"Masses must be positive, got {masses}")
        d, inv3, _ = _pair_geometry(r, self.eps_min)
        return -self.G * np.sum((masses[None, :] * inv3)[:, :, None] * d, axis=1)

    def eval(self, t, z, theta):
        half = N_BODIES * SPACE_DIM
        r = z[:half].reshape(N_BODIES, SPACE_DIM)
        acc = self.accelerations(r, theta)
        return np.concatenate([z[half:], acc.ravel()])

    def vjp(self, t, z, theta, v):
        half = N_BODIES * SPACE_DIM
        r = z[:half].reshape(N_BODIES, SPACE_DIM)
        v_acc = v[half:].reshape(N_BODIES, SPACE_DIM)
        d, inv3, inv5 = _pair_geometry(r, self.eps_min)

        # J(d) v_i = v_i / |d|^3 - 3 d (d . v_i) / |d|^5 for each ordered pair (i, j)
        d_dot_v = np.sum(d * v_acc[:, None, :], axis=-1)
        jv = v_acc[:, None, :] * inv3[:, :, None] - 3.0 * d * (d_dot_v * inv5)[:, :, None]
        pair_grad = -self.G * theta[None, :, None] * jv
        grad_r = pair_grad.sum(axis=1) - pair_grad.sum(axis=0)

        grad_m = -self.G * np.sum(d_dot_v * inv3, axis=0)
        return np.concatenate([grad_r.ravel(), v[:half]]), grad_m


def three_body_energy(z: np.ndarray, masses: np.ndarray, G: float = ASTRONOMICAL_G) -> float:
    """Total (kinetic + potential) energy of a three-body state."""
    half = N_BODIES * SPACE_DIM
    r = np.asarray(z[:half]).reshape(N_BODIES, SPACE_DIM)
    vel = np.asarray(z[half:]).reshape(N_BODIES, SPACE_DIM)
    kinetic = 0.5 * float(np.sum(masses * np.sum(vel * vel, axis=1)))
    potential = 0.0
    for i in range(N_BODIES):
        for j in range(i + 1, N_BODIES):
            potential -= G * masses[i] * masses[j] / float(np.linalg.norm(r[i] - r[j]))
    return kinetic + potential


def three_body_momentum(z: np.ndarray, masses: np.ndarray) -> np.ndarray:
    """Total linear momentum (3-vector) of a three-body state."""
    half = N_BODIES * SPACE_DIM
    vel = np.asarray(z[half:]).reshape(N_BODIES, SPACE_DIM)
    return np.sum(masses[:, None] * vel, axis=0)


def augmented_features(r: np.ndarray, eps_min: float = 1e-8) -> np.ndarray:
    """Build the pairwise-distance feature vector of three bodies.

    Layout: the nine position coordinates, then for each body i (major) and each
    other body j, the four blocks (r_i - r_j) / |r_i - r_j|^p for p = 0, 1, 2, 3
    (power minor).

    Args:
        r: Positions, shape (3, 3) or flat (9,).
        eps_min: Separation below which the features are undefined.

    Returns:
        An 81-entry feature vector.

    Raises:
        CollinearSingularityError: If two bodies are closer than eps_min.
    """
    r = np.asarray(r, dtype=float).reshape(N_BODIES, SPACE_DIM)
    blocks = [r.ravel()]
    for i in range(N_BODIES):
        for j in range(N_BODIES):
            if j == i:
                continue
            d = r[i] - r[j]
            n = math.sqrt(float(np.dot(d, d)))
            if not n > eps_min:
                raise CollinearSingularityError((min(i, j), max(i, j)), n)
            for p in range(4):
                blocks.append(d / n ** p)
    return np.concatenate(blocks)


def augmented_features_vjp(r: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Return w^T d(features)/dr as a (3, 3) array."""
    r = np.asarray(r, dtype=float).reshape(N_BODIES, SPACE_DIM)
    half = N_BODIES * SPACE_DIM
    grad = np.array(w[:half], dtype=float).reshape(N_BODIES, SPACE_DIM)
    offset = half
    for i in range(N_BODIES):
        for j in range(N_BODIES):
            if j == i:
                continue
            d = r[i] - r[j]
            n = math.sqrt(float(np.dot(d, d)))
            for p in range(4):
                wb = w[offset:offset + SPACE_DIM]
                offset += SPACE_DIM
                # d/dd (d / n^p) = I / n^p - p d d^T / n^(p+2)
                gd = wb / n ** p - p * d * float(np.dot(d, wb)) / n ** (p + 2)
                grad[i] += gd
                grad[j] -= gd
    return grad


@dataclass(frozen=True)
class FCDynamics(Dynamics):
    """Three-body NODE: accelerations = W2 tanh(W1 Aug(r) + b1) + b2.

    theta is the flattened concatenation [W1 (hidden x feature_dim), b1, W2 (9 x hidden), b2].

    Attributes:
        feature_dim: Length of the augmented feature vector (must be 81).
        hidden: Hidden-layer width.
        eps_min: Separation below which features are undefined.
    """
    feature_dim: int = FEATURE_DIM
    hidden: int = 64
    eps_min: float = 1e-8

    def __post_init__(self):
        if self.feature_dim != FEATURE_DIM:
            raise DimensionMismatchError(
                f"feature_dim={self.feature_dim} but the three-body features have {FEATURE_DIM} entries"
            )

    @property
    def state_dim(self) -> int:
        return THREE_BODY_STATE_DIM

    @property
    def param_dim(self) -> int:
        out = N_BODIES * SPACE_DIM
        return (self.feature_dim + 1) * self.hidden + (self.hidden + 1) * out

    def unpack(self, theta: np.ndarray):
        """Split theta into (W1, b1, W2, b2) views."""
        out = N_BODIES * SPACE_DIM
        f, h = self.feature_dim, self.hidden
        i = 0
        W1 = theta[i:i + h * f].reshape(h, f)
        i += h * f
        b1 = theta[i:i + h]
        i += h
        W2 = theta[i:i + out * h].reshape(out, h)
        i += out * h
        b2 = theta[i:i + out]
        return W1, b1, W2, b2

    def init_params(self, seed: int = 0, scale: float = 0.1) -> np.ndarray:
        """Seeded initial weights: scaled normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        out = N_BODIES * SPACE_DIM
        W1 = rng.normal(size=(self.hidden, self.feature_dim)) / math.sqrt(self.feature_dim)
        W2 = scale * rng.normal(size=(out, self.hidden)) / math.sqrt(self.hidden)
        return np.concatenate([W1.ravel(), np.zeros(self.hidden), W2.ravel(), np.zeros(out)])

    def eval(self, t, z, theta):
        half = N_BODIES * SPACE_DIM
        W1, b1, W2, b2 = self.unpack(theta)
        x = augmented_features(z[:half], self.eps_min)
        hidden = np.tanh(W1 @ x + b1)
        return np.concatenate([z[half:], W2 @ hidden + b2])

    def vjp(self, t, z, theta, v):
        half = N_BODIES * SPACE_DIM
        W1, b1, W2, b2 = self.unpack(theta)
        x = augmented_features(z[:half], self.eps_min)
        hidden = np.tanh(W1 @ x + b1)

        v_acc = v[half:]
        g_W2 = np.outer(v_acc, hidden)
        g_pre = (W2.T @ v_acc) * (1.0 - hidden * hidden)
        g_W1 = np.outer(g_pre, x)
        g_r = augmented_features_vjp(z[:half], W1.T @ g_pre)

        g_theta = np.concatenate([g_W1.ravel(), g_pre, g_W2.ravel(), v_acc])
        return np.concatenate([g_r.ravel(), v[:half]]), g_theta


@dataclass(frozen=True)
class LogParameterized(Dynamics):
    """Reparameterise a dynamics by theta = log(p), keeping p = exp(theta) positive.

    Attributes:
        inner: The wrapped dynamics, evaluated at exp(theta).
    """
    inner: Dynamics

    @property
    def state_dim(self) -> int:
        return self.inner.state_dim

    @property
    def param_dim(self) -> int:
        return self.inner.param_dim

    def eval(self, t, z, theta):
        return self.inner.eval(t, z, np.exp(theta))

    def vjp(self, t, z, theta, v):
        p = np.exp(theta)
        gz, gp = self.inner.vjp(t, z, p, v)
        return gz, gp * p


def linear_dynamics(k: float = 1.0, dim: int = 1) -> LinearDynamics:
    """dz/dt = k z (the toy gradient problem)."""
    if not math.isfinite(k):
        raise ValueError(f"k must be finite, got {k}")
    return LinearDynamics(k=float(k), dim=dim)


def constant_dynamics(c) -> ConstantDynamics:
    """dz/dt = c."""
    return ConstantDynamics(c=tuple(float(x) for x in np.atleast_1d(c)))


def van_der_pol_dynamics(mu: float = 0.15) -> VanDerPolDynamics:
    """van der Pol oscillator with the reversibility study's mu = 0.15 by default."""
    if not math.isfinite(mu):
        raise ValueError(f"mu must be finite, got {mu}")
    return VanDerPolDynamics(mu=float(mu))


def three_body_dynamics(G: float = ASTRONOMICAL_G, eps_min: float = 1e-8) -> ThreeBodyDynamics:
    """Three-body gravitation with masses as the unknown parameters."""
    if not G > 0:
        raise ValueError(f"G must be positive, got {G}")
    return ThreeBodyDynamics(G=float(G), eps_min=float(eps_min))


def fc_dynamics(feature_dim: int = FEATURE_DIM, hidden: int = 64) -> FCDynamics:
    """One-hidden-layer tanh network mapping augmented features to accelerations."""
    return FCDynamics(feature_dim=feature_dim, hidden=hidden)
