import numpy as np
import pytest

from acaode.analysis import fd_gradient
from acaode.config import FDOracleConfig
from acaode.dynamics import (
    FEATURE_DIM,
    FCDynamics,
    LogParameterized,
    as_state,
    augmented_features,
    augmented_features_vjp,
    constant_dynamics,
    fc_dynamics,
    linear_dynamics,
    three_body_dynamics,
    three_body_energy,
    three_body_momentum,
    van_der_pol_dynamics,
)
from acaode.errors import CollinearSingularityError, DimensionMismatchError, NonFiniteStateError
from acaode.optimize import REFERENCE_MASSES, reference_initial_state

FD = FDOracleConfig(epsilon=1e-6)


def test_linear_eval_and_vjp():
    """Verifies that f = k z and its VJP (k v, v . z)."""
    dyn = linear_dynamics(2.0)
    np.testing.assert_array_equal(dyn.eval(0.0, np.array([3.0]), np.array([2.0])), [6.0])
    gz, gtheta = dyn.vjp(0.0, np.array([3.0]), np.array([2.0]), np.array([1.0]))
    np.testing.assert_array_equal(gz, [2.0])
    np.testing.assert_array_equal(gtheta, [3.0])


def test_constant_dynamics_has_no_parameters():
    """Verifies that constant dynamics ignore state and return zero VJPs."""
    dyn = constant_dynamics([1.0, -2.0])
    assert dyn.state_dim == 2
    assert dyn.param_dim == 0
    np.testing.assert_array_equal(dyn.eval(5.0, np.array([9.0, 9.0]), np.zeros(0)), [1.0, -2.0])
    gz, gtheta = dyn.vjp(0.0, np.zeros(2), np.zeros(0), np.ones(2))
    np.testing.assert_array_equal(gz, [0.0, 0.0])
    assert gtheta.size == 0


def test_van_der_pol_vjp_matches_finite_differences(vdp):
    """Verifies the analytic van der Pol Jacobian against central differences."""
    z = np.array([1.3, -0.4])
    v = np.array([0.7, -1.1])
    gz, _ = vdp.vjp(0.0, z, np.zeros(0), v)
    fd = fd_gradient(lambda y: float(v @ vdp.eval(0.0, y, np.zeros(0))), z, FD)
    np.testing.assert_allclose(gz, fd, rtol=1e-6, atol=1e-8)


def test_three_body_vjp_matches_finite_differences(rng):
    """Verifies both three-body VJPs (state and masses) against central differences."""
    dyn = three_body_dynamics()
    z = reference_initial_state(0)
    masses = np.array(REFERENCE_MASSES)
    v = rng.normal(size=z.size)

    gz, gm = dyn.vjp(0.0, z, masses, v)
    fd_z = fd_gradient(lambda y: float(v @ dyn.eval(0.0, y, masses)), z, FD)
    fd_m = fd_gradient(lambda m: float(v @ dyn.eval(0.0, z, m)), masses, FD)
    np.testing.assert_allclose(gz, fd_z, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(gm, fd_m, rtol=1e-5, atol=1e-6)


def test_three_body_coincident_bodies_raise():
    """Verifies that two bodies at the same position raise CollinearSingularityError."""
    dyn = three_body_dynamics()
    z = np.zeros(18)
    z[3:6] = [1.0, 0.0, 0.0]
    with pytest.raises(CollinearSingularityError) as exc:
        dyn.eval(0.0, z, np.array(REFERENCE_MASSES))
    assert exc.value.code == "COLLINEAR_SINGULARITY"


def test_three_body_rejects_non_positive_mass():
    """Verifies that non-positive masses are rejected."""
    dyn = three_body_dynamics()
    with pytest.raises(ValueError):
        dyn.eval(0.0, reference_initial_state(0), np.array([1.0, 0.0, 3.0]))


def test_three_body_factory_validates_g():
    """Verifies that G must be positive."""
    with pytest.raises(ValueError):
        three_body_dynamics(G=0.0)


def test_reference_state_is_centre_of_mass_frame():
    """Verifies that the seeded reference initial state has zero total momentum."""
    z = reference_initial_state(3)
    np.testing.assert_allclose(three_body_momentum(z, np.array(REFERENCE_MASSES)), 0.0, atol=1e-12)
    assert three_body_energy(z, np.array(REFERENCE_MASSES)) < 0.0


def test_augmented_features_layout():
    """Verifies the feature length and the first pair block (r_1 - r_2 scaled by |d|^-p)."""
    r = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    x = augmented_features(r)
    assert x.size == FEATURE_DIM == 81
    np.testing.assert_array_equal(x[:9], r.ravel())
    d = np.array([-2.0, 0.0, 0.0])
    np.testing.assert_allclose(x[9:21], np.concatenate([d, d / 2.0, d / 4.0, d / 8.0]))


def test_augmented_features_vjp_matches_finite_differences(rng):
    """Verifies the feature VJP against central differences."""
    r = reference_initial_state(1)[:9]
    w = rng.normal(size=FEATURE_DIM)
    fd = fd_gradient(lambda y: float(w @ augmented_features(y)), r, FD)
    np.testing.assert_allclose(augmented_features_vjp(r, w).ravel(), fd, rtol=1e-5, atol=1e-6)


def test_fc_dynamics_vjp_matches_finite_differences(rng):
    """Verifies the network VJP with respect to state and weights."""
    dyn = fc_dynamics(hidden=4)
    theta = dyn.init_params(seed=2, scale=1.0)
    z = reference_initial_state(2)
    v = rng.normal(size=z.size)

    gz, gtheta = dyn.vjp(0.0, z, theta, v)
    fd_z = fd_gradient(lambda y: float(v @ dyn.eval(0.0, y, theta)), z, FD)
    fd_theta = fd_gradient(lambda p: float(v @ dyn.eval(0.0, z, p)), theta, FD)
    np.testing.assert_allclose(gz, fd_z, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(gtheta, fd_theta, rtol=1e-5, atol=1e-6)


def test_fc_dynamics_parameter_count():
    """Verifies the flattened weight count (f + 1) h + (h + 1) 9."""
    dyn = fc_dynamics(hidden=64)
    assert dyn.param_dim == 82 * 64 + 65 * 9
    assert dyn.init_params(0).size == dyn.param_dim


def test_fc_dynamics_rejects_wrong_feature_dim():
    """Verifies that a feature width other than 81 is a dimension mismatch."""
    with pytest.raises(DimensionMismatchError):
        FCDynamics(feature_dim=80)


def test_log_parameterized_chain_rule():
    """Verifies that the parameter VJP is scaled by exp(theta)."""
    inner = linear_dynamics(1.0)
    dyn = LogParameterized(inner)
    theta = np.log(np.array([3.0]))
    z = np.array([2.0])
    np.testing.assert_allclose(dyn.eval(0.0, z, theta), [6.0])
    _, gtheta = dyn.vjp(0.0, z, theta, np.array([1.0]))
    np.testing.assert_allclose(gtheta, [2.0 * 3.0])


def test_as_state_validation():
    """Verifies that states are copied, frozen and checked for finiteness."""
    src = np.array([1.0, 2.0])
    state = as_state(src)
    src[0] = 5.0
    assert state[0] == 1.0
    assert not state.flags.writeable
    with pytest.raises(NonFiniteStateError):
        as_state([1.0, np.nan])
    with pytest.raises(DimensionMismatchError):
        as_state([])


def test_van_der_pol_values(vdp):
    """Verifies f(2, 0) = (0, -2) and the transposed Jacobian at (1, 1) applied to (0, 1)."""
    np.testing.assert_allclose(vdp.eval(0.0, np.array([2.0, 0.0]), np.zeros(0)), [0.0, -2.0])
    gz, gtheta = vdp.vjp(0.0, np.array([1.0, 1.0]), np.zeros(0), np.array([0.0, 1.0]))
    np.testing.assert_allclose(gz, [-3.0, -0.85])
    assert gtheta.size == 0


def _random_problem(name, seed):
    rng = np.random.default_rng(seed)
    if name == "linear":
        return linear_dynamics(1.5), rng.normal(size=1), np.array([1.5])
    if name == "van_der_pol":
        return van_der_pol_dynamics(0.15), rng.normal(size=2), np.zeros(0)
    if name == "three_body":
        return three_body_dynamics(), reference_initial_state(seed), rng.uniform(0.5, 3.0, size=3)
    dyn = fc_dynamics(hidden=8)
    return dyn, reference_initial_state(seed), dyn.init_params(seed=seed, scale=1.0)


@pytest.mark.parametrize("name", ["linear", "van_der_pol", "three_body", "fc"])
def test_vjp_is_linear_in_cotangent(name):
    """Verifies vjp(a v1 + b v2) = a vjp(v1) + b vjp(v2) to round-off for state and parameters."""
    dyn, z, theta = _random_problem(name, 11)
    rng = np.random.default_rng(12)
    v1, v2 = rng.normal(size=(2, z.size))
    a, b = 0.75, -2.5

    combined = dyn.vjp(0.0, z, theta, a * v1 + b * v2)
    first = dyn.vjp(0.0, z, theta, v1)
    second = dyn.vjp(0.0, z, theta, v2)
    for got, g1, g2 in zip(combined, first, second):
        scale = max(np.max(np.abs(a * g1), initial=0.0), np.max(np.abs(b * g2), initial=0.0))
        np.testing.assert_allclose(got, a * g1 + b * g2, rtol=1e-12, atol=1e-12 * scale)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("name", ["three_body", "fc"])
def test_vjp_matches_finite_differences_at_random_points(name, seed):
    """Verifies state and parameter VJPs against central differences at seeded random points and cotangents."""
    dyn, z, theta = _random_problem(name, seed)
    v = np.random.default_rng([seed, 7]).normal(size=z.size)

    gz, gtheta = dyn.vjp(0.0, z, theta, v)
    fd_z = fd_gradient(lambda y: float(v @ dyn.eval(0.0, y, theta)), z, FD)
    fd_theta = fd_gradient(lambda p: float(v @ dyn.eval(0.0, z, p)), theta, FD)
    np.testing.assert_allclose(gz, fd_z, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(gtheta, fd_theta, rtol=1e-5, atol=1e-6)
