import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from driftlab.models import (
    CasimirForm,
    NoiseModel,
    exact_oscillator_moments,
    make_model,
    make_oscillator,
    make_pendulum,
    make_rigid_body,
    predicted_casimir,
    predicted_energy,
)

# Frozen with mpmath at 30 digits from I = (0.345, 0.653, 1), X(0) = (0.8, 0.6, 0)
RB_H0 = 1.20318707415052045
RB_NBH_SCALAR = 0.181159420289855072
RB_E4 = 1.56550591473023060
RB_2D_ENERGY_SLOPE = 0.138435759149521717

ALL_MODELS = [
    pytest.param(lambda: make_oscillator(1.0), id="oscillator"),
    pytest.param(lambda: make_pendulum(1.0), id="pendulum"),
    pytest.param(lambda: make_rigid_body(), id="rigid_body"),
    pytest.param(lambda: make_rigid_body([[0.25, 0], [0, 0.25], [0, 0]]), id="rigid_body_2d"),
]


def random_states(model, count, seed=0, scale=2.0):
    return np.random.default_rng(seed).uniform(-scale, scale, size=(count, model.dim))


def fd_hessian(grad, x, eps=1e-5):
    n = x.size
    hess = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = eps
        hess[:, j] = (grad(x + e) - grad(x - e)) / (2 * eps)
    return hess


class TestOscillator:
    def test_initial_energy(self):
        model = make_oscillator(1)
        assert model.hamiltonian(model.initial_value) == 0.5
        assert_array_equal(model.initial_value, [0.0, 1.0])

    def test_structure(self):
        model = make_oscillator(1)
        assert model.dim == 2 and model.wiener_dim == 1
        assert_array_equal(model.poisson(np.zeros(2)), [[0, -1], [1, 0]])
        assert_array_equal(model.noise.sigma_full, [[1.0], [0.0]])

    def test_zero_noise_hessian_block(self):
        assert_array_equal(make_oscillator(0).noise.noise_block_hessian, [[0.0]])

    def test_discrete_gradient_is_midpoint(self):
        model = make_oscillator(1)
        assert_allclose(model.discrete_gradient(np.zeros(2), np.array([2.0, 2.0])), [1.0, 1.0])

    def test_rejects_non_finite_sigma(self):
        with pytest.raises(ValueError):
            make_oscillator(np.nan)


class TestPendulum:
    def test_discrete_gradient_across_half_turn(self):
        model = make_pendulum(1)
        dg = model.discrete_gradient(np.array([0.0, 0.0]), np.array([0.0, np.pi]))
        assert dg[1] == pytest.approx(0.63661977236758134, abs=1e-15)

    def test_discrete_gradient_coincident_limit(self):
        model = make_pendulum(1)
        y = np.array([0.3, np.pi / 2])
        assert model.discrete_gradient(y, y)[1] == 1.0

    def test_discrete_gradient_near_threshold_is_continuous(self):
        model = make_pendulum(1)
        y1 = np.array([0.0, 0.7])
        below = model.discrete_gradient(y1, y1 + [0.0, 0.9e-8])[1]
        above = model.discrete_gradient(y1, y1 + [0.0, 1.1e-8])[1]
        assert abs(below - above) < 1e-8

    def test_energy(self):
        model = make_pendulum(1)
        assert model.hamiltonian(np.array([1.0, 0.0])) == -0.5
        assert_allclose(model.initial_value, [1.0, np.sqrt(2.0)])


class TestRigidBody:
    def test_scalar_noise_hessian_block(self):
        model = make_rigid_body([0.25, 0.0, 0.0])
        assert_allclose(model.noise.noise_block_hessian, [[RB_NBH_SCALAR]], rtol=1e-15)

    def test_initial_invariants(self):
        model = make_rigid_body()
        assert model.hamiltonian(model.initial_value) == pytest.approx(RB_H0, rel=1e-15)
        assert model.casimir(model.initial_value) == pytest.approx(0.5, rel=1e-15)

    def test_poisson_matrix_as_cross_product(self):
        model = make_rigid_body()
        x, v = np.array([0.3, -1.2, 2.0]), np.array([1.0, 0.5, -0.7])
        assert_allclose(model.poisson(x) @ v, np.cross(x, v), atol=1e-15)

    def test_rejects_too_many_noise_columns(self):
        with pytest.raises(ValueError, match="at most 3"):
            make_rigid_body(np.ones((3, 4)))

    def test_rejects_wrong_row_count(self):
        with pytest.raises(ValueError):
            make_rigid_body(np.ones((2, 1)))


@pytest.mark.parametrize("factory", ALL_MODELS)
def test_poisson_matrix_is_skew(factory):
    model = factory()
    x = random_states(model, 1000, seed=1)
    b = model.poisson(x)
    assert np.max(np.abs(b + np.swapaxes(b, -1, -2))) <= 1e-14


@pytest.mark.parametrize("factory", ALL_MODELS)
def test_discrete_gradient_identity(factory):
    model = factory()
    y1 = random_states(model, 1000, seed=2)
    y2 = random_states(model, 1000, seed=3)
    dg = model.discrete_gradient(y1, y2)
    lhs = np.sum(dg * (y2 - y1), axis=-1)
    rhs = model.hamiltonian(y2) - model.hamiltonian(y1)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


@pytest.mark.parametrize("factory", ALL_MODELS)
def test_discrete_gradient_diagonal_is_gradient(factory):
    model = factory()
    y = random_states(model, 1000, seed=4)
    assert np.max(np.abs(model.discrete_gradient(y, y) - model.grad_h(y))) <= 1e-12


@pytest.mark.parametrize("factory", ALL_MODELS)
def test_noise_block_hessian_is_constant(factory):
    model = factory()
    sigma = model.noise.sigma_full
    for x in random_states(model, 100, seed=5):
        hess = fd_hessian(model.grad_h, x)
        assert_allclose(sigma.T @ hess @ sigma, model.noise.noise_block_hessian, atol=1e-6)


def test_separable_block_is_sigma_gram():
    for factory in (make_oscillator, make_pendulum):
        model = factory(0.7)
        assert_array_equal(model.noise.noise_block_hessian, [[0.7 * 0.7]])


def test_casimir_is_orthogonal_to_poisson_matrix():
    model = make_rigid_body()
    x = random_states(model, 1000, seed=6)
    prod = np.einsum("bi,bij->bj", model.casimir.gradient(x), model.poisson(x))
    assert np.max(np.abs(prod)) <= 1e-12


def test_casimir_form_requires_symmetry():
    with pytest.raises(ValueError):
        CasimirForm(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_models_are_immutable():
    model = make_oscillator(1)
    with pytest.raises(Exception):
        model.dim = 3
    with pytest.raises(ValueError):
        model.initial_value[0] = 5.0


def test_noise_kick_sums_columns():
    noise = NoiseModel(np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 0.0]]), np.zeros((2, 2)))
    dw = np.array([[0.5, 0.25], [1.0, -1.0]])
    assert_allclose(noise.kick(dw), dw @ noise.sigma_full.T)


class TestExactOscillatorMoments:
    def test_time_zero(self):
        model = make_oscillator(1)
        mean, second = exact_oscillator_moments(model, [0.3, -0.4], 0.0)
        assert_allclose(mean, [0.3, -0.4])
        assert_allclose(second, [0.09, 0.16])

    def test_half_period(self):
        model = make_oscillator(1)
        mean, second = exact_oscillator_moments(model, [0.0, 1.0], np.pi)
        assert_allclose(mean, [0.0, -1.0], atol=1e-15)
        # mpmath quadrature of cos^2 and 1 + sin^2 over [0, pi]
        assert_allclose(second, [1.5707963267948966, 2.5707963267948966], rtol=1e-14)
        assert 0.5 * second.sum() == pytest.approx(0.5 + 0.5 * np.pi, rel=1e-14)
        assert 0.5 * second.sum() == pytest.approx(predicted_energy(model, 0.5, np.pi), rel=1e-14)

    def test_generic_point(self):
        # scipy expm for the mean and quad on the Ito isometry integrand
        model = make_oscillator(0.4)
        mean, second = exact_oscillator_moments(model, [0.2, -0.7], 1.3)
        assert_allclose(mean, [0.7279905, 0.00546246], atol=1e-8)
        assert_allclose(second, [0.65459022, 0.08340978], atol=1e-8)

    def test_deterministic_case(self):
        model = make_oscillator(0)
        mean, second = exact_oscillator_moments(model, [0.2, -0.7], 2.1)
        assert_array_equal(second, mean**2)

    def test_rejects_other_models(self):
        with pytest.raises(ValueError):
            exact_oscillator_moments(make_pendulum(1), [0.0, 1.0], 1.0)


class TestTracePredictions:
    def test_oscillator_energy_at_100(self):
        assert predicted_energy(make_oscillator(1), 0.5, 100.0) == 50.5

    def test_rigid_body_energy(self):
        model = make_rigid_body([0.25, 0, 0])
        assert predicted_energy(model, RB_H0, 4.0) == pytest.approx(RB_E4, rel=1e-14)

    def test_rigid_body_casimir(self):
        model = make_rigid_body([0.25, 0, 0])
        assert predicted_casimir(model, 0.5, 4.0) == pytest.approx(0.625, rel=1e-15)

    def test_rigid_body_two_dim_noise_slopes(self):
        model = make_rigid_body([[0.25, 0], [0, 0.25], [0, 0]])
        assert predicted_casimir(model, 0.0, 1.0) == pytest.approx(0.0625, rel=1e-15)
        assert predicted_energy(model, 0.0, 1.0) == pytest.approx(RB_2D_ENERGY_SLOPE, rel=1e-14)

    def test_time_zero_returns_initial(self):
        model = make_pendulum(1)
        assert predicted_energy(model, 0.123, 0.0) == 0.123

    def test_zero_noise_casimir_constant(self):
        model = make_rigid_body(np.zeros((3, 1)))
        assert_array_equal(predicted_casimir(model, 0.5, np.array([0.0, 1.0, 10.0])), 0.5)

    def test_casimir_requires_casimir(self):
        with pytest.raises(ValueError):
            predicted_casimir(make_oscillator(1), 0.5, 1.0)


class TestMakeModel:
    def test_by_id(self):
        assert make_model("pendulum").name == "pendulum"
        assert make_model("rigid_body", 0.1).noise.sigma_full.shape == (3, 1)

    def test_override_initial_value(self):
        assert_array_equal(make_model("oscillator", 1.0, (1.0, 2.0)).initial_value, [1.0, 2.0])

    def test_unknown_id(self):
        with pytest.raises(ValueError, match="unknown model"):
            make_model("duffing")
