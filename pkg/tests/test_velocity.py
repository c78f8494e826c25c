import numpy as np
import pytest

from services import velocity_service as vel
from services.velocity_service import Curvature, Monotonicity, VelocityError


@pytest.mark.parametrize("model, q, expected", [
    (vel.greenshields_squared(), 0.0, 1.0),
    (vel.estimation(0.5), 0.25, 0.34375),
    (vel.preference(0.5, 1.0, 1.0, vel.greenshields_squared()), 0.5, 0.375),
    (vel.quadratic_free(), 0.25, 0.5625),
    (vel.identity(), 0.3, 0.3),
])
def test_evaluate_builtins(model, q, expected):
    """
    Positive, built-in models give the closed-form values.
    """
    assert vel.evaluate(model, q) == pytest.approx(expected, abs=1e-15)


def test_evaluate_keeps_array_shape():
    """
    Positive, arrays in give arrays of the same shape out.
    """
    q = np.array([[0.0, 0.5], [1.0, 0.25]])
    out = vel.evaluate(vel.greenshields_squared(), q)
    assert isinstance(out, np.ndarray)
    assert out.shape == (2, 2)
    assert out[0, 1] == pytest.approx(0.75)


def test_custom_non_finite_names_q():
    """
    Negative, a custom callable returning nan reports the density where it happened.
    """
    model = vel.custom(lambda q: np.where(q > 0.5, np.nan, q), name="broken")
    with pytest.raises(VelocityError) as err:
        vel.evaluate(model, np.array([0.1, 0.75]))
    assert "0.75" in str(err.value)


def test_evaluate_rejects_non_finite_input():
    """
    Negative, q = inf cannot be evaluated.
    """
    with pytest.raises(VelocityError):
        vel.evaluate(vel.identity(), float("inf"))


@pytest.mark.parametrize("model, q, expected", [
    (vel.identity(), 0.7, 1.0),
    (vel.greenshields_squared(), 0.75, -1.5),
    (vel.estimation(-1.0), 0.25, 0.5),
])
def test_derivative_builtins(model, q, expected):
    """
    Positive, closed-form derivatives.
    """
    assert vel.derivative(model, q) == pytest.approx(expected, abs=1e-15)


def test_derivative_of_preference_mixes_inner_slope():
    """
    Positive, V' = alpha/q_max - (1 - alpha) v'/v_max.
    """
    model = vel.preference(0.25)
    # v = 1 - q^2, v'(0.5) = -1
    assert vel.derivative(model, 0.5) == pytest.approx(0.25 + 0.75 * 1.0)


def test_custom_without_derivative_is_unsupported():
    """
    Negative, a custom model without a derivative cannot be differentiated.
    """
    model = vel.custom(lambda q: 1.0 - q, monotonicity=Monotonicity.NON_INCREASING, name="linear")
    with pytest.raises(VelocityError) as err:
        vel.derivative(model, 0.3)
    assert "unsupported" in str(err.value)


@pytest.mark.parametrize("model, lo, hi, expected", [
    (vel.identity(), 0.25, 0.75, 0.75),
    (vel.greenshields_squared(), 0.25, 0.75, 0.9375),
    (vel.quadratic_free(), 0.0, 1.0, 1.0),
])
def test_sup_abs_value(model, lo, hi, expected):
    """
    Positive, sup |V| over the interval.
    """
    assert vel.sup_abs_value(model, lo, hi) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("model, lo, hi, expected", [
    (vel.identity(), -3.0, 5.0, 1.0),
    (vel.greenshields_squared(), 0.25, 0.75, 1.5),
    (vel.estimation(0.5), 0.25, 0.75, 1.25),
])
def test_sup_abs_derivative(model, lo, hi, expected):
    """
    Positive, sup |V'| over the interval.
    """
    assert vel.sup_abs_derivative(model, lo, hi) == pytest.approx(expected, abs=1e-15)


def test_sampled_norms_are_inflated():
    """
    Positive, custom models get a sampled bound that never undershoots.
    """
    model = vel.custom(lambda q: np.sin(3 * q), lambda q: 3 * np.cos(3 * q), name="wave")
    assert vel.sup_abs_value(model, 0.0, 1.0) >= 1.0 * 0.999
    assert vel.sup_abs_derivative(model, 0.0, 1.0) >= 3.0


@pytest.mark.parametrize("model, expected", [
    (vel.identity(), (0.25, 0.75)),
    (vel.estimation(0.5), (0.34375, 0.796875)),
    (vel.greenshields_squared(), (0.4375, 0.9375)),
])
def test_image_interval(model, expected):
    """
    Positive, images of [0.25, 0.75] are exact for the built-ins.
    """
    image = vel.image_interval(model, 0.25, 0.75)
    assert image.as_tuple() == pytest.approx(expected, abs=1e-15)
    assert image.approximate is False


def test_image_interval_catches_interior_extremum():
    """
    Positive, a non-monotone polynomial picks up its interior critical point.
    """
    # 1 - q^2 on [-0.5, 0.5] peaks at q = 0
    image = vel.image_interval(vel.greenshields_squared(), -0.5, 0.5)
    assert image.hi == pytest.approx(1.0)
    assert image.lo == pytest.approx(0.75)


def test_image_interval_custom_unknown_is_approximate():
    """
    Negative-ish, unknown monotonicity falls back to sampling and says so.
    """
    model = vel.custom(lambda q: q * (1 - q), name="hump")
    image = vel.image_interval(model, 0.0, 1.0)
    assert image.approximate is True
    assert image.hi == pytest.approx(0.25)


def test_image_interval_rejects_reversed_bounds():
    """
    Negative, lo > hi.
    """
    with pytest.raises(VelocityError):
        vel.image_interval(vel.identity(), 1.0, 0.0)


@pytest.mark.parametrize("eps", [-1.5, 1.01, float("nan")])
def test_estimation_eps_out_of_range(eps):
    """
    Negative, eps must lie in [-1, 1].
    """
    with pytest.raises(VelocityError):
        vel.estimation(eps)


@pytest.mark.parametrize("alpha", [-0.1, 1.5])
def test_preference_alpha_out_of_range(alpha):
    """
    Negative, alpha must lie in [0, 1].
    """
    with pytest.raises(VelocityError):
        vel.preference(alpha)


def test_estimation_zero_is_identity():
    """
    Positive, eps = 0 is exact knowledge of the density.
    """
    model = vel.estimation(0.0)
    q = np.linspace(0, 1, 11)
    assert np.array_equal(vel.evaluate(model, q), q)
    assert model.second_derivative_sign == Curvature.ZERO


def test_preference_one_is_relative_density():
    """
    Positive, alpha = 1 averages the density itself.
    """
    model = vel.preference(1.0, q_max=2.0)
    assert vel.evaluate(model, 0.5) == pytest.approx(0.25)
    assert model.second_derivative_sign == Curvature.ZERO


@pytest.mark.parametrize("eps, curvature", [
    (0.5, Curvature.NON_POSITIVE),
    (-0.5, Curvature.NON_NEGATIVE),
])
def test_estimation_curvature(eps, curvature):
    """
    Positive, V'' = -2 eps fixes the declared curvature.
    """
    assert vel.estimation(eps).second_derivative_sign == curvature


def test_custom_declared_monotonicity_is_verified():
    """
    Negative, a model declared non-increasing that increases is refused.
    """
    with pytest.raises(VelocityError):
        vel.custom(lambda q: q, lambda q: np.ones_like(q), monotonicity=Monotonicity.NON_INCREASING)


def test_custom_monotonicity_checked_without_derivative():
    """
    Negative, without a derivative the sampled values are used for the check.
    """
    with pytest.raises(VelocityError):
        vel.custom(lambda q: q ** 2, monotonicity=Monotonicity.NON_INCREASING)


def test_sign_condition_preset_models():
    """
    Positive, decreasing V1 with increasing V2 passes and names the branch.
    """
    ok, branch = vel.sign_condition(vel.greenshields_squared(), vel.estimation(0.5), 0.25, 0.75)
    assert ok is True
    assert "V1 decreasing" in branch


def test_sign_condition_increasing_pair_fails():
    """
    Negative, both velocities increasing.
    """
    ok, reason = vel.sign_condition(vel.identity(), vel.identity(), 0.0, 1.0)
    assert ok is False
    assert "fails" in reason


def test_sign_condition_other_branch():
    """
    Positive, increasing V1 with decreasing V2.
    """
    ok, branch = vel.sign_condition(vel.identity(), vel.greenshields_squared(), 0.0, 1.0)
    assert ok is True
    assert branch == "V1 increasing / V2 decreasing"


@pytest.mark.parametrize("model, increasing, expected", [
    (vel.greenshields_squared(), True, True),
    (vel.greenshields_squared(), False, False),
    (vel.quadratic_free(), False, True),
    (vel.quadratic_free(), True, False),
    (vel.identity(), True, True),
])
def test_curvature_protects(model, increasing, expected):
    """
    Positive/negative, concave V1 protects increasing data, convex V1 decreasing data.
    """
    assert vel.curvature_protects(model.second_derivative_sign, increasing) is expected


def test_constant_velocity_has_zero_slope():
    model = vel.constant_velocity(0.7)
    assert vel.evaluate(model, 0.3) == 0.7
    assert vel.sup_abs_derivative(model, 0.0, 1.0) == 0.0


BUILTIN_MODELS = [
    vel.identity(),
    vel.greenshields_squared(),
    vel.quadratic_free(),
    vel.estimation(0.5),
    vel.estimation(-0.5),
    vel.estimation(-1.0),
    vel.preference(0.25, 1.0, 1.0, vel.greenshields_squared()),
    vel.preference(0.75, 1.0, 1.0, vel.greenshields_squared()),
    vel.preference(0.5, 1.0, 1.0, vel.quadratic_free()),
]


@pytest.mark.parametrize("model", BUILTIN_MODELS, ids=lambda m: m.name)
def test_derivative_matches_central_difference(model):
    """
    Positive, the closed-form derivative agrees with a central difference at
    100 random densities, and the difference error shrinks like h^2.
    """
    q = np.random.default_rng(7).uniform(0.0, 1.0, 100)
    exact = np.asarray(vel.derivative(model, q))
    for h in (1e-3, 1e-4):
        fd = (np.asarray(vel.evaluate(model, q + h)) - np.asarray(vel.evaluate(model, q - h))) / (2 * h)
        assert np.max(np.abs(fd - exact)) <= 10.0 * h ** 2
    assert np.max(np.abs(fd - exact)) <= 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_image_of_identity_is_the_interval(seed):
    """
    Positive, Identity maps any interval onto itself exactly.
    """
    lo, hi = np.sort(np.random.default_rng(seed).uniform(-2.0, 3.0, 2))
    image = vel.image_interval(vel.identity(), float(lo), float(hi))
    assert image.as_tuple() == (float(lo), float(hi))
    assert image.approximate is False
