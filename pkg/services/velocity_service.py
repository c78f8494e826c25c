"""
Velocity Service Module - velocity and transformation functions
Holds the V1, V2 (and inner v) models of the nonlocal flux and the
interval bounds the CFL condition needs.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np
from numpy.polynomial import Polynomial

logger = logging.getLogger(__name__)

# Dense sampling used for models without a closed form
SAMPLE_POINTS = 1025
SAMPLE_INFLATION = 1.01
DEFAULT_WORKING_INTERVAL = (0.0, 1.0)


class VelocityError(ValueError):
    """Raised for invalid models or failed evaluations."""


class ModelKind(str, Enum):
    IDENTITY = "identity"
    GREENSHIELDS_SQUARED = "greenshields_squared"
    QUADRATIC_FREE = "quadratic_free"
    ESTIMATION = "estimation"
    PREFERENCE = "preference"
    CUSTOM = "custom"


class Monotonicity(str, Enum):
    NON_INCREASING = "non_increasing"
    NON_DECREASING = "non_decreasing"
    UNKNOWN = "unknown"


class Curvature(str, Enum):
    NON_POSITIVE = "non_positive"
    NON_NEGATIVE = "non_negative"
    ZERO = "zero"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class VelocityModel:
    """
    A scalar function of the density with derivative access.

    params holds the family parameters: eps for ESTIMATION,
    (alpha, q_max, v_max) for PREFERENCE. Custom models carry their callables.
    """
    kind: ModelKind
    params: Tuple[float, ...] = ()
    inner: Optional["VelocityModel"] = None
    monotonicity: Monotonicity = Monotonicity.UNKNOWN
    second_derivative_sign: Curvature = Curvature.UNKNOWN
    working_interval: Tuple[float, float] = DEFAULT_WORKING_INTERVAL
    func: Optional[Callable] = field(default=None, compare=False, repr=False)
    deriv: Optional[Callable] = field(default=None, compare=False, repr=False)
    name: str = ""


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    approximate: bool = False

    def as_tuple(self) -> Tuple[float, float]:
        return self.lo, self.hi


# ---------------------------------------------------------------- factories

def identity() -> VelocityModel:
    return _checked(VelocityModel(
        kind=ModelKind.IDENTITY,
        monotonicity=Monotonicity.NON_DECREASING,
        second_derivative_sign=Curvature.ZERO,
        name="identity",
    ))


def greenshields_squared() -> VelocityModel:
    """V(q) = 1 - q^2."""
    return _checked(VelocityModel(
        kind=ModelKind.GREENSHIELDS_SQUARED,
        monotonicity=Monotonicity.NON_INCREASING,
        second_derivative_sign=Curvature.NON_POSITIVE,
        name="greenshields_squared",
    ))


def quadratic_free() -> VelocityModel:
    """V(q) = (1 - q)^2."""
    return _checked(VelocityModel(
        kind=ModelKind.QUADRATIC_FREE,
        monotonicity=Monotonicity.NON_INCREASING,
        second_derivative_sign=Curvature.NON_NEGATIVE,
        name="quadratic_free",
    ))


def estimation(eps: float) -> VelocityModel:
    """
    Estimated density V(q) = q + eps*q*(1-q).

    eps < 0 underestimates, eps > 0 overestimates, eps = 0 is exact knowledge
    of the density (the plain nonlocal-in-density baseline).
    """
    if not _finite(eps) or eps < -1.0 or eps > 1.0:
        raise VelocityError(f"Estimation eps must lie in [-1, 1], got {eps}.")
    eps = float(eps)
    if eps == 0.0:
        curvature = Curvature.ZERO
    else:
        curvature = Curvature.NON_POSITIVE if eps > 0 else Curvature.NON_NEGATIVE
    return _checked(VelocityModel(
        kind=ModelKind.ESTIMATION,
        params=(eps,),
        monotonicity=Monotonicity.NON_DECREASING,
        second_derivative_sign=curvature,
        name=f"estimation(eps={eps:g})",
    ))


def preference(alpha: float, q_max: float = 1.0, v_max: float = 1.0,
               inner: Optional[VelocityModel] = None) -> VelocityModel:
    """
    Mixture of relative density and relative velocity:
    V(q) = alpha*q/q_max + (1-alpha)*(1 - v(q)/v_max).

    alpha = 1 averages pure density, alpha = 0 pure velocity.
    """
    if not _finite(alpha) or alpha < 0.0 or alpha > 1.0:
        raise VelocityError(f"Preference alpha must lie in [0, 1], got {alpha}.")
    if not _finite(q_max) or q_max <= 0:
        raise VelocityError("Preference q_max must be positive.")
    if not _finite(v_max) or v_max <= 0:
        raise VelocityError("Preference v_max must be positive.")
    inner = inner if inner is not None else greenshields_squared()

    # v decreasing makes the whole mixture increasing
    if inner.monotonicity == Monotonicity.NON_INCREASING:
        mono = Monotonicity.NON_DECREASING
    else:
        mono = Monotonicity.UNKNOWN
    return _checked(VelocityModel(
        kind=ModelKind.PREFERENCE,
        params=(float(alpha), float(q_max), float(v_max)),
        inner=inner,
        monotonicity=mono,
        second_derivative_sign=_preference_curvature(alpha, inner),
        working_interval=inner.working_interval,
        name=f"preference(alpha={alpha:g})",
    ))


def custom(func: Callable, deriv: Optional[Callable] = None,
           monotonicity: Monotonicity = Monotonicity.UNKNOWN,
           second_derivative_sign: Curvature = Curvature.UNKNOWN,
           working_interval: Tuple[float, float] = DEFAULT_WORKING_INTERVAL,
           name: str = "custom") -> VelocityModel:
    """Wrap a user callable; the declared monotonicity is verified by sampling."""
    if not callable(func):
        raise VelocityError("Custom model needs a callable.")
    return _checked(VelocityModel(
        kind=ModelKind.CUSTOM,
        monotonicity=monotonicity,
        second_derivative_sign=second_derivative_sign,
        working_interval=(float(working_interval[0]), float(working_interval[1])),
        func=func,
        deriv=deriv,
        name=name,
    ))


def constant_velocity(value: float) -> VelocityModel:
    """Constant V, mostly useful to exercise the degenerate CFL path."""
    value = float(value)
    return custom(
        lambda q: np.full_like(np.asarray(q, dtype=float), value),
        lambda q: np.zeros_like(np.asarray(q, dtype=float)),
        monotonicity=Monotonicity.NON_INCREASING,
        second_derivative_sign=Curvature.ZERO,
        name=f"constant({value:g})",
    )


# ---------------------------------------------------------------- evaluation

def evaluate(model: VelocityModel, q):
    """
    Evaluate the model at q (scalar or array).

    Raises:
        VelocityError: q not finite, or a custom callable returned a non-finite value.
    """
    q_arr = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q_arr)):
        raise VelocityError(f"Cannot evaluate {model.name} at non-finite q={q}.")
    poly = as_polynomial(model)
    if poly is not None:
        out = poly(q_arr)
    elif model.kind == ModelKind.PREFERENCE:
        alpha, q_max, v_max = model.params
        out = alpha * q_arr / q_max + (1.0 - alpha) * (1.0 - evaluate(model.inner, q_arr) / v_max)
    else:
        out = np.asarray(model.func(q_arr), dtype=float)
        if not np.all(np.isfinite(out)):
            q_b, out_b = np.broadcast_arrays(q_arr, out)
            bad = float(q_b[~np.isfinite(out_b)][0])
            raise VelocityError(f"{model.name} returned a non-finite value at q={bad!r}.")
    return _like_input(q, out)


def derivative(model: VelocityModel, q):
    """
    Closed-form derivative for built-ins, the supplied callable for custom models.

    Raises:
        VelocityError: custom model without a derivative callable.
    """
    q_arr = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q_arr)):
        raise VelocityError(f"Cannot differentiate {model.name} at non-finite q={q}.")
    poly = as_polynomial(model)
    if poly is not None:
        out = poly.deriv()(q_arr)
    elif model.kind == ModelKind.PREFERENCE:
        alpha, q_max, v_max = model.params
        out = alpha / q_max - (1.0 - alpha) * derivative(model.inner, q_arr) / v_max
    else:
        if model.deriv is None:
            raise VelocityError(f"{model.name} has no derivative; this operation is unsupported.")
        out = np.asarray(model.deriv(q_arr), dtype=float)
        if not np.all(np.isfinite(out)):
            raise VelocityError(f"{model.name} derivative is not finite near q={np.ravel(q_arr)[0]!r}.")
    return _like_input(q, out)


def as_polynomial(model: VelocityModel) -> Optional[Polynomial]:
    """Exact polynomial form of a built-in model, None for anything sampled."""
    kind = model.kind
    if kind == ModelKind.IDENTITY:
        return Polynomial([0.0, 1.0])
    if kind == ModelKind.GREENSHIELDS_SQUARED:
        return Polynomial([1.0, 0.0, -1.0])
    if kind == ModelKind.QUADRATIC_FREE:
        return Polynomial([1.0, -2.0, 1.0])
    if kind == ModelKind.ESTIMATION:
        eps = model.params[0]
        return Polynomial([0.0, 1.0 + eps, -eps])
    if kind == ModelKind.PREFERENCE:
        inner = as_polynomial(model.inner)
        if inner is None:
            return None
        alpha, q_max, v_max = model.params
        return Polynomial([0.0, alpha / q_max]) + (1.0 - alpha) * (1.0 - inner / v_max)
    return None


# ---------------------------------------------------------------- bounds

def image_interval(model: VelocityModel, lo: float, hi: float) -> Interval:
    """
    Image of [lo, hi] under the model.

    Exact for polynomial models (endpoints plus interior critical points);
    custom models fall back to the sampled range and are flagged approximate.
    """
    lo, hi = _check_interval(lo, hi)
    poly = as_polynomial(model)
    if poly is not None:
        values = poly(_critical_candidates(poly, lo, hi))
        return Interval(float(np.min(values)), float(np.max(values)))
    if model.monotonicity in (Monotonicity.NON_INCREASING, Monotonicity.NON_DECREASING):
        ends = sorted((float(evaluate(model, lo)), float(evaluate(model, hi))))
        return Interval(ends[0], ends[1])
    values = evaluate(model, np.linspace(lo, hi, SAMPLE_POINTS))
    return Interval(float(np.min(values)), float(np.max(values)), approximate=True)


def sup_abs_value(model: VelocityModel, lo: float, hi: float) -> float:
    """sup |V| over [lo, hi]."""
    lo, hi = _check_interval(lo, hi)
    poly = as_polynomial(model)
    if poly is not None:
        return float(np.max(np.abs(poly(_critical_candidates(poly, lo, hi)))))
    values = evaluate(model, np.linspace(lo, hi, SAMPLE_POINTS))
    return float(np.max(np.abs(values))) * SAMPLE_INFLATION


def sup_abs_derivative(model: VelocityModel, lo: float, hi: float) -> float:
    """sup |V'| over [lo, hi]."""
    lo, hi = _check_interval(lo, hi)
    poly = as_polynomial(model)
    if poly is not None:
        slope = poly.deriv()
        return float(np.max(np.abs(slope(_critical_candidates(slope, lo, hi)))))
    values = derivative(model, np.linspace(lo, hi, SAMPLE_POINTS))
    return float(np.max(np.abs(values))) * SAMPLE_INFLATION


def sign_condition(v1: VelocityModel, v2: VelocityModel, lo: float, hi: float) -> Tuple[bool, str]:
    """
    Decide (V1' <= 0 and V2' >= 0) or (V1' >= 0 and V2' <= 0) on [lo, hi] by sampling.

    Returns:
        tuple: (holds, branch description or reason)
    """
    lo, hi = _check_interval(lo, hi)
    q = np.linspace(lo, hi, SAMPLE_POINTS)
    try:
        d1 = np.asarray(derivative(v1, q))
        d2 = np.asarray(derivative(v2, q))
    except VelocityError as exc:
        return False, str(exc)
    if np.all(d1 <= 0) and np.all(d2 >= 0):
        return True, "V1 decreasing / V2 increasing"
    if np.all(d1 >= 0) and np.all(d2 <= 0):
        return True, "V1 increasing / V2 decreasing"
    return False, f"sign condition fails for V1={v1.name}, V2={v2.name} on [{lo:g}, {hi:g}]"


def curvature_protects(sign: Curvature, increasing: bool) -> bool:
    """
    True when the declared curvature of V1 keeps monotone data monotone:
    V1'' <= 0 protects increasing data, V1'' >= 0 decreasing data.
    """
    if sign == Curvature.ZERO:
        return True
    if increasing:
        return sign == Curvature.NON_POSITIVE
    return sign == Curvature.NON_NEGATIVE


# ---------------------------------------------------------------- helpers

def _checked(model: VelocityModel) -> VelocityModel:
    # declared sign metadata must match samples on the working interval
    lo, hi = model.working_interval
    q = np.linspace(lo, hi, SAMPLE_POINTS)
    if model.monotonicity != Monotonicity.UNKNOWN:
        try:
            slope = np.asarray(derivative(model, q))
        except VelocityError:
            slope = np.diff(evaluate(model, q))
        if model.monotonicity == Monotonicity.NON_DECREASING and np.any(slope < 0):
            raise VelocityError(f"{model.name} is declared non-decreasing but decreases on [{lo:g}, {hi:g}].")
        if model.monotonicity == Monotonicity.NON_INCREASING and np.any(slope > 0):
            raise VelocityError(f"{model.name} is declared non-increasing but increases on [{lo:g}, {hi:g}].")
    poly = as_polynomial(model)
    if poly is not None:
        curv = poly.deriv(2) if poly.degree() >= 2 else Polynomial([0.0])
        c = curv(q)
        sign = model.second_derivative_sign
        if sign == Curvature.NON_POSITIVE and np.any(c > 0):
            raise VelocityError(f"{model.name} is declared concave but V'' > 0 somewhere.")
        if sign == Curvature.NON_NEGATIVE and np.any(c < 0):
            raise VelocityError(f"{model.name} is declared convex but V'' < 0 somewhere.")
    logger.debug("built velocity model %s", model.name)
    return model


def _preference_curvature(alpha: float, inner: VelocityModel) -> Curvature:
    if alpha == 1.0 or inner.second_derivative_sign == Curvature.ZERO:
        return Curvature.ZERO
    # V'' = -(1-alpha) v''
    flipped = {
        Curvature.NON_POSITIVE: Curvature.NON_NEGATIVE,
        Curvature.NON_NEGATIVE: Curvature.NON_POSITIVE,
    }
    return flipped.get(inner.second_derivative_sign, Curvature.UNKNOWN)


def _critical_candidates(poly: Polynomial, lo: float, hi: float) -> np.ndarray:
    points = [lo, hi]
    if poly.degree() >= 2:
        for root in poly.deriv().roots():
            if abs(root.imag) < 1e-14 and lo < root.real < hi:
                points.append(float(root.real))
    return np.asarray(points, dtype=float)


def _check_interval(lo: float, hi: float) -> Tuple[float, float]:
    if not (_finite(lo) and _finite(hi)):
        raise VelocityError(f"Interval bounds must be finite, got [{lo}, {hi}].")
    if lo > hi:
        raise VelocityError(f"Interval lower bound {lo} exceeds upper bound {hi}.")
    return float(lo), float(hi)


def _finite(value) -> bool:
    try:
        return math.isfinite(float(value))
    except (TypeError, ValueError):
        return False


def _like_input(q, out):
    if np.ndim(q) == 0:
        return float(np.asarray(out).reshape(()))
    return np.asarray(out, dtype=float)
