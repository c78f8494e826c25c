"""
Grid Service Module - uniform mesh, initial data and cell states
Projects the initial density onto cell averages and extends the state by
constant ghost values beyond both ends of the domain.
"""
import logging
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial.legendre import leggauss

logger = logging.getLogger(__name__)

# (x_max - x_min)/dx must be an integer up to this relative tolerance
ALIGN_TOL = 1e-9
GAUSS_POINTS = 5
# disturbances this large next to a boundary mean the ghosts are no longer valid
BOUNDARY_TV_TOL = 1e-10


class GridError(ValueError):
    """Raised for invalid meshes or initial data."""


@dataclass(frozen=True)
class Grid1D:
    x_min: float
    x_max: float
    dx: float
    n_cells: int

    @property
    def centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.n_cells) + 0.5) * self.dx

    @property
    def faces(self) -> np.ndarray:
        return self.x_min + np.arange(self.n_cells + 1) * self.dx


@dataclass(frozen=True)
class PiecewiseConstantDatum:
    """
    values[0] holds left of breakpoints[0], values[-1] right of breakpoints[-1].
    """
    breakpoints: Tuple[float, ...]
    values: Tuple[float, ...]

    @property
    def left_value(self) -> float:
        return self.values[0]

    @property
    def right_value(self) -> float:
        return self.values[-1]


@dataclass(frozen=True)
class SmoothDatum:
    """
    Named smooth profiles that can be written to and read from config files.

    smooth_bump: base + amplitude * exp(-((x - center)/width)^2)
    sigmoid:     left + (right - left) / (1 + exp(-(x - center)/width))
    """
    profile: str
    params: Tuple[Tuple[str, float], ...]

    def param(self, key: str) -> float:
        return dict(self.params)[key]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        p = dict(self.params)
        if self.profile == "smooth_bump":
            return p["base"] + p["amplitude"] * np.exp(-(((x - p["center"]) / p["width"]) ** 2))
        if self.profile == "sigmoid":
            return p["left"] + (p["right"] - p["left"]) / (1.0 + np.exp(-(x - p["center"]) / p["width"]))
        raise GridError(f"Unknown smooth profile '{self.profile}'.")


@dataclass(frozen=True)
class CallableDatum:
    """Arbitrary density function; tails default to its values at the domain ends."""
    func: Callable = field(compare=False)
    left_value: Optional[float] = None
    right_value: Optional[float] = None


InitialDatum = Union[PiecewiseConstantDatum, SmoothDatum, CallableDatum]


@dataclass
class State:
    interior: np.ndarray
    ghost_left: float
    ghost_right: float
    time: float = 0.0

    @property
    def n_cells(self) -> int:
        return int(self.interior.shape[0])

    def copy(self) -> "State":
        return State(self.interior.copy(), self.ghost_left, self.ghost_right, self.time)


# ---------------------------------------------------------------- grid

def validate_grid(x_min: float, x_max: float, dx: float) -> Tuple[bool, str]:
    """
    Guard chain for a uniform mesh.

    Returns:
        tuple: (ok, message)
    """
    if not all(math.isfinite(v) for v in (x_min, x_max, dx)):
        return False, "Domain bounds and dx must be finite."
    if x_max <= x_min:
        return False, "x_max must be greater than x_min."
    if dx <= 0:
        return False, "dx must be positive."
    ratio = (x_max - x_min) / dx
    if round(ratio) < 1:
        return False, "dx is larger than the domain."
    if abs(ratio - round(ratio)) > ALIGN_TOL * ratio:
        return False, f"Domain length {x_max - x_min:g} is not an integer multiple of dx={dx:g}."
    return True, "ok"


def make_grid(x_min: float, x_max: float, dx: float) -> Grid1D:
    ok, message = validate_grid(x_min, x_max, dx)
    if not ok:
        raise GridError(message)
    n_cells = int(round((x_max - x_min) / dx))
    return Grid1D(float(x_min), float(x_max), float(dx), n_cells)


# ---------------------------------------------------------------- initial data

def piecewise_constant(breakpoints: Sequence[float], values: Sequence[float]) -> PiecewiseConstantDatum:
    datum = PiecewiseConstantDatum(tuple(float(b) for b in breakpoints), tuple(float(v) for v in values))
    ok, message = validate_datum(datum)
    if not ok:
        raise GridError(message)
    return datum


def constant_datum(value: float) -> PiecewiseConstantDatum:
    return piecewise_constant([], [value])


def smooth_bump(base: float = 0.25, amplitude: float = 0.5, center: float = 0.0, width: float = 0.25) -> SmoothDatum:
    datum = SmoothDatum("smooth_bump", (("base", float(base)), ("amplitude", float(amplitude)),
                                        ("center", float(center)), ("width", float(width))))
    ok, message = validate_datum(datum)
    if not ok:
        raise GridError(message)
    return datum


def sigmoid(left: float = 0.25, right: float = 0.75, center: float = 0.0, width: float = 0.1) -> SmoothDatum:
    datum = SmoothDatum("sigmoid", (("left", float(left)), ("right", float(right)),
                                    ("center", float(center)), ("width", float(width))))
    ok, message = validate_datum(datum)
    if not ok:
        raise GridError(message)
    return datum


def validate_datum(datum: InitialDatum) -> Tuple[bool, str]:
    """
    Structural checks that do not need a grid.

    Returns:
        tuple: (ok, message)
    """
    if isinstance(datum, PiecewiseConstantDatum):
        if len(datum.values) != len(datum.breakpoints) + 1:
            return False, "Piecewise datum needs exactly one more value than breakpoints."
        if any(b2 <= b1 for b1, b2 in zip(datum.breakpoints, datum.breakpoints[1:])):
            return False, "Breakpoints must be strictly increasing."
        if not all(math.isfinite(v) for v in datum.values + datum.breakpoints):
            return False, "Piecewise datum must be finite."
        if min(datum.values) < 0:
            return False, "Initial density must be nonnegative."
        return True, "ok"
    if isinstance(datum, SmoothDatum):
        if datum.profile not in ("smooth_bump", "sigmoid"):
            return False, f"Unknown smooth profile '{datum.profile}'."
        p = dict(datum.params)
        if p.get("width", 0.0) <= 0:
            return False, "Smooth profile width must be positive."
        if datum.profile == "smooth_bump" and (p["base"] < 0 or p["base"] + p["amplitude"] < 0):
            return False, "Initial density must be nonnegative."
        if datum.profile == "sigmoid" and min(p["left"], p["right"]) < 0:
            return False, "Initial density must be nonnegative."
        return True, "ok"
    if isinstance(datum, CallableDatum):
        if not callable(datum.func):
            return False, "Callable datum needs a function of x."
        return True, "ok"
    return False, f"Unsupported initial datum {type(datum).__name__}."


def tail_values(datum: InitialDatum, grid: Grid1D) -> Tuple[float, float]:
    """Far-field densities used for both ghost extensions."""
    if isinstance(datum, PiecewiseConstantDatum):
        return datum.left_value, datum.right_value
    if isinstance(datum, CallableDatum):
        left = datum.left_value if datum.left_value is not None else float(datum.func(grid.x_min))
        right = datum.right_value if datum.right_value is not None else float(datum.func(grid.x_max))
        return left, right
    return float(datum(grid.x_min)), float(datum(grid.x_max))


def project_initial(datum: InitialDatum, grid: Grid1D) -> State:
    """
    Cell averages q_j^0 = (1/dx) * integral of q0 over cell j.

    Exact for piecewise constant data; 5-point Gauss-Legendre per cell otherwise.

    Raises:
        GridError: invalid datum, or a function returning negative/non-finite values.
    """
    ok, message = validate_datum(datum)
    if not ok:
        raise GridError(message)
    if isinstance(datum, PiecewiseConstantDatum):
        interior = _average_piecewise(datum, grid)
    else:
        func = datum.func if isinstance(datum, CallableDatum) else datum
        interior = _average_gauss(func, grid)
    left, right = tail_values(datum, grid)
    if not (math.isfinite(left) and math.isfinite(right)) or min(left, right) < 0:
        raise GridError("Initial density tails must be finite and nonnegative.")
    logger.debug("projected initial datum onto %d cells", grid.n_cells)
    return State(interior, float(left), float(right), 0.0)


def extend(state: State, index: int) -> float:
    """Cell value with constant ghost extension on both sides."""
    if index < 0:
        return state.ghost_left
    if index >= state.n_cells:
        return state.ghost_right
    return float(state.interior[index])


def extended_array(state: State, n_right: int, n_left: int = 0) -> np.ndarray:
    """Interior padded with n_left left ghosts and n_right right ghosts."""
    return np.concatenate((
        np.full(n_left, state.ghost_left),
        state.interior,
        np.full(n_right, state.ghost_right),
    ))


def boundary_variation(state: State) -> float:
    """Variation over the two cells next to each boundary, ghost jumps included."""
    q = state.interior
    left = abs(q[0] - state.ghost_left) + (abs(q[1] - q[0]) if q.size > 1 else 0.0)
    right = abs(state.ghost_right - q[-1]) + (abs(q[-1] - q[-2]) if q.size > 1 else 0.0)
    return float(left + right)


def _average_piecewise(datum: PiecewiseConstantDatum, grid: Grid1D) -> np.ndarray:
    faces = grid.faces
    out = np.empty(grid.n_cells)
    breaks = datum.breakpoints
    for j in range(grid.n_cells):
        a, b = faces[j], faces[j + 1]
        first = bisect_right(breaks, a)
        last = bisect_right(breaks, b)
        if first == last or (last == first + 1 and breaks[first] == b):
            # cell lies in a single constant region
            out[j] = datum.values[first]
            continue
        area = 0.0
        left = a
        for i in range(first, last):
            area += datum.values[i] * (breaks[i] - left)
            left = breaks[i]
        area += datum.values[last] * (b - left)
        out[j] = area / (b - a)
    return out


def _average_gauss(func: Callable, grid: Grid1D) -> np.ndarray:
    nodes, wts = leggauss(GAUSS_POINTS)
    centers = grid.centers
    half = 0.5 * grid.dx
    x = centers[:, None] + half * nodes[None, :]
    values = np.asarray(func(x), dtype=float)
    if values.shape != x.shape:
        values = np.vectorize(lambda s: float(func(s)))(x)
    if not np.all(np.isfinite(values)):
        raise GridError("Initial density function returned non-finite values.")
    if np.min(values) < 0:
        raise GridError("Initial density function returned negative values.")
    return 0.5 * values @ wts
