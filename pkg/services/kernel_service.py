"""
Kernel Service Module - nonlocal weight functions
Piecewise polynomial kernels on [0, eta] and their exact per-cell weights.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import Polynomial

logger = logging.getLogger(__name__)

MAX_DEGREE = 3
# slack for floor(eta/dx) when eta is a multiple of dx up to rounding
FLOOR_SLACK = 1e-9


class KernelError(ValueError):
    """Raised for invalid kernels or kernels the grid cannot resolve."""


@dataclass(frozen=True)
class KernelPiece:
    """gamma(x) = sum_i coeffs[i] * x**i on [start, end)."""
    start: float
    end: float
    coeffs: Tuple[float, ...]

    def polynomial(self) -> Polynomial:
        return Polynomial(self.coeffs)


@dataclass(frozen=True)
class Kernel:
    pieces: Tuple[KernelPiece, ...]
    name: str = "piecewise"

    @property
    def support_end(self) -> float:
        return self.pieces[-1].end

    @property
    def is_monotone(self) -> bool:
        ok, _ = check_monotone(self)
        return ok


@dataclass(frozen=True)
class WeightVector:
    gamma: np.ndarray
    n_eta: int
    dx: float

    @property
    def gamma_0(self) -> float:
        return float(self.gamma[0])

    @property
    def total(self) -> float:
        return math.fsum(self.gamma)


def validate_kernel(pieces: Sequence[KernelPiece]) -> Tuple[bool, str]:
    """
    Check the structural invariants of a kernel.

    Returns:
        tuple: (ok, message)
    """
    if not pieces:
        return False, "Kernel needs at least one piece."
    if pieces[0].start != 0.0:
        return False, "Kernel support must start at 0."
    for i, piece in enumerate(pieces):
        if not (math.isfinite(piece.start) and math.isfinite(piece.end)):
            return False, "Kernel support must be finite (non-compact kernels are not supported)."
        if piece.end <= piece.start:
            return False, f"Piece {i} has an empty interval [{piece.start}, {piece.end})."
        if not piece.coeffs or len(piece.coeffs) > MAX_DEGREE + 1:
            return False, f"Piece {i} must have a polynomial of degree <= {MAX_DEGREE}."
        if not all(math.isfinite(c) for c in piece.coeffs):
            return False, f"Piece {i} has non-finite coefficients."
        if i > 0 and piece.start != pieces[i - 1].end:
            return False, f"Piece {i} does not start where piece {i - 1} ends."

    # gamma >= 0 at endpoints and interior extrema
    for i, piece in enumerate(pieces):
        poly = piece.polynomial()
        values = poly(_candidates(poly, piece.start, piece.end))
        if np.min(values) < -1e-14:
            return False, f"Kernel is negative on piece {i}."
    return True, "ok"


def check_monotone(kernel: Kernel) -> Tuple[bool, str]:
    """Non-increasing within every piece and at every breakpoint."""
    for i, piece in enumerate(kernel.pieces):
        slope = piece.polynomial().deriv()
        if np.max(slope(_candidates(slope, piece.start, piece.end))) > 1e-14:
            return False, f"Kernel increases inside piece {i}."
        if i > 0:
            left = kernel.pieces[i - 1].polynomial()(piece.start)
            right = piece.polynomial()(piece.start)
            if right > left + 1e-14:
                return False, f"Kernel jumps upward at x={piece.start:g}."
    return True, "ok"


def make_kernel(pieces: Sequence[KernelPiece], name: str = "piecewise") -> Kernel:
    ok, message = validate_kernel(pieces)
    if not ok:
        raise KernelError(message)
    kernel = Kernel(tuple(pieces), name)
    monotone, reason = check_monotone(kernel)
    if not monotone:
        logger.debug("kernel %s is not monotone: %s", name, reason)
    return kernel


def linear_decreasing(eta: float) -> Kernel:
    """gamma(x) = 2(eta - x)/eta^2 on [0, eta], unit mass."""
    _check_eta(eta)
    eta = float(eta)
    piece = KernelPiece(0.0, eta, (2.0 / eta, -2.0 / (eta * eta)))
    return make_kernel([piece], name="linear_decreasing")


def constant(eta: float) -> Kernel:
    """gamma(x) = 1/eta on [0, eta]."""
    _check_eta(eta)
    eta = float(eta)
    return make_kernel([KernelPiece(0.0, eta, (1.0 / eta,))], name="constant")


def piecewise(pieces: Sequence[Tuple[float, float, Sequence[float]]]) -> Kernel:
    """Build from (start, end, coefficients) triples, coefficients in ascending powers of x."""
    built = [KernelPiece(float(a), float(b), tuple(float(c) for c in coeffs)) for a, b, coeffs in pieces]
    return make_kernel(built, name="piecewise")


def antiderivative(kernel: Kernel, x: float) -> float:
    """Closed-form G(x) = integral of gamma over [0, x]; constant past the support."""
    total = 0.0
    for piece in kernel.pieces:
        if x <= piece.start:
            break
        upper = min(x, piece.end)
        prim = piece.polynomial().integ()
        total += prim(upper) - prim(piece.start)
    return total


def total_integral(kernel: Kernel) -> float:
    return antiderivative(kernel, kernel.support_end)


def n_eta_for(eta: float, dx: float) -> int:
    """N_eta = floor(eta/dx)."""
    return int(math.floor(eta / dx + FLOOR_SLACK))


def weights(kernel: Kernel, dx: float, eta: Optional[float] = None) -> WeightVector:
    """
    Exact cell weights gamma_k = integral of gamma over [k dx, (k+1) dx].

    Cells straddling a breakpoint are integrated piece by piece through the
    cumulative antiderivative; a tail shorter than dx is dropped.

    Raises:
        KernelError: dx not positive, eta outside the support, or N_eta = 0.
    """
    if not (math.isfinite(dx) and dx > 0):
        raise KernelError("Grid step dx must be positive.")
    eta = truncation_eta(kernel, dx) if eta is None else float(eta)
    if eta > kernel.support_end:
        raise KernelError(f"eta={eta:g} exceeds the kernel support {kernel.support_end:g}.")
    n_eta = n_eta_for(eta, dx)
    if n_eta < 1:
        raise KernelError(f"kernel unresolved by grid: dx={dx:g} > eta={eta:g} gives N_eta = 0.")

    # faces clipped to the support; rounding may push the last one past it
    faces = np.minimum(np.arange(n_eta + 1) * dx, kernel.support_end)
    cumulative = np.array([antiderivative(kernel, x) for x in faces])
    gamma = np.diff(cumulative)
    logger.debug("kernel %s: N_eta=%d gamma_0=%.17g", kernel.name, n_eta, gamma[0])
    return WeightVector(gamma=gamma, n_eta=n_eta, dx=float(dx))


def truncation_eta(kernel: Kernel, dx: float) -> float:
    """Compact kernels are truncated at the end of their support."""
    return kernel.support_end


def to_config(kernel: Kernel) -> dict:
    if kernel.name in ("linear_decreasing", "constant"):
        return {"kind": kernel.name, "eta": kernel.support_end}
    return {
        "kind": "piecewise",
        "pieces": [[p.start, p.end, list(p.coeffs)] for p in kernel.pieces],
    }


def _candidates(poly: Polynomial, lo: float, hi: float) -> List[float]:
    points = [lo, hi]
    if poly.degree() >= 2:
        for root in poly.deriv().roots():
            if abs(root.imag) < 1e-14 and lo < root.real < hi:
                points.append(float(root.real))
    return points


def _check_eta(eta: float) -> None:
    if not isinstance(eta, (int, float)) or not math.isfinite(eta) or eta <= 0:
        raise KernelError(f"eta must be positive, got {eta}.")
