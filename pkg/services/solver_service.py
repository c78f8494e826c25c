"""
Solver Service Module - Godunov-type time stepping
Nonlocal velocities, CFL-limited time step and the conservative update
q_j^{n+1} = q_j^n - lambda (q_j^n V_j^n - q_{j-1}^n V_{j-1}^n).
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from scipy.signal import fftconvolve

from services import velocity_service as vel
from services.grid_service import (
    Grid1D, InitialDatum, State, boundary_variation, extended_array, project_initial,
    BOUNDARY_TV_TOL,
)
from services.diagnostics_service import RunReport, Snapshot, finalize_report, trace_record
from services.kernel_service import Kernel, WeightVector, check_monotone, weights
from services.velocity_service import VelocityModel

logger = logging.getLogger(__name__)

# above this padded length the transform path is not attempted
MAX_TRANSFORM_SIZE = 1 << 26
DEFAULT_COMPARE_TOL = 1e-12
TIME_TOL = 1e-12


class SolverError(ValueError):
    """Raised for invalid configurations or a blown-up step."""

    def __init__(self, message: str, step: Optional[int] = None, cell: Optional[int] = None):
        super().__init__(message)
        self.step = step
        self.cell = cell


class LambdaPolicy(str, Enum):
    CFL = "cfl"
    PRESET = "preset"
    FIXED = "fixed"


class NonlocalPath(str, Enum):
    NAIVE = "naive"
    FAST = "fast"
    BOTH = "both"


@dataclass(frozen=True)
class SolverConfig:
    grid: Grid1D
    kernel: Kernel
    v1: VelocityModel
    v2: VelocityModel
    initial: InitialDatum
    final_time: float
    lambda_policy: LambdaPolicy = LambdaPolicy.CFL
    fixed_lambda: Optional[float] = None
    snapshot_times: Tuple[float, ...] = ()
    nonlocal_path: NonlocalPath = NonlocalPath.NAIVE
    compare_tol: float = DEFAULT_COMPARE_TOL
    diagnostics: bool = True


@dataclass
class NonlocalField:
    """V_j^n for j = 0..n-1 plus the ghost velocity V_{-1}^n feeding cell 0."""
    v_at: np.ndarray
    v_ghost_left: float
    deviation: float = 0.0


@dataclass
class Bounds:
    """Norms entering the CFL condition and the velocity-difference estimate."""
    q_m: float
    q_M: float
    v1_sup: float
    v1_slope: float
    v2_slope: float

    @property
    def lipschitz(self) -> float:
        return self.v1_slope * self.v2_slope


@dataclass
class Prepared:
    """Everything a run needs that is fixed before the first step."""
    config: SolverConfig
    weights: WeightVector
    state: State
    bounds: Bounds
    lam: float
    sign_ok: bool
    sign_branch: str
    warnings: List[str] = field(default_factory=list)


# ---------------------------------------------------------------- setup

def validate_config(config: SolverConfig, wts: WeightVector) -> Tuple[bool, str]:
    """
    Checks that need the grid and the kernel weights together.

    Returns:
        tuple: (ok, message)
    """
    if not math.isfinite(config.final_time) or config.final_time < 0:
        return False, "final_time must be a nonnegative number."
    if config.grid.n_cells < 2 * wts.n_eta:
        return False, f"Grid has {config.grid.n_cells} cells, fewer than 2*N_eta={2 * wts.n_eta}."
    times = list(config.snapshot_times)
    if any(t2 < t1 for t1, t2 in zip(times, times[1:])):
        return False, "snapshot_times must be sorted."
    if any(t < 0 or t > config.final_time + TIME_TOL for t in times):
        return False, "snapshot_times must lie in [0, final_time]."
    if config.lambda_policy == LambdaPolicy.FIXED:
        if config.fixed_lambda is None or not config.fixed_lambda > 0:
            return False, "Fixed lambda policy needs a positive lambda."
    if not config.compare_tol > 0:
        return False, "compare_tol must be positive."
    return True, "ok"


def compute_bounds(config: SolverConfig, state: State, wts: WeightVector) -> Bounds:
    """
    Norms over the initial range [q_m, q_M] (ghosts included) and its image under V2.

    The nonlocal sum lies between total_weight*min V2 and total_weight*max V2, so
    the V1 norms are taken over the hull of that range and the V2 image.
    """
    q = state.interior
    q_m = float(min(np.min(q), state.ghost_left, state.ghost_right))
    q_M = float(max(np.max(q), state.ghost_left, state.ghost_right))
    image = vel.image_interval(config.v2, q_m, q_M)
    total = wts.total
    lo = min(image.lo, total * image.lo)
    hi = max(image.hi, total * image.hi)
    return Bounds(
        q_m=q_m,
        q_M=q_M,
        v1_sup=vel.sup_abs_value(config.v1, lo, hi),
        v1_slope=vel.sup_abs_derivative(config.v1, lo, hi),
        v2_slope=vel.sup_abs_derivative(config.v2, q_m, q_M),
    )


def cfl_bound(bounds: Bounds, gamma_0: float) -> float:
    """Largest lambda allowed by the CFL condition; inf for a zero flux."""
    denominator = gamma_0 * bounds.lipschitz * bounds.q_M + bounds.v1_sup
    if denominator <= 0:
        return math.inf
    return 1.0 / denominator


def cfl_lambda(config: SolverConfig, bounds: Bounds, wts: WeightVector,
               warnings: Optional[List[str]] = None) -> float:
    """
    lambda = dt/dx for the configured policy.

    CFL uses the bound itself, PRESET uses 1/(3 gamma_0 + 1), FIXED the given value.
    A flux that vanishes identically runs with lambda = 1.
    """
    warnings = warnings if warnings is not None else []
    gamma_0 = wts.gamma_0
    if bounds.v1_slope == 0.0:
        _warn(warnings, f"V1={config.v1.name} is constant on the working range; the nonlocal term has no effect.")
    if config.lambda_policy == LambdaPolicy.PRESET:
        return 1.0 / (3.0 * gamma_0 + 1.0)
    if config.lambda_policy == LambdaPolicy.FIXED:
        return float(config.fixed_lambda)
    bound = cfl_bound(bounds, gamma_0)
    if math.isinf(bound):
        _warn(warnings, "Degenerate velocity model: flux is identically zero, running with lambda=1.")
        return 1.0
    return bound


def prepare(config: SolverConfig) -> Prepared:
    """
    Validate a configuration and fix weights, initial state, bounds and lambda.

    Raises:
        SolverError: the configuration or the chosen lambda is invalid.
    """
    warnings: List[str] = []
    wts = weights(config.kernel, config.grid.dx)
    ok, message = validate_config(config, wts)
    if not ok:
        raise SolverError(message)

    monotone, reason = check_monotone(config.kernel)
    if not monotone:
        if config.diagnostics:
            raise SolverError(f"Kernel must be monotonically decreasing for max-principle diagnostics: {reason}")
        _warn(warnings, f"Kernel is not monotonically decreasing ({reason}); the maximum principle is not guaranteed.")

    state = project_initial(config.initial, config.grid)
    bounds = compute_bounds(config, state, wts)
    sign_ok, branch = vel.sign_condition(config.v1, config.v2, bounds.q_m, bounds.q_M)
    if not sign_ok:
        _warn(warnings, f"{branch}; the maximum principle is not guaranteed.")

    lam = cfl_lambda(config, bounds, wts, warnings)
    limit = cfl_bound(bounds, wts.gamma_0)
    if lam > limit * (1.0 + 1e-12):
        raise SolverError(f"lambda={lam:.6g} violates the CFL bound {limit:.6g}.")
    if not lam > 0 or not math.isfinite(lam):
        raise SolverError(f"lambda must be positive and finite, got {lam}.")
    logger.info("lambda=%.6g (%s), gamma_0=%.6g, N_eta=%d, cells=%d",
                lam, config.lambda_policy.value, wts.gamma_0, wts.n_eta, config.grid.n_cells)
    return Prepared(config, wts, state, bounds, lam, sign_ok, branch, warnings)


# ---------------------------------------------------------------- nonlocal term

def nonlocal_field_naive(state: State, wts: WeightVector, v1: VelocityModel, v2: VelocityModel) -> NonlocalField:
    """
    V_j = V1(sum_k gamma_k V2(q_{j+k+1})) for j = -1..n-1.

    Compensated summation in the fixed order k = 0..N_eta-1.
    """
    n, n_eta = state.n_cells, wts.n_eta
    w = np.asarray(vel.evaluate(v2, extended_array(state, n_eta)))
    total = np.zeros(n + 1)
    carry = np.zeros(n + 1)
    for k in range(n_eta):
        y = wts.gamma[k] * w[k:k + n + 1] - carry
        t = total + y
        carry = (t - total) - y
        total = t
    v = np.asarray(vel.evaluate(v1, total))
    return NonlocalField(v_at=v[1:], v_ghost_left=float(v[0]))


def nonlocal_field_fast(state: State, wts: WeightVector, v1: VelocityModel, v2: VelocityModel,
                        warnings: Optional[List[str]] = None) -> NonlocalField:
    """
    Same sum as the naive path through an FFT correlation.

    The right far-field value is split off first so constant stretches
    contribute exactly; oversized transforms fall back to the naive path.
    """
    n, n_eta = state.n_cells, wts.n_eta
    if n + 2 * n_eta > MAX_TRANSFORM_SIZE:
        _warn(warnings if warnings is not None else [],
              f"Transform of size {n + 2 * n_eta} is too large, using the naive sum.")
        return nonlocal_field_naive(state, wts, v1, v2)
    w = np.asarray(vel.evaluate(v2, extended_array(state, n_eta)))
    reference = float(vel.evaluate(v2, state.ghost_right))
    deviation = w - reference
    if np.any(deviation):
        corr = fftconvolve(deviation, wts.gamma[::-1], mode="valid")
    else:
        corr = np.zeros(n + 1)
    total = corr + wts.total * reference
    v = np.asarray(vel.evaluate(v1, total))
    return NonlocalField(v_at=v[1:], v_ghost_left=float(v[0]))


def nonlocal_field(state: State, wts: WeightVector, config: SolverConfig,
                   warnings: Optional[List[str]] = None) -> NonlocalField:
    """Dispatch on the configured path; BOTH returns the naive field with the deviation attached."""
    path = config.nonlocal_path
    if path == NonlocalPath.NAIVE:
        return nonlocal_field_naive(state, wts, config.v1, config.v2)
    if path == NonlocalPath.FAST:
        return nonlocal_field_fast(state, wts, config.v1, config.v2, warnings)
    naive = nonlocal_field_naive(state, wts, config.v1, config.v2)
    fast = nonlocal_field_fast(state, wts, config.v1, config.v2, warnings)
    naive.deviation = max_relative_deviation(
        np.append(naive.v_ghost_left, naive.v_at), np.append(fast.v_ghost_left, fast.v_at)
    )
    return naive


def max_relative_deviation(reference: np.ndarray, other: np.ndarray) -> float:
    scale = np.maximum(np.abs(reference), np.finfo(float).tiny)
    return float(np.max(np.abs(other - reference) / scale))


# ---------------------------------------------------------------- update

def fluxes(state: State, fld: NonlocalField) -> np.ndarray:
    """Interface fluxes q_{j}V_{j} for j = -1..n-1."""
    q = np.concatenate(([state.ghost_left], state.interior))
    v = np.concatenate(([fld.v_ghost_left], fld.v_at))
    return q * v


def step(state: State, fld: NonlocalField, lam: float, dx: float, step_index: int = 0) -> State:
    """
    One conservative update; time advances by lam*dx.

    Raises:
        SolverError: the update produced a non-finite value.
    """
    flux = fluxes(state, fld)
    new = state.interior - lam * (flux[1:] - flux[:-1])
    bad = ~np.isfinite(new)
    if np.any(bad):
        cell = int(np.argmax(bad))
        raise SolverError(f"Non-finite density at step {step_index}, cell {cell}.", step=step_index, cell=cell)
    return State(new, state.ghost_left, state.ghost_right, state.time + lam * dx)


# ---------------------------------------------------------------- time loop

def run(config: SolverConfig, tag: str = "run") -> RunReport:
    """
    Step from t=0 to final_time, shortening the last step to land on it.

    Snapshots are taken at the first step boundary at or after each requested time.

    Returns:
        RunReport: snapshots, per-step trace and warnings.
    """
    prep = prepare(config)
    grid, wts, lam = config.grid, prep.weights, prep.lam
    dt = lam * grid.dx
    state = prep.state
    report = RunReport(
        tag=tag,
        grid=grid,
        lam=lam,
        dt=dt,
        gamma_0=wts.gamma_0,
        n_eta=wts.n_eta,
        q_m=prep.bounds.q_m,
        q_M=prep.bounds.q_M,
        lipschitz=prep.bounds.lipschitz,
        sign_ok=prep.sign_ok,
        sign_branch=prep.sign_branch,
        v1_curvature=config.v1.second_derivative_sign,
        diagnostics=config.diagnostics,
        warnings=list(prep.warnings),
    )
    pending = list(config.snapshot_times)
    report.snapshots.append(Snapshot(0.0, 0.0, state.interior.copy()))
    while pending and pending[0] <= TIME_TOL:
        pending.pop(0)

    inflow = outflow = 0.0
    n = 0
    while True:
        fld = nonlocal_field(state, wts, config, report.warnings)
        if config.diagnostics:
            report.trace.append(trace_record(n, state, fld, prep.bounds, wts.gamma_0, grid.dx, inflow, outflow))
        if config.nonlocal_path == NonlocalPath.BOTH and fld.deviation > config.compare_tol:
            _warn(report.warnings, f"Fast and naive nonlocal sums differ by {fld.deviation:.3e} at step {n}.")

        remaining = config.final_time - state.time
        if remaining <= TIME_TOL * max(1.0, config.final_time):
            break
        lam_n = lam if remaining > dt * (1.0 + 1e-12) else remaining / grid.dx
        flux = fluxes(state, fld)
        step_dt = lam_n * grid.dx
        inflow += step_dt * flux[0]
        outflow += step_dt * flux[-1]
        state = step(state, fld, lam_n, grid.dx, n)
        if lam_n != lam:
            state.time = config.final_time
        n += 1

        while pending and state.time >= pending[0] - TIME_TOL:
            report.snapshots.append(Snapshot(pending.pop(0), state.time, state.interior.copy()))

    report.steps = n
    report.final_state = state
    report.inflow, report.outflow = inflow, outflow
    if boundary_variation(state) > BOUNDARY_TV_TOL:
        _warn(report.warnings, "Disturbance reached the domain boundary; constant ghost extension is no longer exact.")
    compare = config.compare_tol if config.nonlocal_path == NonlocalPath.BOTH else None
    finalize_report(report, compare)
    logger.info("%s: %d steps to t=%.6g", tag, n, state.time)
    return report


def _warn(warnings: List[str], message: str) -> None:
    logger.warning(message)
    warnings.append(message)
