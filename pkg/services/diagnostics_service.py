"""
Diagnostics Service Module - run reports and discrete invariants
Maximum principle, velocity-difference estimates, conservation,
monotonicity preservation and the grid-refinement (EOC) harness.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from services.grid_service import Grid1D, State
from services.velocity_service import Curvature, curvature_protects

logger = logging.getLogger(__name__)

MAX_PRINCIPLE_TOL = 1e-12
RESIDUAL_TOL = 1e-12
MASS_TOL = 1e-10
MONOTONE_TOL = 1e-12
SNAPSHOT_MATCH_TOL = 1e-9
JAM_THRESHOLD = 0.3


class DiagnosticsError(ValueError):
    """Raised when a diagnostic is undefined for the given reports."""


class Trend(str, Enum):
    NON_DECREASING = "non_decreasing"
    NON_INCREASING = "non_increasing"
    NEITHER = "neither"


@dataclass
class Snapshot:
    requested_time: float
    time: float
    density: np.ndarray


@dataclass
class TraceRecord:
    step: int
    time: float
    q_min: float
    j_min: int
    q_max: float
    j_max: int
    total_variation: float
    mass: float
    trend: Trend
    residual_upper: float
    residual_lower: float
    deviation: float
    inflow: float
    outflow: float


@dataclass
class CheckResult:
    name: str
    ok: bool
    applicable: bool
    message: str


@dataclass
class RunReport:
    tag: str
    grid: Grid1D
    lam: float
    dt: float
    gamma_0: float
    n_eta: int
    q_m: float
    q_M: float
    lipschitz: float
    sign_ok: bool
    sign_branch: str
    v1_curvature: Curvature
    diagnostics: bool = True
    snapshots: List[Snapshot] = field(default_factory=list)
    trace: List[TraceRecord] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    checks: List[CheckResult] = field(default_factory=list)
    flank: Optional[CheckResult] = None
    steps: int = 0
    final_state: Optional[State] = None
    inflow: float = 0.0
    outflow: float = 0.0
    initial_mass: float = 0.0
    final_mass: float = 0.0
    config_echo: Dict = field(default_factory=dict)
    sweep_value: Optional[float] = None

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks if c.applicable)

    @property
    def final_time(self) -> float:
        return self.final_state.time if self.final_state is not None else 0.0


# ---------------------------------------------------------------- state measures

def total_variation(state: State) -> float:
    """Sum of |q_{j+1} - q_j| over the interior plus the jumps to both ghosts."""
    q = np.concatenate(([state.ghost_left], state.interior, [state.ghost_right]))
    return float(np.sum(np.abs(np.diff(q))))


def mass(density: np.ndarray, dx: float) -> float:
    return math.fsum(density) * dx


def monotonicity_flag(density, tol: float = MONOTONE_TOL) -> Trend:
    """
    Adjacent-difference scan. Constant data satisfies both directions and is
    reported as NON_DECREASING.
    """
    if isinstance(density, State):
        density = density.interior
    diffs = np.diff(np.asarray(density, dtype=float))
    if np.all(diffs >= -tol):
        return Trend.NON_DECREASING
    if np.all(diffs <= tol):
        return Trend.NON_INCREASING
    return Trend.NEITHER


def velocity_residuals(state: State, fld, bounds, gamma_0: float) -> Tuple[float, float]:
    """
    Largest violations of
        V_{j-1} - V_j <= L gamma_0 (q_M - q_j)   and
        V_{j-1} - V_j >= L gamma_0 (q_m - q_j),  L = |V1'| |V2'|.
    Nonpositive values mean both estimates hold.
    """
    v = np.concatenate(([fld.v_ghost_left], fld.v_at))
    drop = v[:-1] - v[1:]
    scale = bounds.lipschitz * gamma_0
    q = state.interior
    upper = float(np.max(drop - scale * (bounds.q_M - q)))
    lower = float(np.max(scale * (bounds.q_m - q) - drop))
    return upper, lower


def trace_record(n: int, state: State, fld, bounds, gamma_0: float, dx: float,
                 inflow: float, outflow: float) -> TraceRecord:
    q = state.interior
    j_min, j_max = int(np.argmin(q)), int(np.argmax(q))
    upper, lower = velocity_residuals(state, fld, bounds, gamma_0)
    return TraceRecord(
        step=n,
        time=state.time,
        q_min=float(q[j_min]),
        j_min=j_min,
        q_max=float(q[j_max]),
        j_max=j_max,
        total_variation=total_variation(state),
        mass=mass(q, dx),
        trend=monotonicity_flag(q),
        residual_upper=upper,
        residual_lower=lower,
        deviation=fld.deviation,
        inflow=inflow,
        outflow=outflow,
    )


# ---------------------------------------------------------------- checks

def check_max_principle(report: RunReport, q_m: float, q_M: float,
                        tol: float = MAX_PRINCIPLE_TOL) -> Tuple[bool, str, Optional[Tuple[int, int, float]]]:
    """
    Scan the trace for q_m - tol <= q_j^n <= q_M + tol.

    Returns:
        tuple: (ok, message, first violation as (n, j, value) or None)
    """
    for rec in report.trace:
        if rec.q_min < q_m - tol:
            return False, f"q={rec.q_min!r} below q_m={q_m!r} at step {rec.step}, cell {rec.j_min}.", \
                (rec.step, rec.j_min, rec.q_min)
        if rec.q_max > q_M + tol:
            return False, f"q={rec.q_max!r} above q_M={q_M!r} at step {rec.step}, cell {rec.j_max}.", \
                (rec.step, rec.j_max, rec.q_max)
    return True, f"{len(report.trace)} states within [{q_m:.17g}, {q_M:.17g}].", None


def check_velocity_differences(report: RunReport, tol: float = RESIDUAL_TOL) -> Tuple[bool, str]:
    upper = max_residual(report, "residual_upper")
    lower = max_residual(report, "residual_lower")
    if upper > tol:
        return False, f"upper velocity-difference estimate violated by {upper:.3e}."
    if lower > tol:
        return False, f"lower velocity-difference estimate violated by {lower:.3e}."
    return True, f"residuals upper={upper:.3e}, lower={lower:.3e}."


def max_residual(report: RunReport, key: str) -> float:
    if not report.trace:
        return -math.inf
    return max(getattr(rec, key) for rec in report.trace)


def mass_balance(report: RunReport) -> float:
    """|mass_N - mass_0 - (inflow - outflow)| / max(1, mass_0)."""
    drift = report.final_mass - report.initial_mass - (report.inflow - report.outflow)
    return abs(drift) / max(1.0, report.initial_mass)


def check_monotonicity_preserved(report: RunReport, tol: float = MONOTONE_TOL) -> Tuple[bool, bool, str]:
    """
    Monotone data stays monotone when V1's curvature protects that direction.

    Returns:
        tuple: (applicable, ok, message)
    """
    if not report.trace:
        return False, True, "no trace recorded."
    start = report.trace[0].trend
    if start == Trend.NEITHER or not report.sign_ok:
        return False, True, "initial datum is not monotone or the sign condition fails."
    if not curvature_protects(report.v1_curvature, start == Trend.NON_DECREASING):
        return False, True, f"V1 curvature {report.v1_curvature.value} does not protect {start.value} data."
    flat = tol * max(1, report.grid.n_cells)
    for rec in report.trace:
        # constant data is flagged NON_DECREASING but satisfies both directions
        if rec.trend == Trend.NEITHER or (rec.trend != start and rec.q_max - rec.q_min > flat):
            return True, False, f"monotonicity lost at step {rec.step} ({rec.trend.value})."
    return True, True, f"{start.value} kept for {len(report.trace)} states."


def flank_trends(density, tol: float = MONOTONE_TOL) -> Tuple[bool, bool]:
    """
    Split the profile at its peak.

    Returns:
        tuple: (upstream side non-decreasing, downstream side non-increasing)
    """
    q = np.asarray(density, dtype=float)
    first = int(np.argmax(q))
    last = q.size - 1 - int(np.argmax(q[::-1]))
    upstream = bool(np.all(np.diff(q[:first + 1]) >= -tol))
    downstream = bool(np.all(np.diff(q[last:]) <= tol))
    return upstream, downstream


def check_protected_flank(report: RunReport, tol: float = MONOTONE_TOL) -> CheckResult:
    """
    Non-monotone data keeps the monotone flank its V1 curvature protects:
    the rising side upstream of the peak for concave V1, the falling side
    downstream of it for convex V1.

    Observed on every recorded snapshot and the final state. Not part of
    report.passed, since only globally monotone data is covered by a proof.
    """
    if not report.snapshots or not report.sign_ok:
        return CheckResult("protected_flank", True, False, "no snapshots or the sign condition fails.")
    start = flank_trends(report.snapshots[0].density, tol)
    sides = [
        (i, name) for i, (name, increasing) in enumerate((("upstream", True), ("downstream", False)))
        if start[i] and curvature_protects(report.v1_curvature, increasing)
    ]
    if not sides:
        return CheckResult("protected_flank", True, False,
                           f"V1 curvature {report.v1_curvature.value} protects no monotone flank of the datum.")
    states = [(s.time, s.density) for s in report.snapshots]
    if report.final_state is not None:
        states.append((report.final_state.time, report.final_state.interior))
    for time, density in states:
        trends = flank_trends(density, tol)
        for i, name in sides:
            if not trends[i]:
                return CheckResult("protected_flank", False, True, f"{name} flank lost monotonicity at t={time:.6g}.")
    names = " and ".join(name for _, name in sides)
    return CheckResult("protected_flank", True, True, f"{names} flank kept over {len(states)} states.")


def check_path_equivalence(report: RunReport, tol: float) -> Tuple[bool, str]:
    worst = max((rec.deviation for rec in report.trace), default=0.0)
    if worst > tol:
        return False, f"fast and naive fields differ by {worst:.3e} > {tol:.1e}."
    return True, f"fast and naive fields agree to {worst:.3e}."


def finalize_report(report: RunReport, compare: Optional[float] = None) -> RunReport:
    """Fill masses and run every check that applies to this report."""
    report.initial_mass = mass(report.snapshots[0].density, report.grid.dx)
    report.final_mass = mass(report.final_state.interior, report.grid.dx)
    checks: List[CheckResult] = []

    residual = mass_balance(report)
    checks.append(CheckResult("mass_balance", residual < MASS_TOL, True, f"residual {residual:.3e}."))

    if report.diagnostics:
        gate = report.sign_ok
        ok, message, _ = check_max_principle(report, report.q_m, report.q_M)
        checks.append(CheckResult("max_principle", ok, gate, message))
        ok, message = check_velocity_differences(report)
        checks.append(CheckResult("velocity_difference", ok, gate, message))
        applicable, ok, message = check_monotonicity_preserved(report)
        checks.append(CheckResult("monotonicity", ok, applicable, message))
        if compare is not None:
            ok, message = check_path_equivalence(report, compare)
            checks.append(CheckResult("path_equivalence", ok, True, message))
        report.flank = check_protected_flank(report)
        logger.info("%s: %s", report.tag, report.flank.message)

    for check in checks:
        if check.applicable and not check.ok:
            logger.warning("%s: check %s failed: %s", report.tag, check.name, check.message)
    report.checks = checks
    return report


# ---------------------------------------------------------------- observables

def solution_at(report: RunReport, time: float) -> np.ndarray:
    """Density recorded for a requested time (final state when time is the end of the run)."""
    for snap in report.snapshots:
        if abs(snap.requested_time - time) <= SNAPSHOT_MATCH_TOL:
            return snap.density
    if report.final_state is not None and abs(report.final_state.time - time) <= SNAPSHOT_MATCH_TOL:
        return report.final_state.interior
    raise DiagnosticsError(f"Run {report.tag} has no snapshot at t={time:g}.")


def jam_profile(grid: Grid1D, density: np.ndarray, threshold: float = JAM_THRESHOLD) -> Dict[str, Optional[float]]:
    """Peak density and position, plus the jam front (rightmost) and tail (leftmost) above threshold."""
    x = grid.centers
    j = int(np.argmax(density))
    above = np.nonzero(density > threshold)[0]
    return {
        "peak_density": float(density[j]),
        "peak_position": float(x[j]),
        "jam_front": float(x[above[-1]]) if above.size else None,
        "jam_tail": float(x[above[0]]) if above.size else None,
    }


def restrict(density: np.ndarray, n_coarse: int) -> np.ndarray:
    """Average a fine solution onto n_coarse cells."""
    factor, rest = divmod(density.size, n_coarse)
    if rest or factor < 1:
        raise DiagnosticsError(f"{density.size} cells do not nest into {n_coarse} coarse cells.")
    return density.reshape(n_coarse, factor).mean(axis=1)


def eoc(reports: Sequence[RunReport], t_star: float) -> float:
    """
    Experimental order from three runs at dx, dx/2, dx/4 (any order).

    e1 = |coarse - mid|_L1, e2 = |mid - fine|_L1 on the coarse cells;
    order = log2(e1/e2).

    Raises:
        DiagnosticsError: the errors vanish, or the grids do not nest.
    """
    if len(reports) != 3:
        raise DiagnosticsError("EOC needs exactly three runs.")
    coarse, mid, fine = sorted(reports, key=lambda r: r.grid.dx, reverse=True)
    n = coarse.grid.n_cells
    dx = coarse.grid.dx
    q_c = solution_at(coarse, t_star)
    q_m = restrict(solution_at(mid, t_star), n)
    q_f = restrict(solution_at(fine, t_star), n)
    e1 = dx * float(np.sum(np.abs(q_c - q_m)))
    e2 = dx * float(np.sum(np.abs(q_m - q_f)))
    if e1 == 0.0 or e2 == 0.0:
        raise DiagnosticsError("Order is undefined: successive refinements give identical solutions.")
    order = math.log2(e1 / e2)
    logger.info("EOC at t=%g: e1=%.3e e2=%.3e order=%.3f", t_star, e1, e2, order)
    return order


def summarize(report: RunReport) -> Dict:
    """Plain dict for the report file."""
    summary = {
        "tag": report.tag,
        "sweep_value": report.sweep_value,
        "lambda": report.lam,
        "dt": report.dt,
        "gamma_0": report.gamma_0,
        "N_eta": report.n_eta,
        "steps": report.steps,
        "final_time": report.final_time,
        "q_m": report.q_m,
        "q_M": report.q_M,
        "sign_condition": {"holds": report.sign_ok, "detail": report.sign_branch},
        "ghost_policy": "constant extension by the datum's tail values",
        "mass_balance": mass_balance(report),
        "warnings": list(report.warnings),
        "checks": [vars(c).copy() for c in report.checks],
        "passed": report.passed,
        "protected_flank": vars(report.flank).copy() if report.flank is not None else None,
        "snapshots": [_snapshot_summary(report.grid, s) for s in report.snapshots],
        "config": report.config_echo,
    }
    if report.trace:
        summary["trace"] = {
            "records": len(report.trace),
            "min": min(r.q_min for r in report.trace),
            "max": max(r.q_max for r in report.trace),
            "initial_tv": report.trace[0].total_variation,
            "final_tv": report.trace[-1].total_variation,
            "max_residual_upper": max_residual(report, "residual_upper"),
            "max_residual_lower": max_residual(report, "residual_lower"),
            "max_path_deviation": max(r.deviation for r in report.trace),
            "trends": sorted({r.trend.value for r in report.trace}),
        }
    return summary


def _snapshot_summary(grid: Grid1D, snap: Snapshot) -> Dict:
    upstream, downstream = flank_trends(snap.density)
    return {
        "requested_time": snap.requested_time,
        "time": snap.time,
        **jam_profile(grid, snap.density),
        "upstream_non_decreasing": upstream,
        "downstream_non_increasing": downstream,
    }
