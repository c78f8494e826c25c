import numpy as np
import pytest
from scipy.integrate import quad

from services import kernel_service
from services.kernel_service import KernelError, KernelPiece


def gamma_at(kernel, x):
    for piece in kernel.pieces:
        if piece.start <= x <= piece.end:
            return float(piece.polynomial()(x))
    return 0.0


def test_linear_decreasing_shape():
    """
    Positive, eta = 0.5 gives gamma(0) = 8, gamma(0.5) = 0 and unit mass.
    """
    kernel = kernel_service.linear_decreasing(0.5)
    assert gamma_at(kernel, 0.0) == pytest.approx(8.0)
    assert gamma_at(kernel, 0.5) == pytest.approx(0.0, abs=1e-14)
    assert kernel_service.total_integral(kernel) == pytest.approx(1.0, abs=1e-15)
    assert kernel.is_monotone


def test_linear_decreasing_unit_eta():
    assert gamma_at(kernel_service.linear_decreasing(1.0), 0.0) == pytest.approx(2.0)


@pytest.mark.parametrize("eta", [0.0, -1.0, float("inf")])
def test_bad_eta(eta):
    """
    Negative, eta must be positive and finite.
    """
    with pytest.raises(KernelError):
        kernel_service.linear_decreasing(eta)
    with pytest.raises(KernelError):
        kernel_service.constant(eta)


def test_constant_kernel_weights():
    """
    Positive, eta = 2, dx = 0.5 gives four weights of 0.25.
    """
    wts = kernel_service.weights(kernel_service.constant(2.0), 0.5)
    assert wts.n_eta == 4
    assert np.allclose(wts.gamma, 0.25, atol=1e-15)


def test_linear_weights_exact_on_quarter_grid():
    """
    Positive, dx = 0.25 gives exactly [0.75, 0.25].
    """
    wts = kernel_service.weights(kernel_service.linear_decreasing(0.5), 0.25)
    assert wts.n_eta == 2
    assert wts.gamma.tolist() == [0.75, 0.25]


def test_constant_half_weights():
    wts = kernel_service.weights(kernel_service.constant(0.5), 0.25)
    assert wts.gamma.tolist() == pytest.approx([0.5, 0.5], abs=1e-15)


def test_gamma_0_at_preset_resolution():
    """
    Positive, gamma_0 = 8 (eta dx - dx^2/2) = 0.003996 for dx = 1e-3.
    """
    wts = kernel_service.weights(kernel_service.linear_decreasing(0.5), 1e-3)
    assert wts.n_eta == 500
    assert wts.gamma_0 == pytest.approx(0.003996, rel=1e-12)


@pytest.mark.parametrize("dx", [0.25, 0.1, 1e-3])
def test_linear_weights_sum_and_monotone(dx):
    """
    Positive, weights sum to the integral over [0, N_eta dx] and never increase.
    """
    kernel = kernel_service.linear_decreasing(0.5)
    wts = kernel_service.weights(kernel, dx)
    closed_form = kernel_service.antiderivative(kernel, wts.n_eta * dx)
    assert wts.total == pytest.approx(closed_form, abs=1e-14)
    assert np.all(np.diff(wts.gamma) <= 0)


def test_kernel_unresolved_by_grid():
    """
    Negative, dx > eta gives N_eta = 0.
    """
    with pytest.raises(KernelError) as err:
        kernel_service.weights(kernel_service.linear_decreasing(0.5), 0.7)
    assert "kernel unresolved by grid" in str(err.value)


def test_n_eta_floor_tolerates_rounding():
    """
    Positive, 0.3/0.1 is 2.9999999999999996 in floating point but still 3 cells.
    """
    assert kernel_service.n_eta_for(0.3, 0.1) == 3
    assert kernel_service.n_eta_for(0.5, 0.3) == 1


@pytest.mark.parametrize("kernel, dx, expected", [
    (kernel_service.linear_decreasing(0.5), 0.01, 0.5),
    (kernel_service.constant(2.0), 0.1, 2.0),
    (kernel_service.piecewise([(0.0, 0.3, [2.0]), (0.3, 0.8, [1.0])]), 0.1, 0.8),
])
def test_truncation_eta(kernel, dx, expected):
    assert kernel_service.truncation_eta(kernel, dx) == expected


def test_piecewise_weights_straddle_breakpoint():
    """
    Positive, a cell containing a breakpoint gets the sum of both piece integrals.
    """
    kernel = kernel_service.piecewise([(0.0, 0.25, [3.0]), (0.25, 1.0, [2.0, -1.0])])
    wts = kernel_service.weights(kernel, 0.2)
    # cell [0.2, 0.4]: 3*0.05 + integral of (2 - x) over [0.25, 0.4]
    expected = 3.0 * 0.05 + (2.0 * 0.15 - (0.4 ** 2 - 0.25 ** 2) / 2)
    assert wts.gamma[1] == pytest.approx(expected, abs=1e-15)


def test_piecewise_weights_match_quadrature():
    """
    Positive, random two-piece kernels agree with adaptive quadrature cell by cell.
    """
    rng = np.random.default_rng(7)
    for _ in range(20):
        split = rng.uniform(0.1, 0.4)
        end = rng.uniform(0.5, 1.0)
        left = [rng.uniform(1.0, 2.0), -rng.uniform(0.0, 1.0)]
        right = [rng.uniform(0.1, 0.5)]
        kernel = kernel_service.piecewise([(0.0, split, left), (split, end, right)])
        dx = 0.07
        wts = kernel_service.weights(kernel, dx)
        for k in range(wts.n_eta):
            a, b = k * dx, min((k + 1) * dx, end)
            inside = [split] if a < split < b else None
            ref, _ = quad(lambda x: gamma_at(kernel, x), a, b, points=inside, epsabs=1e-14, epsrel=1e-14)
            assert wts.gamma[k] == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("pieces, message", [
    ([], "at least one piece"),
    ([KernelPiece(0.1, 0.5, (1.0,))], "start at 0"),
    ([KernelPiece(0.0, 0.5, (1.0,)), KernelPiece(0.6, 1.0, (1.0,))], "does not start"),
    ([KernelPiece(0.0, 0.5, (1.0, 0, 0, 0, 1.0))], "degree"),
    ([KernelPiece(0.0, 1.0, (1.0, -2.0))], "negative"),
    ([KernelPiece(0.0, float("inf"), (1.0,))], "finite"),
])
def test_validate_kernel_rejects(pieces, message):
    """
    Negative, each structural invariant has its own message.
    """
    ok, msg = kernel_service.validate_kernel(pieces)
    assert ok is False
    assert message in msg


def test_increasing_kernel_is_not_monotone():
    """
    Negative, gamma(x) = x is valid but not monotonically decreasing.
    """
    kernel = kernel_service.piecewise([(0.0, 1.0, [0.0, 2.0])])
    ok, reason = kernel_service.check_monotone(kernel)
    assert ok is False
    assert reason


def test_upward_jump_is_not_monotone():
    kernel = kernel_service.piecewise([(0.0, 0.5, [1.0]), (0.5, 1.0, [2.0])])
    assert kernel.is_monotone is False


def test_kernel_config_echo():
    """
    Positive, named kernels echo kind and eta, others their pieces.
    """
    assert kernel_service.to_config(kernel_service.linear_decreasing(0.5)) == {"kind": "linear_decreasing", "eta": 0.5}
    echo = kernel_service.to_config(kernel_service.piecewise([(0.0, 0.5, [1.0])]))
    assert echo == {"kind": "piecewise", "pieces": [[0.0, 0.5, [1.0]]]}


@pytest.mark.parametrize("kernel", [
    kernel_service.linear_decreasing(0.5),
    kernel_service.constant(0.5),
    kernel_service.piecewise([(0.0, 0.25, [3.0]), (0.25, 1.0, [2.0, -1.0])]),
], ids=["linear", "constant", "piecewise"])
@pytest.mark.parametrize("dx", [0.125, 0.1, 0.01, 4e-3, 1e-3])
def test_weights_partition_the_kernel_mass(kernel, dx):
    """
    Positive, a resolved kernel gives the same weight sum at dx and dx/2,
    and that sum is its integral.
    """
    coarse = kernel_service.weights(kernel, dx)
    fine = kernel_service.weights(kernel, dx / 2)
    assert coarse.total == pytest.approx(fine.total, abs=1e-14)
    assert coarse.total == pytest.approx(kernel_service.total_integral(kernel), abs=1e-14)
