import numpy as np
import pytest

from crest import oracle
from crest.oracle import SingularSystemError
from crest.selfcheck import naive_circular_response


@pytest.mark.parametrize("lam", [1e-4, 0.1, 10.0])
@pytest.mark.parametrize("shape", [(3, 3), (5, 7), (16, 16)])
def test_closed_form_matches_direct(rng, lam, shape):
    x, y = rng.normal(size=(2,) + shape)
    a = oracle.solve_dcf_closed_form(x, y, lam)
    b = oracle.solve_dcf_direct(x, y, lam)
    assert np.max(np.abs(a.taps - b.taps)) < 1e-8


def test_response_matches_naive_loop(rng):
    x, w = rng.normal(size=(2, 6, 5))
    np.testing.assert_allclose(oracle.circular_response(w, x), naive_circular_response(w, x), atol=1e-12)


def test_correlation_matrix_consistent(rng):
    x, w = rng.normal(size=(2, 4, 6))
    c = oracle.correlation_matrix(x)
    np.testing.assert_allclose(c @ w.ravel(), oracle.circular_response(w, x).ravel(), atol=1e-12)


def test_impulse_input_gives_flipped_label():
    # with X an impulse at the origin, the response is W read backwards: taps = flip(Y)
    x = np.zeros((5, 5))
    x[0, 0] = 1.0
    y = np.arange(25.0).reshape(5, 5)
    taps = oracle.solve_dcf_closed_form(x, y, 1e-12).taps
    flipped = np.roll(y[::-1, ::-1], (1, 1), axis=(0, 1))
    np.testing.assert_allclose(taps, flipped, atol=1e-9)
    np.testing.assert_allclose(oracle.circular_response(taps, x), y, atol=1e-9)


def test_fit_tightens_as_lambda_shrinks(rng):
    x, y = rng.normal(size=(2, 8, 8))
    resid = {}
    for lam in (1e-6, 1e-2):
        f = oracle.solve_dcf_closed_form(x, y, lam)
        resid[lam] = np.max(np.abs(oracle.circular_response(f, x) - y))
        g = oracle.solve_dcf_direct(x, y, lam)
        assert np.max(np.abs(oracle.circular_response(g, x) - y)) == pytest.approx(resid[lam], abs=1e-8)
    assert resid[1e-6] < resid[1e-2]
    assert resid[1e-6] < 1e-3


def test_objective_parseval(rng):
    x, y, w = rng.normal(size=(3, 7, 6))
    assert oracle.dcf_objective(w, x, y, 0.3) == pytest.approx(oracle.dcf_objective_fourier(w, x, y, 0.3),
                                                               rel=1e-12)


def test_closed_form_is_objective_minimum(rng):
    x, y = rng.normal(size=(2, 6, 6))
    f = oracle.solve_dcf_closed_form(x, y, 0.1)
    best = oracle.dcf_objective(f, x, y, 0.1)
    for _ in range(5):
        assert oracle.dcf_objective(f.taps + 1e-3 * rng.normal(size=(6, 6)), x, y, 0.1) > best


def test_singular_and_limits():
    x = np.ones((4, 4))
    with pytest.raises(SingularSystemError):
        oracle.solve_dcf_closed_form(x, np.ones((4, 4)), 0.0)
    with pytest.raises(ValueError):
        oracle.solve_dcf_closed_form(x, np.ones((4, 4)), -1.0)
    with pytest.raises(ValueError, match="16x16"):
        oracle.solve_dcf_direct(np.ones((17, 16)), np.ones((17, 16)), 0.1)
    with pytest.raises(ValueError):
        oracle.solve_dcf_closed_form(x, np.ones((4, 5)), 0.1)


def test_gaussian_self_interpolation():
    # narrow enough that no spectral component vanishes, so lambda = 0 is solvable
    g = np.exp(-((np.arange(9) - 4.0) ** 2)[:, None] / (2 * 0.7**2) - ((np.arange(9) - 4.0) ** 2)[None] / (2 * 0.7**2))
    f = oracle.solve_dcf_closed_form(g, g, 0.0)
    np.testing.assert_allclose(oracle.circular_response(f, g), g, atol=1e-9)


def test_impulse_filter_is_identity(rng):
    x = rng.normal(size=(6, 6))
    imp = np.zeros((6, 6))
    imp[0, 0] = 1.0
    np.testing.assert_allclose(oracle.circular_response(imp, x), x, atol=1e-12)


def test_large_lambda_shrinks_filter(rng):
    x, y = rng.normal(size=(2, 6, 6))
    w = oracle.solve_dcf_direct(x, y, 1e6).taps
    assert np.max(np.abs(w)) < 1e-4 * np.max(np.abs(y))
