"""Independent solvers for the ridge-regression correlation filter objective.

Both solvers minimise ``||w * X - Y||^2 + lam ||w||^2`` where ``*`` is circular
cross-correlation in the same convention as :func:`crest.tensor.conv2d_forward`::

    response[u, v] = sum_{m, n} w[m, n] * X[(u + m) % H, (v + n) % W]

so the taps are directly comparable with a trained conv kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError

DIRECT_MAX_CELLS = 16 * 16


class SingularSystemError(ValueError):
    pass


def _as2d(a, what: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ShapeError(f"{what} must be single-channel, got shape {arr.shape}")
        arr = arr[0]
    if arr.ndim != 2:
        raise ShapeError(f"{what} must be 2-D, got shape {arr.shape}")
    return arr


@dataclass
class CircularFilter:
    taps: np.ndarray
    spectrum: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.taps = _as2d(self.taps, "filter")
        if self.spectrum is None:
            self.spectrum = np.fft.fft2(self.taps)


def circular_response(filt, x) -> np.ndarray:
    """Circular cross-correlation of ``x`` with the filter taps, via the FFT."""
    taps = filt.taps if isinstance(filt, CircularFilter) else _as2d(filt, "filter")
    x = _as2d(x, "input")
    if taps.shape != x.shape:
        raise ShapeError(f"filter shape {taps.shape} != input shape {x.shape}")
    spec = filt.spectrum if isinstance(filt, CircularFilter) else np.fft.fft2(taps)
    return np.real(np.fft.ifft2(np.conj(spec) * np.fft.fft2(x)))


def solve_dcf_closed_form(x, y, lam: float) -> CircularFilter:
    """Per-frequency ridge solution."""
    x = _as2d(x, "X")
    y = _as2d(y, "Y")
    if x.shape != y.shape:
        raise ShapeError(f"X shape {x.shape} != Y shape {y.shape}")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    xf = np.fft.fft2(x)
    yf = np.fft.fft2(y)
    energy = np.real(xf * np.conj(xf))
    if lam == 0 and np.min(energy) <= 1e-14 * max(np.max(energy), 1e-300):
        raise SingularSystemError("lambda = 0 and X has a (near-)zero spectral component")
    # response spectrum is conj(W) X, so solve for conj(W) and conjugate back
    wf = np.conj(np.conj(xf) * yf / (energy + lam))
    taps = np.real(np.fft.ifft2(wf))
    return CircularFilter(taps, np.fft.fft2(taps))


def correlation_matrix(x) -> np.ndarray:
    """Dense matrix ``C`` with ``C @ w.ravel() == circular_response(w, x).ravel()``."""
    x = _as2d(x, "X")
    h, w = x.shape
    n = h * w
    c = np.empty((n, n))
    for u in range(h):
        for v in range(w):
            # row (u, v): X shifted so that entry (m, n) is X[(u+m) % h, (v+n) % w]
            c[u * w + v] = np.roll(x, (-u, -v), axis=(0, 1)).ravel()
    return c


def solve_dcf_direct(x, y, lam: float) -> CircularFilter:
    """Normal-equation solve of the dense circulant least-squares problem."""
    x = _as2d(x, "X")
    y = _as2d(y, "Y")
    if x.shape != y.shape:
        raise ShapeError(f"X shape {x.shape} != Y shape {y.shape}")
    if x.size > DIRECT_MAX_CELLS:
        raise ValueError(f"direct solver limited to {DIRECT_MAX_CELLS} cells (16x16), got {x.shape}")
    c = correlation_matrix(x)
    a = c.T @ c + lam * np.eye(x.size)
    try:
        w = np.linalg.solve(a, c.T @ y.ravel())
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"normal equations singular: {exc}") from None
    return CircularFilter(w.reshape(x.shape))


def dcf_objective(filt, x, y, lam: float) -> float:
    taps = filt.taps if isinstance(filt, CircularFilter) else _as2d(filt, "filter")
    r = circular_response(taps, x) - _as2d(y, "Y")
    return float(np.sum(r * r) + lam * np.sum(taps * taps))


def dcf_objective_fourier(filt, x, y, lam: float) -> float:
    """Same objective evaluated with spectra (Parseval)."""
    taps = filt.taps if isinstance(filt, CircularFilter) else _as2d(filt, "filter")
    x = _as2d(x, "X")
    n = x.size
    wf = np.fft.fft2(taps)
    resid = np.conj(wf) * np.fft.fft2(x) - np.fft.fft2(_as2d(y, "Y"))
    return float((np.sum(np.abs(resid) ** 2) + lam * np.sum(np.abs(wf) ** 2)) / n)
