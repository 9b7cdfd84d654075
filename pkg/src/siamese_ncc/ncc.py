"""Normalized cross-correlation: correlograms, peak analysis and exact peak gradients.

A correlogram ``c`` has shape ``(Hs - Ht + 1, Ws - Wt + 1)`` and ``c[v, u]`` is the
Pearson coefficient between the template and the source window whose top-left
corner is at column ``u``, row ``v``. Locations are reported as ``(x, y) = (u, v)``.

Windows (or templates) with per-pixel variance below ``VARIANCE_FLOOR`` have an
undefined Pearson coefficient; they are assigned ``r = 0`` and a zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import toeplitz

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class PeakAnalysis:
    primary_loc: tuple[int, int]
    r_max: float
    secondary_loc: tuple[int, int]
    r_second: float
    exclusion: int
    secondary_found: bool = True

    @property
    def r_delta(self) -> float:
        return self.r_max - self.r_second


@dataclass
class PeakGradient:
    """Gradient of one correlogram entry with respect to both inputs."""

    loc: tuple[int, int]
    r: float
    grad_template: np.ndarray
    grad_source: np.ndarray
    degenerate: bool = False


def _check_shapes(template: np.ndarray, source: np.ndarray) -> tuple[int, int]:
    if template.ndim != 2 or source.ndim != 2:
        raise ValueError("template and source must be 2D")
    th, tw = template.shape
    sh, sw = source.shape
    if th > sh or tw > sw:
        raise ValueError(f"template {template.shape} larger than source {source.shape}")
    if not (np.isfinite(template).all() and np.isfinite(source).all()):
        raise ValueError("template and source must be finite")
    return sh - th + 1, sw - tw + 1


def _next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def _centered_template(template: np.ndarray) -> tuple[np.ndarray, float]:
    t = template - template.mean()
    return t, float(np.dot(t.ravel(), t.ravel()))


def _finish(num, win_ss, t_ss, n, out_dtype):
    """Turn numerator and sums of squared deviations into clamped Pearson r."""
    r = np.zeros(num.shape, dtype=np.float64)
    if t_ss / n >= VARIANCE_FLOOR:
        ok = win_ss / n >= VARIANCE_FLOOR
        r[ok] = num[ok] / np.sqrt(t_ss * win_ss[ok])
    np.clip(r, -1.0, 1.0, out=r)
    return r.astype(out_dtype, copy=False)


def ncc_direct(template, source, out_dtype=np.float32) -> np.ndarray:
    """Correlogram by exact spatial-domain summation (no FFT, no running sums).

    Each template row contributes one Toeplitz matrix product; window sums
    are separable direct box sums.
    """
    template = np.asarray(template, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    oh, ow = _check_shapes(template, source)
    th, tw = template.shape
    sw = source.shape[1]
    n = th * tw
    t, t_ss = _centered_template(template)
    s = source - source.mean()

    num = np.zeros((oh, ow))
    col = np.zeros(sw)
    row = np.zeros(ow)
    for i in range(th):
        col[:tw] = t[i]
        row[0] = t[i, 0]
        num += s[i:i + oh] @ toeplitz(col, row)

    s2 = s * s
    rows1 = np.zeros((oh, sw))
    rows2 = np.zeros((oh, sw))
    for i in range(th):
        rows1 += s[i:i + oh]
        rows2 += s2[i:i + oh]
    sum1 = np.zeros((oh, ow))
    sum2 = np.zeros((oh, ow))
    for j in range(tw):
        sum1 += rows1[:, j:j + ow]
        sum2 += rows2[:, j:j + ow]
    win_ss = np.maximum(sum2 - sum1 * sum1 / n, 0.0)
    return _finish(num, win_ss, t_ss, n, out_dtype)


def _window_sums(s: np.ndarray, th: int, tw: int) -> np.ndarray:
    ii = np.zeros((s.shape[0] + 1, s.shape[1] + 1))
    np.cumsum(np.cumsum(s, axis=0), axis=1, out=ii[1:, 1:])
    return ii[th:, tw:] - ii[:-th, tw:] - ii[th:, :-tw] + ii[:-th, :-tw]


def ncc_fft(template, source, out_dtype=np.float32) -> np.ndarray:
    """Correlogram with an FFT numerator and integral-image window statistics.

    Transforms are zero-padded to the next power of two of the source size
    in each dimension.
    """
    template = np.asarray(template, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    oh, ow = _check_shapes(template, source)
    th, tw = template.shape
    sh, sw = source.shape
    n = th * tw
    t, t_ss = _centered_template(template)
    s = source - source.mean()

    shape = (_next_pow2(sh), _next_pow2(sw))
    spec = np.fft.rfft2(s, shape) * np.conj(np.fft.rfft2(t, shape))
    num = np.fft.irfft2(spec, shape)[:oh, :ow]

    sum1 = _window_sums(s, th, tw)
    sum2 = _window_sums(s * s, th, tw)
    win_ss = np.maximum(sum2 - sum1 * sum1 / n, 0.0)
    return _finish(num, win_ss, t_ss, n, out_dtype)


def exclusion_bounds(center: int, side: int, limit: int) -> tuple[int, int]:
    """Half-open index range of a window of ``side`` around ``center``, clipped to ``[0, limit)``.

    Covers ``center - (side - 1) // 2`` through ``center + side // 2``, so windows
    of increasing side are nested.
    """
    lo = center - (side - 1) // 2
    return max(lo, 0), min(lo + side, limit)


def analyze_peaks(corr: np.ndarray, exclusion: int) -> PeakAnalysis:
    corr = np.asarray(corr)
    if corr.ndim != 2 or corr.size == 0:
        raise ValueError("correlogram must be a non-empty 2D array")
    if exclusion < 1:
        raise ValueError(f"exclusion must be >= 1, got {exclusion}")
    # np.argmax returns the first (smallest row-major) index on ties
    v, u = np.unravel_index(int(np.argmax(corr)), corr.shape)
    r_max = float(corr[v, u])
    y0, y1 = exclusion_bounds(v, exclusion, corr.shape[0])
    x0, x1 = exclusion_bounds(u, exclusion, corr.shape[1])
    masked = np.array(corr, dtype=np.float64)
    masked[y0:y1, x0:x1] = -np.inf
    idx = int(np.argmax(masked))
    sv, su = np.unravel_index(idx, corr.shape)
    if not np.isfinite(masked[sv, su]):
        return PeakAnalysis((int(u), int(v)), r_max, (int(u), int(v)), -1.0, exclusion, False)
    return PeakAnalysis((int(u), int(v)), r_max, (int(su), int(sv)), float(masked[sv, su]), exclusion)


def ncc_peak_gradients(template, source, locations) -> list[PeakGradient]:
    """Analytic gradients of selected correlogram entries, in double precision.

    For ``r = <a, b> / (|a| |b|)`` with ``a``, ``b`` the mean-removed template and
    window, ``dr/dT = b / (|a||b|) - r a / |a|^2`` and symmetrically for the
    window. Both are already zero-mean, so the centering Jacobian drops out.
    """
    template = np.asarray(template, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    oh, ow = _check_shapes(template, source)
    th, tw = template.shape
    n = th * tw
    a, a_ss = _centered_template(template)
    out = []
    for x, y in locations:
        if not (0 <= x < ow and 0 <= y < oh):
            raise IndexError(f"location {(x, y)} outside correlogram {oh}x{ow}")
        grad_t = np.zeros_like(template)
        grad_s = np.zeros_like(source)
        w = source[y:y + th, x:x + tw]
        b = w - w.mean()
        b_ss = float(np.dot(b.ravel(), b.ravel()))
        if a_ss / n < VARIANCE_FLOOR or b_ss / n < VARIANCE_FLOOR:
            out.append(PeakGradient((x, y), 0.0, grad_t, grad_s, degenerate=True))
            continue
        norm = np.sqrt(a_ss * b_ss)
        r = float(np.dot(a.ravel(), b.ravel())) / norm
        grad_t[:] = b / norm - r * a / a_ss
        grad_s[y:y + th, x:x + tw] = a / norm - r * b / b_ss
        out.append(PeakGradient((x, y), r, grad_t, grad_s))
    return out
