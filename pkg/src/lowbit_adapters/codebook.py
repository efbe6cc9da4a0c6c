"""Optimal scalar codebooks for the standard Gaussian and for empirical data.

The Gaussian codebook is the fixed point of a Lloyd iteration that alternates
between midpoint boundaries and per-interval centers (median for ``L1``,
conditional mean for ``L2``).  ``cluster_1d`` runs the same alternation on a
sample, which is what the post-training-quantization baseline uses.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import ndtr, ndtri

__all__ = [
    "Metric",
    "Codebook",
    "Clustering",
    "ConvergenceError",
    "gaussian_cdf",
    "gaussian_pdf",
    "gaussian_quantile",
    "interval_center",
    "build_codebook",
    "codebook_error",
    "cluster_1d",
]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_MIN_MASS = 1e-300


class Metric(str, enum.Enum):
    L1 = "L1"
    L2 = "L2"

    @property
    def code(self) -> int:
        return 0 if self is Metric.L1 else 1

    @classmethod
    def from_code(cls, code: int) -> "Metric":
        if code == 0:
            return cls.L1
        if code == 1:
            return cls.L2
        raise ValueError(f"unknown metric code {code}")


class ConvergenceError(RuntimeError):
    pass


def gaussian_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        out = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return out if out.ndim else float(out)


def gaussian_cdf(x):
    """Standard normal CDF; accepts scalars or arrays, ``±inf`` allowed."""
    out = ndtr(np.asarray(x, dtype=np.float64))
    return out if np.ndim(out) else float(out)


def gaussian_quantile(p):
    """Inverse standard normal CDF.

    Starts from the Cephes rational approximation and polishes it with two
    Newton steps on :func:`gaussian_cdf`.  Raises ``ValueError`` outside
    the open interval (0, 1).
    """
    arr = np.asarray(p, dtype=np.float64)
    if np.any(~(arr > 0.0)) or np.any(~(arr < 1.0)):
        raise ValueError("gaussian_quantile requires 0 < p < 1")
    # Newton in the lower tail only; the upper tail is handled by reflection
    # so that 1 - p never loses digits.
    upper = arr > 0.5
    q = np.where(upper, 1.0 - arr, arr)
    x = ndtri(q)
    for _ in range(2):
        dens = gaussian_pdf(x)
        step = np.where(dens > 0, (ndtr(x) - q) / np.where(dens > 0, dens, 1.0), 0.0)
        x = x - step
    x = np.where(upper, -x, x)
    if arr.ndim == 0:
        return float(x)
    return x


def _mass(a, b):
    # Phi(b) - Phi(a) computed on the side of zero where it is accurate.
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        flip = (a + b) > 0
        lo = np.where(flip, -b, a)
        hi = np.where(flip, -a, b)
    return ndtr(hi) - ndtr(lo)


def _centers(a, b, metric: Metric):
    """Vectorised :func:`interval_center` without validation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    # Reflect intervals lying mostly above zero into the lower tail.
    with np.errstate(invalid="ignore"):
        flip = (a + b) > 0
        flip = np.where(np.isnan(a + b), False, flip)
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    fa, fb = ndtr(lo), ndtr(hi)
    if metric is Metric.L1:
        c = ndtri(0.5 * (fa + fb))
    else:
        c = (gaussian_pdf(lo) - gaussian_pdf(hi)) / (fb - fa)
    return np.where(flip, -c, c)


def interval_center(a: float, b: float, metric: Metric | str = Metric.L1) -> float:
    """Median (``L1``) or mean (``L2``) of N(0, 1) restricted to ``(a, b]``."""
    metric = Metric(metric)
    if not a < b:
        raise ValueError(f"empty interval ({a}, {b}]")
    if float(_mass(a, b)) <= _MIN_MASS:
        raise ValueError(f"interval ({a}, {b}] carries no probability mass")
    return float(_centers(a, b, metric))


@dataclass(frozen=True)
class Codebook:
    bit_width: int
    metric: Metric
    codes: np.ndarray
    boundaries: np.ndarray
    iterations: int = 0

    @property
    def size(self) -> int:
        return len(self.codes)

    def lower_edges(self) -> np.ndarray:
        return np.concatenate([[-np.inf], self.boundaries])

    def upper_edges(self) -> np.ndarray:
        return np.concatenate([self.boundaries, [np.inf]])

    def assign(self, x) -> np.ndarray:
        """Index of the right-closed interval ``(t_{j-1}, t_j]`` holding each value."""
        return np.searchsorted(self.boundaries, np.asarray(x, dtype=np.float64), side="left")

    def to_dict(self) -> dict:
        return {
            "bit_width": self.bit_width,
            "metric": self.metric.value,
            "codes": [float(c) for c in self.codes],
            "boundaries": [float(t) for t in self.boundaries],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "Codebook":
        return cls(
            bit_width=int(d["bit_width"]),
            metric=Metric(d["metric"]),
            codes=np.asarray(d["codes"], dtype=np.float64),
            boundaries=np.asarray(d["boundaries"], dtype=np.float64),
        )

    @classmethod
    def from_codes(cls, codes, metric: Metric | str = Metric.L1, bit_width: int | None = None) -> "Codebook":
        codes = np.sort(np.asarray(codes, dtype=np.float64))
        if bit_width is None:
            bit_width = max(int(math.ceil(math.log2(len(codes)))), 0)
        return cls(bit_width, Metric(metric), codes, 0.5 * (codes[:-1] + codes[1:]))


def _lloyd_map(c: np.ndarray, metric: Metric) -> np.ndarray:
    t = 0.5 * (c[:-1] + c[1:])
    lo = np.concatenate([[-np.inf], t])
    hi = np.concatenate([t, [np.inf]])
    new = _centers(lo, hi, metric)
    # The Gaussian is symmetric, so is the fixed point.
    return 0.5 * (new - new[::-1])


def _lloyd_jacobian(c: np.ndarray, metric: Metric) -> np.ndarray:
    """Banded (tridiagonal) Jacobian of the Lloyd map, in solve_banded layout."""
    n = len(c)
    t = 0.5 * (c[:-1] + c[1:])
    lo = np.concatenate([[-np.inf], t])
    hi = np.concatenate([t, [np.inf]])
    f = _centers(lo, hi, metric)
    phi_lo = np.where(np.isinf(lo), 0.0, gaussian_pdf(np.where(np.isinf(lo), 0.0, lo)))
    phi_hi = np.where(np.isinf(hi), 0.0, gaussian_pdf(np.where(np.isinf(hi), 0.0, hi)))
    if metric is Metric.L1:
        dens = gaussian_pdf(f)
        d_lo = phi_lo / (2.0 * dens)
        d_hi = phi_hi / (2.0 * dens)
    else:
        mass = _mass(lo, hi)
        d_lo = np.where(np.isinf(lo), 0.0, phi_lo * (f - np.where(np.isinf(lo), 0.0, lo)) / mass)
        d_hi = np.where(np.isinf(hi), 0.0, phi_hi * (np.where(np.isinf(hi), 0.0, hi) - f) / mass)
    # F_i depends on t_{i-1} = (c_{i-1}+c_i)/2 and t_i = (c_i+c_{i+1})/2.
    ab = np.zeros((3, n))
    ab[1] = 0.5 * (d_lo + d_hi)
    ab[0, 1:] = 0.5 * d_hi[:-1]  # dF_i/dc_{i+1}
    ab[2, :-1] = 0.5 * d_lo[1:]  # dF_i/dc_{i-1}
    return ab


def build_codebook(
    bit_width: int,
    metric: Metric | str = Metric.L1,
    tol: float = 1e-9,
    max_iter: int = 10_000,
) -> Codebook:
    """Lloyd-optimal ``2**bit_width``-level codebook for N(0, 1).

    Codes are seeded at the Gaussian quantiles ``(2i-1)/(2B)``.  Each
    iteration evaluates the Lloyd map once; when a Newton step on the
    fixed-point residual (tridiagonal Jacobian) keeps the codes ordered and
    shrinks the residual it replaces the plain Lloyd update.  Iteration stops
    once a Lloyd update moves no code by more than ``tol``.
    """
    metric = Metric(metric)
    if not 1 <= bit_width <= 8:
        raise ValueError("bit_width must be between 1 and 8")
    n = 2**bit_width
    c = np.asarray(gaussian_quantile((2.0 * np.arange(1, n + 1) - 1.0) / (2.0 * n)))
    c = 0.5 * (c - c[::-1])
    for it in range(1, max_iter + 1):
        f = _lloyd_map(c, metric)
        resid = f - c
        if np.max(np.abs(resid)) < tol:
            c = f
            break
        candidate = f
        ab = _lloyd_jacobian(c, metric)
        ab[1] -= 1.0
        try:
            newton = c - solve_banded((1, 1), ab, resid)
        except (np.linalg.LinAlgError, ValueError):
            newton = None
        if newton is not None and np.all(np.isfinite(newton)) and np.all(np.diff(newton) > 0):
            newton = 0.5 * (newton - newton[::-1])
            if np.max(np.abs(_lloyd_map(newton, metric) - newton)) < np.max(np.abs(resid)):
                candidate = newton
        c = candidate
    else:
        raise ConvergenceError(f"codebook for b={bit_width} did not converge in {max_iter} iterations")
    return Codebook(bit_width, metric, c, 0.5 * (c[:-1] + c[1:]), iterations=it)


def _interval_error(a, b, c, metric: Metric) -> np.ndarray:
    """E[|Z - c|^p ; a < Z <= b] for Z ~ N(0, 1), closed form."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)

    def pdf(x):
        return np.where(np.isinf(x), 0.0, gaussian_pdf(np.where(np.isinf(x), 0.0, x)))

    def xpdf(x):
        return np.where(np.isinf(x), 0.0, np.where(np.isinf(x), 0.0, x) * pdf(x))

    if metric is Metric.L2:
        mass = _mass(a, b)
        first = pdf(a) - pdf(b)
        second = mass - (xpdf(b) - xpdf(a))
        return second - 2.0 * c * first + c * c * mass
    upper = pdf(c) - pdf(b) - c * _mass(c, b)
    lower = c * _mass(a, c) - (pdf(a) - pdf(c))
    return upper + lower


def codebook_error(cb: Codebook, metric: Metric | str | None = None) -> float:
    """Expected quantization error ``E|Z - Q(Z)|^p`` under N(0, 1)."""
    metric = cb.metric if metric is None else Metric(metric)
    terms = _interval_error(cb.lower_edges(), cb.upper_edges(), cb.codes, metric)
    return float(np.sum(terms))


@dataclass(frozen=True)
class Clustering:
    """Lloyd clustering of a sample; the PTQ counterpart of :class:`Codebook`."""

    codes: np.ndarray
    boundaries: np.ndarray
    metric: Metric
    requested: int
    iterations: int
    error: float
    reduced: bool = field(default=False)

    @property
    def size(self) -> int:
        return len(self.codes)

    def assign(self, x) -> np.ndarray:
        return np.searchsorted(self.boundaries, np.asarray(x, dtype=np.float64), side="left")

    def quantize(self, x) -> np.ndarray:
        return self.codes[self.assign(x)]

    def as_codebook(self, bit_width: int) -> Codebook:
        return Codebook(bit_width, self.metric, self.codes, self.boundaries, self.iterations)


def _empirical_error(x: np.ndarray, codes: np.ndarray, idx: np.ndarray, metric: Metric) -> float:
    diff = np.abs(x - codes[idx])
    return float(np.mean(diff if metric is Metric.L1 else diff * diff))


def cluster_1d(
    samples,
    n_clusters: int,
    metric: Metric | str = Metric.L2,
    tol: float = 1e-9,
    max_iter: int = 10_000,
) -> Clustering:
    """Lloyd clustering (k-means for ``L2``, k-medians for ``L1``) of 1-D data.

    Seeds are the empirical quantiles at ``(2i-1)/(2B)``.  If the sample has
    fewer distinct values than ``n_clusters`` the effective cluster count is
    reduced and ``reduced`` is set on the result.
    """
    metric = Metric(metric)
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("cluster_1d needs at least one sample")
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    distinct = np.unique(x)
    k = min(n_clusters, distinct.size)
    reduced = k < n_clusters
    if k == distinct.size:
        codes = distinct.copy()
    else:
        probs = (2.0 * np.arange(1, k + 1) - 1.0) / (2.0 * k)
        codes = np.quantile(x, probs)
        if np.unique(codes).size < k:
            # Heavy ties collapse quantile seeds; seed on the distinct values instead.
            codes = np.quantile(distinct, probs)
        codes = np.unique(codes)
        if codes.size < k:
            codes = distinct[np.linspace(0, distinct.size - 1, k).round().astype(int)]
    xs = np.sort(x)
    it = 0
    for it in range(1, max_iter + 1):
        bounds = 0.5 * (codes[:-1] + codes[1:])
        idx = np.searchsorted(bounds, xs, side="left")
        new = codes.copy()
        # xs sorted, so each cluster is a contiguous slice.
        edges = np.searchsorted(idx, np.arange(codes.size + 1), side="left")
        for j in range(codes.size):
            seg = xs[edges[j] : edges[j + 1]]
            if seg.size:
                # Offset by the first member so clusters of identical values stay exact.
                new[j] = np.median(seg) if metric is Metric.L1 else seg[0] + np.mean(seg - seg[0])
        new = np.sort(new)
        shift = np.max(np.abs(new - codes))
        codes = new
        if shift < tol:
            break
    else:
        raise ConvergenceError(f"cluster_1d did not converge in {max_iter} iterations")
    bounds = 0.5 * (codes[:-1] + codes[1:])
    idx = np.searchsorted(bounds, x, side="left")
    return Clustering(
        codes=codes,
        boundaries=bounds,
        metric=metric,
        requested=n_clusters,
        iterations=it,
        error=_empirical_error(x, codes, idx, metric),
        reduced=reduced,
    )
