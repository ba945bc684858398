"""Kernel density estimate of the real-state distribution and the SDW weight."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from obdlab.errors import DomainError, ShapeError

FALLBACK_BANDWIDTH = 1e-3
DENSITY_FLOOR = 1e-12
_LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True, eq=False)
class KdeModel:
    """Gaussian product kernel with one bandwidth per dimension.

    ``degenerate`` is set when some dimension had zero sample variance and
    fell back to ``FALLBACK_BANDWIDTH``.
    """

    samples: np.ndarray
    bandwidth: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        h = np.asarray(self.bandwidth, dtype=np.float64).reshape(-1)
        if x.shape[0] < 1:
            raise DomainError("a KDE needs at least one sample")
        if h.shape != (x.shape[1],):
            raise ShapeError(f"bandwidth must have {x.shape[1]} entries")
        if np.any(h <= 0):
            raise DomainError("bandwidths must be > 0")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "bandwidth", h)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def __call__(self, states) -> np.ndarray:
        return density(self, states)


def fit_kde(states, rule="scott") -> KdeModel:
    """Fit bandwidths by Scott's or Silverman's rule, or take them as given.

    ``rule`` is ``"scott"``, ``"silverman"``, or a positive float/array of
    fixed bandwidths.
    """
    x = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n, D = x.shape
    if isinstance(rule, str):
        if n < 2:
            raise DomainError("data-driven bandwidth rules need at least 2 samples")
        sigma = x.std(axis=0, ddof=1)
        if rule == "scott":
            factor = n ** (-1.0 / (D + 4))
        elif rule == "silverman":
            factor = (4.0 / (D + 2)) ** (1.0 / (D + 4)) * n ** (-1.0 / (D + 4))
        else:
            raise DomainError(f"unknown bandwidth rule {rule!r}")
        h = factor * sigma
        flat = ~(h > 0)
        if flat.any():
            warnings.warn("zero-variance state dimension; using fallback bandwidth", stacklevel=2)
            h = np.where(flat, FALLBACK_BANDWIDTH, h)
        return KdeModel(x, h, degenerate=bool(flat.any()))
    h = np.broadcast_to(np.asarray(rule, dtype=np.float64), (D,)).copy()
    return KdeModel(x, h)


def log_density(model: KdeModel, states, chunk: int = 512) -> np.ndarray:
    """log d(s) for a single state (D,) or a batch (N, D), computed stably."""
    q = np.asarray(states, dtype=np.float64)
    single = q.ndim == 1
    Q = q[None, :] if single else q
    if Q.shape[1] != model.dim:
        raise ShapeError(f"query dim {Q.shape[1]} != model dim {model.dim}")
    h = model.bandwidth
    n = model.samples.shape[0]
    norm = -0.5 * model.dim * _LOG_2PI - np.log(h).sum() - np.log(n)
    out = np.empty(Q.shape[0])
    scaled_x = model.samples / h
    for start in range(0, Q.shape[0], chunk):
        u = Q[start : start + chunk, None, :] / h - scaled_x[None, :, :]
        e = -0.5 * (u * u).sum(axis=2)
        top = e.max(axis=1)
        out[start : start + chunk] = top + np.log(np.exp(e - top[:, None]).sum(axis=1)) + norm
    return out[0] if single else out


def density(model: KdeModel, states) -> np.ndarray:
    """d(s) = (1/n) sum_i prod_j phi((s_j - x_ij) / h_j) / h_j."""
    return np.exp(log_density(model, states))


@dataclass(frozen=True)
class Histogram:
    bin_left: np.ndarray
    bin_right: np.ndarray
    density: np.ndarray

    def rows(self):
        return zip(self.bin_left.tolist(), self.bin_right.tolist(), self.density.tolist())


def log_density_histogram(model: KdeModel, states, n_bins: int = 30) -> Histogram:
    """Unit-area histogram of log d(s) over ``states``."""
    if n_bins < 1:
        raise DomainError("n_bins must be >= 1")
    values = log_density(model, np.atleast_2d(states))
    dens, edges = np.histogram(values, bins=n_bins, density=True)
    return Histogram(edges[:-1], edges[1:], dens)


def sdw_weight(q_value, d_s, tau: float):
    """q / d^tau, with d floored at ``DENSITY_FLOOR`` to survive underflow."""
    d = np.asarray(d_s, dtype=np.float64)
    if np.any(~(d > 0)):
        raise DomainError("density must be > 0")
    if tau < 0:
        raise DomainError("tau must be >= 0")
    w = np.asarray(q_value, dtype=np.float64) / np.maximum(d, DENSITY_FLOOR) ** tau
    return float(w) if w.ndim == 0 else w
