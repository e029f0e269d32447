"""Gaussian kernel density estimators.

Two estimators share one implementation: the standard KDE
``(1/N) sum_n K_h(x - x_n)`` and the inverse-weighted (Jones) estimator
``sum_n K_h(x - x_n) / w(x_n)``, which is left unnormalised on purpose.
``K_h`` is a product of normal densities with standard deviation ``h_j`` in
dimension ``j``.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.special import logsumexp as log_sum_exp

from .density import SampleSet, UnaryRatio, as_point, as_points

LOG_2PI = math.log(2.0 * math.pi)

# elements per chunk of the (points x samples) kernel matrix
_CHUNK = 1 << 21


def bandwidth_rule(sample) -> np.ndarray:
    """Per-dimension Silverman rule ``0.9 min(sd, IQR/1.34) N^(-1/5)``."""
    x = as_points(sample.draws if isinstance(sample, SampleSet) else sample)
    n = x.shape[0]
    if n < 2:
        raise ValueError("bandwidth rule needs at least two draws")
    sd = np.std(x, axis=0, ddof=1)
    if np.any(~(sd > 0)):
        raise ValueError("degenerate sample: zero spread in at least one dimension")
    q75, q25 = np.percentile(x, [75, 25], axis=0)
    iqr = (q75 - q25) / 1.34
    # a zero IQR (heavy ties) would give h = 0; fall back to the sd there
    spread = np.where(iqr > 0, np.minimum(sd, iqr), sd)
    return 0.9 * spread * n ** (-0.2)


def log_kernel_matrix(points: np.ndarray, centres: np.ndarray, bandwidth: np.ndarray) -> np.ndarray:
    """``log K_h(points[i] - centres[n])`` as an (m, N) array."""
    z = (points[:, None, :] - centres[None, :, :]) / bandwidth
    const = -0.5 * LOG_2PI * bandwidth.shape[0] - float(np.sum(np.log(bandwidth)))
    return const - 0.5 * np.einsum("mnd,mnd->mn", z, z)


class GaussianKde:
    """Gaussian KDE over a fixed sample with diagonal bandwidth.

    With ``log_inv_weights`` (the values ``-log w(x_n)``) it is the Jones
    estimator and only :meth:`log_unnorm` is meaningful; otherwise
    :meth:`logpdf` gives the normalised standard estimate.

    The sample is stored in lexicographic order so every evaluation is
    invariant to the order in which draws were supplied.
    """

    def __init__(self, sample, bandwidth=None, log_inv_weights=None):
        x = as_points(sample.draws if isinstance(sample, SampleSet) else sample)
        if x.shape[0] < 1:
            raise ValueError("KDE needs a non-empty sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("KDE sample contains non-finite values")
        if log_inv_weights is not None:
            liw = np.asarray(log_inv_weights, dtype=float).reshape(-1)
            if liw.shape[0] != x.shape[0]:
                raise ValueError("need one weight per draw")
            if not np.all(np.isfinite(liw)):
                raise ValueError("inverse weights must all be finite")
        else:
            liw = None
        if bandwidth is None:
            h = bandwidth_rule(x)
        else:
            h = np.broadcast_to(np.asarray(bandwidth, dtype=float), (x.shape[1],)).copy()
        if np.any(~(h > 0)) or not np.all(np.isfinite(h)):
            raise ValueError("bandwidth must be positive and finite in every dimension")

        keys = [x[:, j] for j in reversed(range(x.shape[1]))]
        if liw is not None:
            keys = [liw] + keys
        order = np.lexsort(keys)
        self.sample = x[order]
        self.log_inv_weights = None if liw is None else liw[order]
        self.bandwidth = h
        self.sample.setflags(write=False)

    @property
    def n(self) -> int:
        return self.sample.shape[0]

    @property
    def dim(self) -> int:
        return self.sample.shape[1]

    @property
    def weighted(self) -> bool:
        return self.log_inv_weights is not None

    def _lse(self, points, extra) -> np.ndarray:
        pts = as_points(points, self.dim)
        out = np.empty(pts.shape[0])
        step = max(1, _CHUNK // max(1, self.n * self.dim))
        for s in range(0, pts.shape[0], step):
            lk = log_kernel_matrix(pts[s:s + step], self.sample, self.bandwidth)
            if extra is not None:
                lk += extra
            out[s:s + step] = log_sum_exp(lk, axis=1)
        return out

    def logpdf(self, points) -> np.ndarray:
        """Standard KDE ``log (1/N) sum_n K_h(x - x_n)``."""
        if self.weighted:
            raise ValueError("logpdf is the unweighted estimator; use log_unnorm")
        return self._lse(points, None) - math.log(self.n)

    def log_unnorm(self, points) -> np.ndarray:
        """Jones estimator ``log sum_n K_h(x - x_n) / w(x_n)`` without normalisation."""
        return self._lse(points, self.log_inv_weights)


def kde_logpdf(est: GaussianKde, phi) -> float:
    return float(est.logpdf(as_point(phi, est.dim)[None, :])[0])


def weighted_kde_log_unnorm(est: GaussianKde, phi) -> float:
    return float(est.log_unnorm(as_point(phi, est.dim)[None, :])[0])


def gaussian_product_params(phi_n: float, h: float, mu: float, sigma2: float):
    """Product of ``N(x; phi_n, h^2)`` and ``N(x; mu, sigma2)``.

    Returns ``(log S, mu_p, sigma_p^2)`` with the product equal to
    ``S * N(x; mu_p, sigma_p^2)``.
    """
    if not (h > 0 and sigma2 > 0):
        raise ValueError("h and sigma2 must be positive")
    h2 = h * h
    tot = h2 + sigma2
    log_s = -0.5 * math.log(2.0 * math.pi * tot) - (phi_n - mu) ** 2 / (2.0 * tot)
    mu_p = (h2 * mu + sigma2 * phi_n) / tot
    var_p = h2 * sigma2 / tot
    return log_s, mu_p, var_p


class NaiveKdeRatio(UnaryRatio):
    """Ratio of a standard KDE at two points."""

    kind = "naive"

    def __init__(self, sample, bandwidth=None):
        self.kde = GaussianKde(sample, bandwidth)
        self.dim = self.kde.dim
        self.label = getattr(sample, "label", "")

    def log_unnorm(self, points):
        return self.kde.logpdf(points)


def naive_ratio(sample, bandwidth: Optional[np.ndarray] = None) -> NaiveKdeRatio:
    """Naive self-density ratio estimate from direct draws of the marginal."""
    return NaiveKdeRatio(sample, bandwidth)
