"""Model and self-density-ratio contracts shared by every other module.

All densities are handled in log space. A :class:`DensityModel` evaluates an
unnormalised log joint density over a flat parameter vector ``theta`` and
knows how to extract the common quantity ``phi`` from it. A
:class:`RatioEvaluator` returns ``log p(phi_nu) - log p(phi_de)`` for some
marginal density ``p`` that may only be known through an estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class MeldError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(MeldError, ValueError):
    pass


class OutOfSupportError(MeldError, ValueError):
    """A density was evaluated where it is zero and the caller needs a finite value."""


class SamplerError(MeldError, RuntimeError):
    pass


def as_point(x, dim: Optional[int] = None) -> np.ndarray:
    """Coerce ``x`` to a finite 1-D float array, checking its dimension."""
    p = np.atleast_1d(np.asarray(x, dtype=float))
    if p.ndim != 1:
        raise DimensionError(f"expected a 1-D point, got shape {p.shape}")
    if dim is not None and p.shape[0] != dim:
        raise DimensionError(f"expected dimension {dim}, got {p.shape[0]}")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"point has non-finite entries: {p}")
    return p


def as_points(x, dim: Optional[int] = None) -> np.ndarray:
    """Coerce to an (m, d) float array; 1-D input is read as m points in 1-D."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a[:, None] if (dim is None or dim == 1) else a[None, :]
    if a.ndim != 2:
        raise DimensionError(f"expected (m, d) points, got shape {a.shape}")
    if dim is not None and a.shape[1] != dim:
        raise DimensionError(f"expected dimension {dim}, got {a.shape[1]}")
    return a


# ---------------------------------------------------------------------------
# Parameter transforms used by the samplers
# ---------------------------------------------------------------------------


class BoxTransform:
    """Coordinate-wise bijection between a box and R^d.

    Unbounded coordinates are left alone, half-bounded ones go through a log,
    and doubly bounded ones through a scaled logit.
    """

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise DimensionError("lower and upper bounds must be 1-D and equal length")
        if np.any(self.lower >= self.upper):
            raise ValueError("every lower bound must be below its upper bound")
        lo_f = np.isfinite(self.lower)
        hi_f = np.isfinite(self.upper)
        self._lo = np.flatnonzero(lo_f & ~hi_f)
        self._hi = np.flatnonzero(~lo_f & hi_f)
        self._both = np.flatnonzero(lo_f & hi_f)
        self._width = self.upper[self._both] - self.lower[self._both]
        self._log_width = np.log(self._width)
        self.identity = self._lo.size == 0 and self._hi.size == 0 and self._both.size == 0

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def to_unconstrained(self, x: np.ndarray) -> np.ndarray:
        z = np.array(x, dtype=float)
        if self.identity:
            return z
        with np.errstate(divide="ignore", invalid="ignore"):
            z[self._lo] = np.log(x[self._lo] - self.lower[self._lo])
            z[self._hi] = np.log(self.upper[self._hi] - x[self._hi])
            t = (x[self._both] - self.lower[self._both]) / self._width
            z[self._both] = np.log(t) - np.log1p(-t)
        return z

    def from_unconstrained(self, z: np.ndarray):
        """Return ``(x, log|dx/dz|)``."""
        if self.identity:
            return np.array(z, dtype=float), 0.0
        x = np.array(z, dtype=float)
        logj = 0.0
        if self._lo.size:
            zl = z[self._lo]
            x[self._lo] = self.lower[self._lo] + np.exp(zl)
            logj += float(np.sum(zl))
        if self._hi.size:
            zh = z[self._hi]
            x[self._hi] = self.upper[self._hi] - np.exp(zh)
            logj += float(np.sum(zh))
        if self._both.size:
            zb = z[self._both]
            x[self._both] = self.lower[self._both] + self._width / (1.0 + np.exp(-zb))
            # log sigmoid(z) + log sigmoid(-z)
            logj += float(np.sum(self._log_width - np.logaddexp(0.0, -zb) - np.logaddexp(0.0, zb)))
        return x, logj


# ---------------------------------------------------------------------------
# Density models
# ---------------------------------------------------------------------------


class DensityModel:
    """Unnormalised log joint density over a flat parameter vector.

    Subclasses set ``names`` and the box ``lower``/``upper``, implement
    :meth:`log_density`, and either set ``phi_index`` (when phi is a block of
    free coordinates) or override :meth:`phi` (when it is a derived quantity).
    ``log_density`` must return ``-inf`` off the support and never NaN.
    """

    names: tuple = ()
    phi_names: tuple = ()
    phi_index: Optional[tuple] = None

    lower: np.ndarray
    upper: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def dim_phi(self) -> int:
        return len(self.phi_names)

    def log_density(self, theta: np.ndarray) -> float:
        raise NotImplementedError

    def phi(self, theta: np.ndarray) -> np.ndarray:
        if self.phi_index is None:
            raise NotImplementedError(f"{type(self).__name__} must define phi()")
        return np.asarray(theta, dtype=float)[list(self.phi_index)]

    def phi_batch(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.asarray(thetas, dtype=float)
        if self.phi_index is not None:
            return thetas[:, list(self.phi_index)]
        return np.array([self.phi(t) for t in thetas]).reshape(len(thetas), self.dim_phi)

    def in_support(self, theta) -> bool:
        return bool(np.isfinite(self.log_density(np.asarray(theta, dtype=float))))

    def initial_point(self) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no default initial point")

    def transform(self) -> BoxTransform:
        return BoxTransform(self.lower, self.upper)

    def check_theta(self, theta) -> np.ndarray:
        t = np.asarray(theta, dtype=float)
        if t.shape != (self.dim,):
            raise DimensionError(f"{type(self).__name__} expects {self.dim} coordinates, got shape {t.shape}")
        return t


class FunctionModel(DensityModel):
    """A :class:`DensityModel` built from a plain callable (handy in tests)."""

    def __init__(self, log_density: Callable[[np.ndarray], float], names: Sequence[str],
                 phi_index: Sequence[int] = (0,), lower=None, upper=None):
        self._f = log_density
        self.names = tuple(names)
        self.phi_index = tuple(phi_index)
        self.phi_names = tuple(self.names[i] for i in self.phi_index)
        d = len(self.names)
        self.lower = np.full(d, -np.inf) if lower is None else np.asarray(lower, dtype=float)
        self.upper = np.full(d, np.inf) if upper is None else np.asarray(upper, dtype=float)

    def log_density(self, theta):
        v = float(self._f(theta))
        if np.isnan(v):
            raise ValueError("log density returned NaN")
        return v


@dataclass(frozen=True)
class SampleSet:
    """Draws of phi with provenance."""

    draws: np.ndarray
    label: str = ""
    seed: Optional[int] = None
    ess: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = as_points(self.draws)
        if d.shape[0] < 1:
            raise ValueError("a sample set needs at least one draw")
        if not np.all(np.isfinite(d)):
            raise ValueError("sample set contains non-finite draws")
        d.setflags(write=False)
        object.__setattr__(self, "draws", d)

    def __len__(self):
        return self.draws.shape[0]

    @property
    def dim(self) -> int:
        return self.draws.shape[1]


# ---------------------------------------------------------------------------
# Ratio evaluators
# ---------------------------------------------------------------------------


class RatioEvaluator:
    """Self-density ratio ``log p(phi_nu) - log p(phi_de)``.

    ``kind`` is one of analytic, naive, wsre-single, wsre-combined, constant
    (pooled and scaled evaluators report a compound tag). ``dim`` is None for
    evaluators that accept any dimension.
    """

    kind: str = "abstract"
    dim: Optional[int] = None

    def log_ratio(self, phi_nu, phi_de) -> float:
        nu = as_point(phi_nu, self.dim)
        de = as_point(phi_de, self.dim)
        if nu.shape != de.shape:
            raise DimensionError("numerator and denominator points differ in dimension")
        if np.array_equal(nu, de):
            return 0.0
        return self._log_ratio(nu, de)

    def ratio(self, phi_nu, phi_de) -> float:
        return float(np.exp(self.log_ratio(phi_nu, phi_de)))

    def _log_ratio(self, nu: np.ndarray, de: np.ndarray) -> float:
        raise NotImplementedError

    def bind(self, points) -> "BoundRatio":
        """Precompute whatever is needed to evaluate ratios between fixed points."""
        return _GenericBound(self, as_points(points, self.dim))


class BoundRatio:
    """Ratio evaluator restricted to a fixed set of points, addressed by index."""

    points: np.ndarray

    def log_ratio_idx(self, i: int, j: int) -> float:
        raise NotImplementedError


class _GenericBound(BoundRatio):
    def __init__(self, ev: RatioEvaluator, points: np.ndarray):
        self.ev = ev
        self.points = points

    def log_ratio_idx(self, i, j):
        if i == j:
            return 0.0
        return self.ev.log_ratio(self.points[i], self.points[j])


class UnaryRatio(RatioEvaluator):
    """Ratio that is a difference ``f(nu) - f(de)`` of one log function.

    Subclasses implement :meth:`log_unnorm` over an (m, d) batch.
    """

    def log_unnorm(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _log_ratio(self, nu, de):
        f = self.log_unnorm(np.stack([nu, de]))
        return _difference(float(f[0]), float(f[1]), de)

    def bind(self, points):
        pts = as_points(points, self.dim)
        return _UnaryBound(pts, np.asarray(self.log_unnorm(pts), dtype=float))


def _difference(f_nu: float, f_de: float, de) -> float:
    if np.isnan(f_nu) or np.isnan(f_de):
        raise ValueError("log density evaluated to NaN")
    if f_de == -np.inf:
        raise OutOfSupportError(f"denominator point {de} is outside the support")
    return f_nu - f_de


class _UnaryBound(BoundRatio):
    def __init__(self, points, values):
        self.points = points
        self.values = values

    def log_ratio_idx(self, i, j):
        if i == j:
            return 0.0
        return _difference(self.values[i], self.values[j], self.points[j])


class AnalyticRatio(UnaryRatio):
    kind = "analytic"

    def __init__(self, log_density_marginal: Callable[[np.ndarray], float], dim: int = 1):
        self._f = log_density_marginal
        self.dim = dim

    def log_unnorm(self, points):
        pts = as_points(points, self.dim)
        return np.array([float(self._f(p if self.dim > 1 else p[0])) for p in pts])


class ConstantRatio(RatioEvaluator):
    kind = "constant"

    def __init__(self, dim: Optional[int] = None):
        self.dim = dim

    def _log_ratio(self, nu, de):
        return 0.0

    def bind(self, points):
        return _UnaryBound(as_points(points, self.dim), np.zeros(len(as_points(points, self.dim))))


class ScaledRatio(RatioEvaluator):
    """``base ** exponent`` in ratio form."""

    def __init__(self, base: RatioEvaluator, exponent: float):
        if not np.isfinite(exponent):
            raise ValueError("exponent must be finite")
        self.base = base
        self.exponent = float(exponent)
        self.dim = base.dim
        self.kind = base.kind

    def _log_ratio(self, nu, de):
        if self.exponent == 0.0:
            return 0.0
        return self.exponent * self.base.log_ratio(nu, de)

    def bind(self, points):
        return _ScaledBound(self.base.bind(points), self.exponent)


class _ScaledBound(BoundRatio):
    def __init__(self, base: BoundRatio, exponent: float):
        self.base = base
        self.points = base.points
        self.exponent = exponent

    def log_ratio_idx(self, i, j):
        if i == j or self.exponent == 0.0:
            return 0.0
        return self.exponent * self.base.log_ratio_idx(i, j)


def analytic_ratio(log_density_marginal: Callable, dim: int = 1) -> AnalyticRatio:
    """Ratio evaluator from a known log marginal density (up to a constant).

    For ``dim == 1`` the callable receives a scalar, otherwise a 1-D array.
    """
    return AnalyticRatio(log_density_marginal, dim)


def constant_ratio(dim: Optional[int] = None) -> ConstantRatio:
    return ConstantRatio(dim)


def pow_ratio(base: RatioEvaluator, exponent: float) -> ScaledRatio:
    return ScaledRatio(base, exponent)
