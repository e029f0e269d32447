"""Bivariate Gaussian test bed with a known standard-normal phi marginal."""

from __future__ import annotations

import math

import numpy as np

from ..density import DensityModel, analytic_ratio


class GaussianTestbed(DensityModel):
    """``(phi, gamma)`` jointly normal, unit variances, correlation ``rho``."""

    names = ("phi", "gamma")
    phi_names = ("phi",)
    phi_index = (0,)

    def __init__(self, rho: float = 0.5):
        if not abs(rho) < 1:
            raise ValueError("correlation must lie in (-1, 1)")
        self.rho = float(rho)
        self.lower = np.full(2, -np.inf)
        self.upper = np.full(2, np.inf)
        self._c = 1.0 / (1.0 - self.rho ** 2)
        self._logz = -math.log(2 * math.pi) - 0.5 * math.log(1.0 - self.rho ** 2)

    def log_density(self, theta):
        p, g = theta[0], theta[1]
        return self._logz - 0.5 * self._c * (p * p - 2.0 * self.rho * p * g + g * g)

    def initial_point(self):
        return np.zeros(2)

    def sample_direct(self, n: int, rng: np.random.Generator) -> np.ndarray:
        cov = np.array([[1.0, self.rho], [self.rho, 1.0]])
        return rng.multivariate_normal(np.zeros(2), cov, size=n)

    def sample_marginal(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, 1))

    def marginal_ratio(self):
        return analytic_ratio(standard_normal_logpdf)

    @staticmethod
    def weighted_marginal(mean: float, var: float):
        """Mean and variance of the phi marginal after tilting by ``N(mean, var)``."""
        return mean / (1.0 + var), var / (1.0 + var)


def standard_normal_logpdf(x) -> float:
    return -0.5 * math.log(2 * math.pi) - 0.5 * float(x) ** 2


def gaussian_testbed(rho: float = 0.5):
    """Return the joint model and the analytic phi-marginal ratio evaluator."""
    m = GaussianTestbed(rho)
    return m, m.marginal_ratio()


class FlatModel(DensityModel):
    """Improper flat density over R^d; phi is the whole vector."""

    def __init__(self, dim: int = 1):
        self.names = tuple(f"phi{i + 1}" if dim > 1 else "phi" for i in range(dim))
        self.phi_names = self.names
        self.phi_index = tuple(range(dim))
        self.lower = np.full(dim, -np.inf)
        self.upper = np.full(dim, np.inf)

    def log_density(self, theta):
        return 0.0

    def initial_point(self):
        return np.zeros(self.dim)
