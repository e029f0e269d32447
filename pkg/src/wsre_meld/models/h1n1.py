"""H1N1 ICU (thinned Poisson process) and collapsed severity submodels.

ICU submodel, age groups a = 1 (children), 2 (adults), days t = 1..T::

    y[a, t] ~ Pois(eta[a, t])                          weekly t >= 8, last t = T
    eta[a, t] = sum_{u < t} lam[a, u] exp(-mu_a (t - u))
    log lam[a, 1] ~ Unif(0, 250)
    log lam[a, t] ~ N(log lam[a, t - 1], 1 / nu_a^2)
    nu_a ~ Unif(0.1, 2.7)
    mu_1 = exp(-alpha), mu_2 = exp(-(alpha + beta))
    alpha ~ N(2.7058, 0.0788^2), beta ~ N(-0.4969, 0.2048^2)
    z[a, v] ~ Bin(n[a, v], omega[a, v]),  omega[a, v] ~ Unif(0, 1)
    pipos[a, t] ~ Unif(omega[a, v(t)], 1)
    phi_a = sum_t pipos[a, t] lam[a, t]

``pipos`` is stored as ``u = (pipos - omega) / (1 - omega)``, which is
Unif(0, 1) given omega; the joint density is unchanged. The convolution
excludes ``u = t`` so that ``eta[a, 1] = 0``.

Severity submodel::

    phi_a ~ Bin(chi_a, pdet),  pdet ~ Beta(6, 4)
    chi_1 ~ LN(4.93, 0.17^2),  chi_2 ~ LN(7.71, 0.23^2)

``phi_a`` is real-valued, so the binomial coefficient is continued through
the gamma function: ``lgamma(chi + 1) - lgamma(phi + 1) - lgamma(chi - phi + 1)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from ..density import DensityModel
from ..mcmc import CustomBlock, RandomWalkBlock, componentwise_blocks

AGES = (1, 2)
ALPHA_PRIOR = (2.7058, 0.0788)
BETA_PRIOR = (-0.4969, 0.2048)
NU_RANGE = (0.1, 2.7)
LOGLAM1_RANGE = (0.0, 250.0)

CHI_PRIOR = ((4.93, 0.17), (7.71, 0.23))
PDET_PRIOR = (6.0, 4.0)

LOG_2PI = math.log(2 * math.pi)


def week_index(t: int) -> int:
    """Virology week for day ``t``: week 1 covers days 1-14."""
    if t < 1:
        raise ValueError("days start at 1")
    return 1 if t <= 14 else (t - 1) // 7


def observation_days(T: int):
    """Weekly observation days ending at the horizon, none before day 8."""
    return list(range(8 + (T - 8) % 7, T + 1, 7))


@dataclass
class IcuData:
    """Weekly ICU counts and virology swabs for a horizon of ``T`` days."""

    T: int
    icu: list            # rows (a, t, y)
    virology: list       # rows (a, v, z, n)
    truth: Optional[Dict] = field(default=None, compare=False)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("horizon must be positive")
        last = {}
        for a, t, y in self.icu:
            if a not in AGES:
                raise ValueError(f"age group must be 1 or 2, got {a}")
            if not 1 <= t <= self.T:
                raise ValueError(f"observation day {t} outside 1..{self.T}")
            if y < 0:
                raise ValueError(f"negative ICU count at a={a}, t={t}")
            if t <= last.get(a, 0):
                raise ValueError(f"observation days for age group {a} are not increasing at t={t}")
            last[a] = t
        for a, v, z, n in self.virology:
            if a not in AGES:
                raise ValueError(f"age group must be 1 or 2, got {a}")
            if not 0 <= z <= n:
                raise ValueError(f"virology counts need 0 <= z <= n at a={a}, v={v}")
            if not 1 <= v <= self.weeks:
                raise ValueError(f"virology week {v} outside 1..{self.weeks}")

    @property
    def weeks(self) -> int:
        return week_index(self.T)

    def to_csv(self, icu_path, virology_path):
        with open(icu_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["a", "t", "y"])
            w.writerows(self.icu)
        with open(virology_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["a", "v", "z", "n"])
            w.writerows(self.virology)

    @classmethod
    def from_csv(cls, icu_path, virology_path, T: int) -> "IcuData":
        def read(path, cols):
            rows = []
            with open(path, newline="") as fh:
                for line_no, row in enumerate(csv.DictReader(fh), start=2):
                    try:
                        rows.append(tuple(int(row[c]) for c in cols))
                    except (KeyError, ValueError, TypeError) as exc:
                        raise ValueError(f"{path}:{line_no}: bad row {row}") from exc
            return rows
        return cls(T, read(icu_path, ("a", "t", "y")), read(virology_path, ("a", "v", "z", "n")))


def eta_convolution(lam: np.ndarray, mu: float) -> np.ndarray:
    """Expected occupancy by the direct sum over earlier admissions."""
    T = lam.shape[0]
    out = np.zeros(T)
    for t in range(1, T + 1):
        out[t - 1] = sum(lam[u - 1] * math.exp(-mu * (t - u)) for u in range(1, t))
    return out


def eta_recursive(lam: np.ndarray, mu: float) -> np.ndarray:
    """``eta[t] = (eta[t-1] + lam[t-1]) exp(-mu)`` with ``eta[1] = 0``."""
    T = lam.shape[0]
    out = np.zeros(T)
    d = math.exp(-mu)
    for t in range(1, T):
        out[t] = (out[t - 1] + lam[t - 1]) * d
    return out


class IcuModel(DensityModel):
    """ICU submodel with data bound; phi = (phi_1, phi_2) is derived."""

    phi_names = ("phi1", "phi2")

    def __init__(self, data: IcuData):
        self.data = data
        T, V = data.T, data.weeks
        self.T, self.V = T, V
        names = []
        names += [f"loglam{a}_{t}" for a in AGES for t in range(1, T + 1)]
        names += [f"nu{a}" for a in AGES]
        names += ["alpha", "beta"]
        names += [f"omega{a}_{v}" for a in AGES for v in range(1, V + 1)]
        names += [f"u{a}_{t}" for a in AGES for t in range(1, T + 1)]
        self.names = tuple(names)
        i = 0
        self.sl_loglam = slice(i, i + 2 * T); i += 2 * T
        self.sl_nu = slice(i, i + 2); i += 2
        self.i_alpha, self.i_beta = i, i + 1; i += 2
        self.sl_omega = slice(i, i + 2 * V); i += 2 * V
        self.sl_u = slice(i, i + 2 * T); i += 2 * T

        lo = np.full(i, -np.inf)
        hi = np.full(i, np.inf)
        for a in range(2):
            lo[self.sl_loglam.start + a * T] = LOGLAM1_RANGE[0]
            hi[self.sl_loglam.start + a * T] = LOGLAM1_RANGE[1]
        lo[self.sl_nu], hi[self.sl_nu] = NU_RANGE
        lo[self.sl_omega], hi[self.sl_omega] = 0.0, 1.0
        lo[self.sl_u], hi[self.sl_u] = 0.0, 1.0
        self.lower, self.upper = lo, hi

        # observations per age group: day indices (0-based), counts
        self._obs = []
        for a in AGES:
            rows = [(t, y) for aa, t, y in data.icu if aa == a]
            ts = np.array([t for t, _ in rows], dtype=int)
            ys = np.array([y for _, y in rows], dtype=float)
            lag = ts[:, None] - np.arange(1, T + 1)[None, :]
            mask = lag > 0
            self._obs.append((ts, ys, np.where(mask, lag, 0).astype(float), mask,
                              float(sum(math.lgamma(y + 1) for y in ys))))
        self._vir = np.zeros((2, V, 2))  # z, n
        self._vir_logc = 0.0
        for a, v, z, n in data.virology:
            self._vir[a - 1, v - 1] += (z, n)
            self._vir_logc += math.lgamma(n + 1) - math.lgamma(z + 1) - math.lgamma(n - z + 1)
        self._week_of_day = np.array([week_index(t) - 1 for t in range(1, T + 1)])

    def unpack(self, theta):
        T, V = self.T, self.V
        loglam = theta[self.sl_loglam].reshape(2, T)
        nu = theta[self.sl_nu]
        omega = theta[self.sl_omega].reshape(2, V)
        u = theta[self.sl_u].reshape(2, T)
        return loglam, nu, theta[self.i_alpha], theta[self.i_beta], omega, u

    def exit_rates(self, alpha, beta):
        return math.exp(-alpha), math.exp(-(alpha + beta))

    def log_density(self, theta):
        theta = np.asarray(theta, dtype=float)
        loglam, nu, alpha, beta, omega, u = self.unpack(theta)
        if not (np.all((loglam[:, 0] > 0.0) & (loglam[:, 0] < 250.0))
                and np.all((nu > NU_RANGE[0]) & (nu < NU_RANGE[1]))
                and np.all((omega > 0.0) & (omega < 1.0))
                and np.all((u > 0.0) & (u < 1.0))):
            return -math.inf
        T = self.T
        lp = -2.0 * math.log(250.0) - 2.0 * math.log(NU_RANGE[1] - NU_RANGE[0])
        d = np.diff(loglam, axis=1)
        lp += float(np.sum((T - 1) * (np.log(nu) - 0.5 * LOG_2PI) - 0.5 * nu ** 2 * np.sum(d * d, axis=1)))
        lp += _normal_logpdf(alpha, *ALPHA_PRIOR) + _normal_logpdf(beta, *BETA_PRIOR)
        z, n = self._vir[..., 0], self._vir[..., 1]
        lp += self._vir_logc + float(np.sum(z * np.log(omega) + (n - z) * np.log1p(-omega)))
        lam = np.exp(loglam)
        mus = self.exit_rates(alpha, beta)
        for a in range(2):
            ts, ys, lag, mask, logfact = self._obs[a]
            if ts.size == 0:
                continue
            eta = np.sum(np.where(mask, np.exp(-mus[a] * lag), 0.0) * lam[a], axis=1)
            if np.any(eta <= 0.0):
                if np.any(ys[eta <= 0.0] > 0):
                    return -math.inf
            with np.errstate(divide="ignore"):
                ll = np.where(ys > 0, ys * np.log(eta), 0.0) - eta
            lp += float(np.sum(ll)) - logfact
        if not math.isfinite(lp):
            return -math.inf
        return lp

    def phi(self, theta):
        theta = np.asarray(theta, dtype=float)
        loglam, _, _, _, omega, u = self.unpack(theta)
        om = omega[:, self._week_of_day]
        pipos = om + (1.0 - om) * u
        return np.sum(pipos * np.exp(loglam), axis=1)

    def phi_batch(self, thetas):
        return np.array([self.phi(t) for t in np.asarray(thetas, dtype=float)])

    def initial_point(self):
        """A point near the data: flat admissions matching the first count."""
        T, V = self.T, self.V
        theta = np.empty(self.dim)
        mus = self.exit_rates(ALPHA_PRIOR[0], BETA_PRIOR[0])
        loglam = np.empty((2, T))
        for a in range(2):
            ts, ys, *_ = self._obs[a]
            level = max(float(np.mean(ys)) * mus[a], 2.0) if ys.size else 2.0
            loglam[a] = math.log(level)
        theta[self.sl_loglam] = loglam.reshape(-1)
        theta[self.sl_nu] = 2.0
        theta[self.i_alpha], theta[self.i_beta] = ALPHA_PRIOR[0], BETA_PRIOR[0]
        z, n = self._vir[..., 0], self._vir[..., 1]
        theta[self.sl_omega] = ((z + 1.0) / (n + 2.0)).reshape(-1)
        theta[self.sl_u] = 0.5
        return theta

    def sampler_blocks(self, step_size: float = 0.3):
        """Blocks for stage-one sampling.

        Random-walk updates for the admission paths and rate parameters, and
        exact conditional draws for ``omega`` (Beta posterior from the swabs)
        and ``u`` (uniform), which no other term touches. The exact draws are
        only valid when the target is the ICU posterior itself, not when it is
        divided by an estimate of the phi marginal.
        """
        rw = list(range(self.sl_loglam.start, self.sl_loglam.stop)) + \
            list(range(self.sl_nu.start, self.sl_nu.stop)) + [self.i_alpha, self.i_beta]
        blocks = componentwise_blocks(rw, step_size, self.names)
        om_idx = np.arange(self.sl_omega.start, self.sl_omega.stop)
        u_idx = np.arange(self.sl_u.start, self.sl_u.stop)
        z, n = self._vir[..., 0].reshape(-1), self._vir[..., 1].reshape(-1)

        def draw_omega(x, rng):
            xn = x.copy()
            xn[om_idx] = np.clip(rng.beta(z + 1.0, n - z + 1.0), 1e-12, 1 - 1e-12)
            return xn, True

        def draw_u(x, rng):
            xn = x.copy()
            xn[u_idx] = np.clip(rng.random(u_idx.size), 1e-12, 1 - 1e-12)
            return xn, True

        return blocks + [CustomBlock(draw_omega, om_idx, "omega"), CustomBlock(draw_u, u_idx, "u")]


def _normal_logpdf(x, m, s):
    return -0.5 * LOG_2PI - math.log(s) - 0.5 * ((x - m) / s) ** 2


def h1n1_icu(data: IcuData) -> IcuModel:
    return IcuModel(data)


class SeverityModel(DensityModel):
    """Collapsed severity submodel over ``(phi1, phi2, chi1, chi2, pdet)``; no data."""

    names = ("phi1", "phi2", "chi1", "chi2", "pdet")
    phi_names = ("phi1", "phi2")
    phi_index = (0, 1)

    def __init__(self):
        self.lower = np.zeros(5)
        self.upper = np.array([np.inf, np.inf, np.inf, np.inf, 1.0])
        self._beta_norm = math.lgamma(sum(PDET_PRIOR)) - math.lgamma(PDET_PRIOR[0]) - math.lgamma(PDET_PRIOR[1])

    def log_density(self, theta):
        p1, p2, c1, c2, pd = (float(v) for v in theta)
        if not (0.0 < pd < 1.0 and c1 > 0.0 and c2 > 0.0 and 0.0 <= p1 <= c1 and 0.0 <= p2 <= c2):
            return -math.inf
        a, b = PDET_PRIOR
        lp = self._beta_norm + (a - 1.0) * math.log(pd) + (b - 1.0) * math.log1p(-pd)
        lq, lr = math.log(pd), math.log1p(-pd)
        for phi, chi, (m, s) in ((p1, c1, CHI_PRIOR[0]), (p2, c2, CHI_PRIOR[1])):
            lc = math.log(chi)
            lp += -lc - math.log(s) - 0.5 * LOG_2PI - 0.5 * ((lc - m) / s) ** 2
            lp += (math.lgamma(chi + 1.0) - math.lgamma(phi + 1.0) - math.lgamma(chi - phi + 1.0)
                   + phi * lq + (chi - phi) * lr)
        return lp

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Forward draws of theta.

        phi is drawn as an integer binomial count on ``floor(chi)`` trials plus
        a Unif(0, 1) jitter, capped at chi; this matches the continued density
        to within one count.
        """
        pd = rng.beta(*PDET_PRIOR, size=n)
        chi = np.column_stack([np.exp(rng.normal(m, s, size=n)) for m, s in CHI_PRIOR])
        k = rng.binomial(np.floor(chi).astype(np.int64), pd[:, None])
        phi = np.minimum(k + rng.random((n, 2)), chi)
        return np.column_stack([phi, chi, pd])

    def initial_for_phi(self, phi) -> np.ndarray:
        p = np.asarray(phi, dtype=float).reshape(2)
        chi = np.maximum(p / 0.6, p + 1.0)
        return np.array([p[0], p[1], chi[0], chi[1], 0.6])

    def initial_point(self):
        return self.initial_for_phi([83.0, 1339.0])


def h1n1_severity() -> SeverityModel:
    return SeverityModel()


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

#: totals of new admissions over the horizon and virology design per age group
SYNTH_TOTALS = (190.0, 1600.0)
SYNTH_OMEGA = (0.75, 0.7)
SYNTH_SWABS = (10, 120)


def synthetic_truth(T: int) -> dict:
    """Fixed generating parameters for the synthetic ICU data."""
    t = np.arange(1, T + 1)
    g = np.exp(-0.5 * ((t - 0.45 * T) / (0.22 * T)) ** 2) + 0.02
    lam = np.array([tot * g / g.sum() for tot in SYNTH_TOTALS])
    V = week_index(T)
    omega = np.array([[w] * V for w in SYNTH_OMEGA])
    week = np.array([week_index(d) - 1 for d in t])
    pipos = omega[:, week] + 0.5 * (1.0 - omega[:, week])
    alpha, beta = ALPHA_PRIOR[0], BETA_PRIOR[0]
    return {
        "T": T,
        "lam": lam,
        "alpha": alpha,
        "beta": beta,
        "omega": omega,
        "pipos": pipos,
        "phi": np.sum(pipos * lam, axis=1),
    }


def h1n1_synthetic(seed: int, T: int = 28) -> IcuData:
    """Simulate weekly ICU counts and virology swabs from :func:`synthetic_truth`."""
    if T < 14:
        raise ValueError("horizon must be at least 14 days")
    truth = synthetic_truth(T)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    mus = (math.exp(-truth["alpha"]), math.exp(-(truth["alpha"] + truth["beta"])))
    icu = []
    for a in AGES:
        eta = eta_recursive(truth["lam"][a - 1], mus[a - 1])
        for t in observation_days(T):
            icu.append((a, t, int(rng.poisson(eta[t - 1]))))
    vir = []
    for a in AGES:
        for v in range(1, week_index(T) + 1):
            n = SYNTH_SWABS[a - 1]
            vir.append((a, v, int(rng.binomial(n, truth["omega"][a - 1, v - 1])), n))
    return IcuData(T, icu, vir, truth=truth)
