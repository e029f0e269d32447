"""HIV prenatal-screening evidence synthesis (Ades & Cliffe) and its split.

Nine basic parameters ``rho_1..rho_9`` map to twelve study proportions
``pi_1..pi_12``; study ``s`` observes ``y_s ~ Bin(n_s, pi_s)``. The model is
split at ``phi = pi_12``:

* ``full``: all twelve studies, ``theta = rho``.
* ``sub1``: studies 1-11, ``theta = rho``, ``phi = pi_12(rho)`` derived.
* ``sub2``: study 12 alone, ``theta = (pi_12,)`` with a Beta(1, 1) prior.

``rho_1..rho_8`` have Beta(1, 1) priors and ``rho_9`` a Beta(3, 1) prior,
truncated to ``rho_1 + rho_2 < 1``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..density import DensityModel, analytic_ratio

STUDIES = 12

DEFAULT_Y = (11044, 12, 252, 10, 74, 254, 43, 4, 87, 12, 14, 5)
DEFAULT_N = (104577, 882, 15428, 473, 136139, 102287, 60, 17, 254, 15, 118, 31)

RHO_NAMES = tuple(f"rho{i}" for i in range(1, 10))

# Beta(a, b) prior parameters for rho_1..rho_9
PRIOR_A = (1.0,) * 8 + (3.0,)
PRIOR_B = (1.0,) * 9


class LinkError(ValueError):
    pass


@dataclass(frozen=True)
class HivData:
    y: tuple = DEFAULT_Y
    n: tuple = DEFAULT_N

    def __post_init__(self):
        if len(self.y) != STUDIES or len(self.n) != STUDIES:
            raise ValueError("HIV data needs exactly 12 studies")
        for s, (y, n) in enumerate(zip(self.y, self.n), start=1):
            if not (0 <= y <= n) or int(y) != y or int(n) != n:
                raise ValueError(f"study {s}: need integers 0 <= y <= n, got y={y}, n={n}")

    @classmethod
    def from_csv(cls, path) -> "HivData":
        rows = {}
        with open(path, newline="") as fh:
            for line_no, row in enumerate(csv.DictReader(fh), start=2):
                try:
                    rows[int(row["study"])] = (int(row["y"]), int(row["n"]))
                except (KeyError, ValueError, TypeError) as exc:
                    raise ValueError(f"{path}:{line_no}: bad row {row}") from exc
        if sorted(rows) != list(range(1, STUDIES + 1)):
            raise ValueError(f"{path}: need studies 1..12, got {sorted(rows)}")
        return cls(tuple(rows[s][0] for s in range(1, 13)), tuple(rows[s][1] for s in range(1, 13)))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["study", "y", "n"])
            for s in range(STUDIES):
                w.writerow([s + 1, self.y[s], self.n[s]])


def _links(r):
    r1, r2, r3, r4, r5, r6, r7, r8, r9 = r
    rest = 1.0 - r1 - r2
    a = r3 * r1
    b = r4 * r2
    c = r5 * rest
    prev = a + b + c
    da, db, dc = r6 * a, r7 * b, r8 * c
    diag = da + db + dc
    return (
        r1,
        r2,
        r3,
        r4,
        (b + c) / (1.0 - r1),
        prev,
        da / diag,
        db / (db + dc),
        diag / prev,
        r7,
        r9,
        (b + r9 * c) / (b + c),
    )


def pi12(rho) -> float:
    r1, r2, r4, r5, r9 = rho[0], rho[1], rho[3], rho[4], rho[8]
    b = r4 * r2
    c = r5 * (1.0 - r1 - r2)
    return (b + r9 * c) / (b + c)


def hiv_links(rho: Sequence[float]) -> np.ndarray:
    """Study proportions ``pi_1..pi_12`` from basic parameters ``rho_1..rho_9``."""
    r = np.asarray(rho, dtype=float)
    if r.shape != (9,):
        raise LinkError(f"need 9 basic parameters, got shape {r.shape}")
    for i, v in enumerate(r, start=1):
        if not (0.0 <= v <= 1.0):
            raise LinkError(f"rho{i} = {v} is outside [0, 1]")
    if not r[0] + r[1] < 1.0:
        raise LinkError("rho1 + rho2 must be below 1")
    with np.errstate(all="ignore"):
        try:
            pis = _links([float(v) for v in r])
        except ZeroDivisionError:
            pis = None
    if pis is None:
        raise LinkError("a link denominator is zero")
    for s, p in enumerate(pis, start=1):
        if not (0.0 <= p <= 1.0) or math.isnan(p):
            raise LinkError(f"pi{s} = {p} is outside [0, 1]")
    return np.array(pis)


def _log_choose(n, y):
    return math.lgamma(n + 1) - math.lgamma(y + 1) - math.lgamma(n - y + 1)


def _binom_kernel(y, n, p):
    # y log p + (n - y) log(1 - p) with 0 log 0 = 0
    if p <= 0.0:
        return 0.0 if y == 0 else -math.inf
    if p >= 1.0:
        return 0.0 if y == n else -math.inf
    return y * math.log(p) + (n - y) * math.log1p(-p)


class HivModel(DensityModel):
    """One variant of the HIV model; see the module docstring."""

    phi_names = ("pi12",)

    def __init__(self, data: Optional[HivData] = None, variant: str = "full", prior_only: bool = False):
        if variant not in ("full", "sub1", "sub2"):
            raise ValueError(f"unknown HIV variant {variant!r}; use full, sub1 or sub2")
        self.data = data or HivData()
        self.variant = variant
        self.prior_only = prior_only
        self._logc = [_log_choose(n, y) for y, n in zip(self.data.y, self.data.n)]
        if variant == "sub2":
            self.names = ("pi12",)
            self.phi_index = (0,)
            self.lower = np.zeros(1)
            self.upper = np.ones(1)
            self._studies = (11,)
        else:
            self.names = RHO_NAMES
            self.phi_index = None
            self.lower = np.zeros(9)
            self.upper = np.ones(9)
            self._studies = tuple(range(12 if variant == "full" else 11))
        if prior_only:
            self._studies = ()
        self._log_beta_norm = [math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                               for a, b in zip(PRIOR_A, PRIOR_B)]

    def phi(self, theta):
        if self.variant == "sub2":
            return np.array([theta[0]], dtype=float)
        return np.array([pi12(theta)])

    def phi_batch(self, thetas):
        t = np.asarray(thetas, dtype=float)
        if self.variant == "sub2":
            return t[:, :1].copy()
        b = t[:, 3] * t[:, 1]
        c = t[:, 4] * (1.0 - t[:, 0] - t[:, 1])
        return ((b + t[:, 8] * c) / (b + c))[:, None]

    def log_prior(self, theta) -> float:
        if self.variant == "sub2":
            p = theta[0]
            return 0.0 if 0.0 < p < 1.0 else -math.inf
        lp = 0.0
        for i in range(9):
            v = theta[i]
            if not (0.0 < v < 1.0):
                return -math.inf
            a, b = PRIOR_A[i], PRIOR_B[i]
            if a != 1.0 or b != 1.0:
                lp += self._log_beta_norm[i] + (a - 1.0) * math.log(v) + (b - 1.0) * math.log1p(-v)
        if not theta[0] + theta[1] < 1.0:
            return -math.inf
        return lp

    def log_likelihood(self, theta) -> float:
        if not self._studies:
            return 0.0
        if self.variant == "sub2":
            pis = {11: theta[0]}
        else:
            try:
                pis = _links(theta)
            except ZeroDivisionError:
                return -math.inf
        ll = 0.0
        for s in self._studies:
            ll += self._logc[s] + _binom_kernel(self.data.y[s], self.data.n[s], pis[s])
        return ll

    def log_density(self, theta):
        # python floats are much faster than numpy scalars here
        theta = theta.tolist() if isinstance(theta, np.ndarray) else list(theta)
        lp = self.log_prior(theta)
        if lp == -math.inf:
            return lp
        return lp + self.log_likelihood(theta)

    def prior(self) -> "HivModel":
        """The same variant with the likelihood dropped."""
        return HivModel(self.data, self.variant, prior_only=True)

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Exact draws of theta from the (truncated) prior by rejection."""
        if self.variant == "sub2":
            return rng.random((n, 1))
        out = np.empty((0, 9))
        while out.shape[0] < n:
            m = max(16, 2 * (n - out.shape[0]))
            draws = rng.beta(PRIOR_A, PRIOR_B, size=(m, 9))
            draws = draws[draws[:, 0] + draws[:, 1] < 1.0]
            out = np.vstack([out, draws])
        return out[:n]

    def initial_point(self):
        if self.variant == "sub2":
            return np.array([self.data.y[11] / self.data.n[11]])
        # roughly the observed proportions
        return np.array([0.106, 0.014, 0.016, 0.021, 0.0008, 0.7, 0.8, 0.3, 0.12])

    def initial_for_phi(self, phi) -> np.ndarray:
        if self.variant != "sub2":
            raise ValueError("phi can only be set directly in sub2")
        return np.array([float(np.asarray(phi).reshape(-1)[0])])

    def analytic_phi_ratio(self):
        """sub2 only: its phi prior is Beta(1, 1), so the ratio is identically 0."""
        if self.variant != "sub2":
            raise ValueError(f"no analytic phi marginal for HIV {self.variant}")
        return analytic_ratio(unit_uniform_logpdf)


def unit_uniform_logpdf(p) -> float:
    p = float(np.asarray(p).reshape(-1)[0])
    return 0.0 if 0.0 < p < 1.0 else -math.inf


def hiv_joint(data: Optional[HivData] = None, variant: str = "full") -> HivModel:
    return HivModel(data, variant)
