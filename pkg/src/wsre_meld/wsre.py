"""Weighted-sample self-density ratio estimation.

For each Gaussian weighting function ``w(phi; mean, var)`` we sample the
tilted joint ``p(theta) w(phi(theta))`` by MCMC, keep the phi draws, and form
the inverse-weighted KDE ratio

    log r_w(nu, de) = LSE_n[-log w(phi_n) + log K_h(nu - phi_n)]
                    - LSE_n[-log w(phi_n) + log K_h(de - phi_n)].

Several such estimates are merged by a weighted mean whose weights are the
product ``s_w(nu) s_w(de)`` of standard KDEs of each tilted sample.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import log_ndtr, ndtr

from .density import (BoundRatio, DensityModel, DimensionError, RatioEvaluator, SampleSet,
                      UnaryRatio, as_point, as_points)
from .kde import LOG_2PI, GaussianKde, bandwidth_rule, gaussian_product_params, log_sum_exp
from .mcmc import MhSettings, RandomWalkBlock, componentwise_blocks, gibbs_blocks, seed_from_record, seed_record

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class WeightingFunction:
    """Diagonal Gaussian weight ``w(phi) = N(phi; mean, diag(var))``."""

    mean: tuple
    var: tuple

    def __init__(self, mean, var):
        m = np.atleast_1d(np.asarray(mean, dtype=float))
        v = np.broadcast_to(np.atleast_1d(np.asarray(var, dtype=float)), m.shape)
        if not np.all(np.isfinite(m)):
            raise ValueError("weighting-function mean must be finite")
        if not np.all((v > 0) & np.isfinite(v)):
            raise ValueError("weighting-function variance must be positive and finite")
        object.__setattr__(self, "mean", tuple(float(x) for x in m))
        object.__setattr__(self, "var", tuple(float(x) for x in v))
        object.__setattr__(self, "_m", m.copy())
        object.__setattr__(self, "_v", np.array(v, dtype=float))
        object.__setattr__(self, "_c", float(-0.5 * np.sum(np.log(2 * np.pi * v))))

    @property
    def dim(self) -> int:
        return len(self.mean)

    def log_w(self, points) -> np.ndarray:
        x = as_points(points, self.dim)
        return self._c - 0.5 * np.sum((x - self._m) ** 2 / self._v, axis=1)

    def log_w_point(self, phi) -> float:
        d = np.asarray(phi, dtype=float) - self._m
        return self._c - 0.5 * float(np.sum(d * d / self._v))

    def to_dict(self):
        return {"mean": list(self.mean), "var": list(self.var)}


class WeightedTarget(DensityModel):
    """``model`` tilted by ``wf`` on its phi coordinates; unnormalised."""

    def __init__(self, model: DensityModel, wf: WeightingFunction):
        if wf.dim != model.dim_phi:
            raise DimensionError(f"weighting function has dimension {wf.dim}, model phi has {model.dim_phi}")
        self.model = model
        self.wf = wf
        self.names = model.names
        self.phi_names = model.phi_names
        self.phi_index = model.phi_index
        self.lower = model.lower
        self.upper = model.upper

    def log_density(self, theta):
        lp = self.model.log_density(theta)
        if lp == -math.inf:
            return lp
        return lp + self.wf.log_w_point(self.model.phi(theta))

    def phi(self, theta):
        return self.model.phi(theta)

    def phi_batch(self, thetas):
        return self.model.phi_batch(thetas)

    def initial_point(self):
        init = getattr(self.model, "initial_for_phi", None)
        if init is not None:
            try:
                x = init(np.asarray(self.wf.mean))
                if np.isfinite(self.log_density(x)):
                    return x
            except ValueError:
                pass
        return self.model.initial_point()


def weighted_target(model: DensityModel, wf: WeightingFunction) -> WeightedTarget:
    return WeightedTarget(model, wf)


# ---------------------------------------------------------------------------
# Placing a weighting function
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KappaSolution:
    mu: float
    mass: float
    attainable: bool
    status: str  # "root", "everywhere", "closest"


def tilted_mass(sample, h: float, region, mu: float, sigma2: float) -> float:
    """Share of ``p_hat(phi) w(phi; mu, sigma2)`` that falls inside ``region``."""
    x = np.asarray(sample, dtype=float).reshape(-1)
    a, b = region
    log_s, mu_p, var_p = gaussian_product_params(x, h, mu, sigma2)
    sd_p = math.sqrt(var_p)
    wts = np.exp(log_s - np.max(log_s))
    cdf = ndtr((b - mu_p) / sd_p) - ndtr((a - mu_p) / sd_p)
    return float(np.sum(wts * cdf) / np.sum(wts))


def solve_kappa(sample, h: float, region, kappa: float, sigma2: float, grid_size: int = 801) -> KappaSolution:
    """Mean of a Gaussian weight of variance ``sigma2`` giving mass ``kappa`` in ``region``.

    The mass is computed in closed form from the KDE of ``sample`` (bandwidth
    ``h``) times the weight. The mean is bracketed on a grid spanning the
    sample +-10 sd and refined with Brent's method; among several roots the one
    nearest the region midpoint is returned. When no mean reaches ``kappa``
    exactly, the closest mean is returned with ``attainable=False``, unless
    every mean already exceeds ``kappa`` (``status="everywhere"``).
    """
    x = np.asarray(sample.draws if isinstance(sample, SampleSet) else sample, dtype=float)
    if x.ndim == 2:
        if x.shape[1] != 1:
            raise DimensionError("solve_kappa is one-dimensional")
        x = x[:, 0]
    a, b = (float(v) for v in region)
    if not a < b:
        raise ValueError("region must satisfy a < b")
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    if not (h > 0 and sigma2 > 0):
        raise ValueError("h and sigma2 must be positive")
    if x.size < 2 or not np.std(x) > 0:
        raise ValueError("degenerate sample")

    sd = float(np.std(x, ddof=1))
    grid = np.linspace(x.min() - 10 * sd, x.max() + 10 * sd, grid_size)
    f = np.array([tilted_mass(x, h, (a, b), m, sigma2) - kappa for m in grid])

    roots = []
    for i in range(grid_size - 1):
        if f[i] == 0.0:
            roots.append(grid[i])
        elif f[i] * f[i + 1] < 0:
            roots.append(brentq(lambda m: tilted_mass(x, h, (a, b), m, sigma2) - kappa, grid[i], grid[i + 1],
                                xtol=1e-12, rtol=4 * np.finfo(float).eps))
    if roots:
        centre = 0.5 * (a + b)
        mu = min(roots, key=lambda r: (abs(r - centre), r))
        return KappaSolution(float(mu), tilted_mass(x, h, (a, b), mu, sigma2), True, "root")
    i = int(np.argmin(np.abs(f)))
    if np.all(f > 0):
        return KappaSolution(float(grid[i]), float(f[i] + kappa), True, "everywhere")
    return KappaSolution(float(grid[i]), float(f[i] + kappa), False, "closest")


# ---------------------------------------------------------------------------
# Single and combined estimates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightedSampleSet:
    """phi draws from one tilted target with the settings that produced them."""

    draws: np.ndarray
    wf: WeightingFunction
    bandwidth: np.ndarray
    seed: dict
    acceptance: dict = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        d = as_points(self.draws, self.wf.dim)
        if not np.all(np.isfinite(d)):
            raise ValueError("weighted sample contains non-finite draws")
        d.setflags(write=False)
        object.__setattr__(self, "draws", d)
        object.__setattr__(self, "bandwidth", np.asarray(self.bandwidth, dtype=float).reshape(d.shape[1]))

    def __len__(self):
        return self.draws.shape[0]

    def to_dict(self):
        return {
            "weighting_function": self.wf.to_dict(),
            "bandwidth": self.bandwidth.tolist(),
            "seed": self.seed,
            "acceptance": self.acceptance,
            "label": self.label,
            "draws": self.draws.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        wf = WeightingFunction(d["weighting_function"]["mean"], d["weighting_function"]["var"])
        return cls(np.asarray(d["draws"], dtype=float), wf, np.asarray(d["bandwidth"], dtype=float),
                   d["seed"], d.get("acceptance", {}), d.get("label", ""))


class JonesRatio(UnaryRatio):
    """Inverse-weighted KDE ratio for one weighting function."""

    kind = "wsre-single"

    def __init__(self, wss: WeightedSampleSet):
        self.wss = wss
        self.dim = wss.wf.dim
        self.kde = GaussianKde(wss.draws, wss.bandwidth, -wss.wf.log_w(wss.draws))

    def log_unnorm(self, points):
        return self.kde.log_unnorm(points)


class _Stack:
    """All component samples padded into one array for vectorised evaluation."""

    def __init__(self, sets: Sequence[WeightedSampleSet]):
        d = sets[0].wf.dim
        nmax = max(len(s) for s in sets)
        W = len(sets)
        self.samples = np.zeros((W, nmax, d))
        self.liw = np.full((W, nmax), -np.inf)
        self.pad = np.full((W, nmax), -np.inf)
        self.h = np.empty((W, d))
        self.logn = np.empty(W)
        for k, s in enumerate(sets):
            kde = GaussianKde(s.draws, s.bandwidth, -s.wf.log_w(s.draws))
            n = kde.n
            self.samples[k, :n] = kde.sample
            self.liw[k, :n] = kde.log_inv_weights
            self.pad[k, :n] = 0.0
            self.h[k] = kde.bandwidth
            self.logn[k] = math.log(n)
        self.const = -0.5 * LOG_2PI * d - np.sum(np.log(self.h), axis=1)
        self.W, self.nmax, self.d = W, nmax, d

    def features(self, points):
        """Jones log sums and log standard-KDE values, each (m, W)."""
        pts = as_points(points, self.d)
        m = pts.shape[0]
        jones = np.empty((m, self.W))
        shat = np.empty((m, self.W))
        step = max(1, (1 << 21) // (self.W * self.nmax * self.d))
        for s in range(0, m, step):
            p = pts[s:s + step]
            z = (p[:, None, None, :] - self.samples[None]) / self.h[None, :, None, :]
            lk = self.const[None, :, None] - 0.5 * np.einsum("mwnd,mwnd->mwn", z, z)
            jones[s:s + step] = log_sum_exp(lk + self.liw[None], axis=2)
            shat[s:s + step] = log_sum_exp(lk + self.pad[None], axis=2) - self.logn[None]
        return jones, shat


def combine_logs(log_ratios: np.ndarray, log_weights: np.ndarray):
    """Weighted mean of ratios in log space; returns ``(value, fell_back)``.

    Falls back to the plain mean of log ratios when every weight is zero.
    """
    if not np.any(np.isfinite(log_weights)):
        return float(np.mean(log_ratios)), True
    return float(log_sum_exp(log_weights + log_ratios) - log_sum_exp(log_weights)), False


class CombinedWsreRatio(RatioEvaluator):
    """Accuracy-weighted mean of several single-weight ratio estimates."""

    kind = "wsre-combined"

    def __init__(self, sets: Sequence[WeightedSampleSet]):
        sets = list(sets)
        if not sets:
            raise ValueError("need at least one weighted sample set")
        dims = {s.wf.dim for s in sets}
        if len(dims) != 1:
            raise DimensionError("weighted sample sets differ in dimension")
        self.sets = sets
        self.dim = dims.pop()
        self._stack = _Stack(sets)

    @property
    def components(self) -> List[JonesRatio]:
        return [JonesRatio(s) for s in self.sets]

    def log_ratio_detail(self, phi_nu, phi_de):
        nu = as_point(phi_nu, self.dim)
        de = as_point(phi_de, self.dim)
        if np.array_equal(nu, de):
            return 0.0, False
        jones, shat = self._stack.features(np.stack([nu, de]))
        return combine_logs(jones[0] - jones[1], shat[0] + shat[1])

    def _log_ratio(self, nu, de):
        val, fell_back = self.log_ratio_detail(nu, de)
        if fell_back:
            log.warning("all combination weights vanished at (%s, %s); used the unweighted mean", nu, de)
        return val

    def features(self, points):
        return self._stack.features(points)

    def bind(self, points):
        pts = as_points(points, self.dim)
        jones, shat = self._stack.features(pts)
        return _CombinedBound(pts, jones, shat)


class _CombinedBound(BoundRatio):
    def __init__(self, points, jones, shat):
        self.points = points
        self.jones = jones
        self.shat = shat

    def log_ratio_idx(self, i, j):
        if i == j:
            return 0.0
        return combine_logs(self.jones[i] - self.jones[j], self.shat[i] + self.shat[j])[0]


def combine(estimates) -> CombinedWsreRatio:
    """Combine single estimates, given as sample sets or ``(sample set, evaluator)`` pairs."""
    sets = [e[0] if isinstance(e, tuple) else e for e in estimates]
    if not sets:
        raise ValueError("need at least one estimate to combine")
    return CombinedWsreRatio(sets)


# ---------------------------------------------------------------------------
# Sampling the tilted targets
# ---------------------------------------------------------------------------


#: componentwise: one random-walk block per coordinate; joint: one isotropic
#: block; adaptive: one block whose covariance is learned during warmup
SCANS = ("componentwise", "joint", "adaptive")


@dataclass(frozen=True)
class WsreConfig:
    weighting_functions: tuple
    n_per_w: int
    seed: int = 0
    step_size: float = 0.5
    scan: str = "componentwise"
    warmup: Optional[int] = None
    thin: int = 1
    bandwidth: Optional[tuple] = None
    min_accept: float = 0.01
    workers: int = 1

    def __post_init__(self):
        wfs = tuple(self.weighting_functions)
        object.__setattr__(self, "weighting_functions", wfs)
        if len(wfs) < 1:
            raise ValueError("need at least one weighting function")
        if self.n_per_w < 2:
            raise ValueError("need at least two draws per weighting function")
        if len({w.dim for w in wfs}) != 1:
            raise DimensionError("weighting functions differ in dimension")
        if self.scan not in SCANS:
            raise ValueError("scan must be one of " + ", ".join(SCANS))

    @property
    def W(self) -> int:
        return len(self.weighting_functions)

    def settings(self, seed) -> MhSettings:
        warm = self.n_per_w if self.warmup is None else self.warmup
        return MhSettings(iterations=warm + self.n_per_w * self.thin, warmup=warm, step_size=self.step_size,
                          seed=seed, thin=self.thin, adapt=True, min_accept=self.min_accept)

    def to_dict(self):
        return {
            "weighting_functions": [w.to_dict() for w in self.weighting_functions],
            "n_per_w": self.n_per_w,
            "seed": self.seed,
            "step_size": self.step_size,
            "scan": self.scan,
            "warmup": self.warmup,
            "thin": self.thin,
            "bandwidth": None if self.bandwidth is None else list(self.bandwidth),
            "min_accept": self.min_accept,
        }

    @classmethod
    def from_dict(cls, d, workers: int = 1):
        wfs = tuple(WeightingFunction(w["mean"], w["var"]) for w in d["weighting_functions"])
        bw = d.get("bandwidth")
        return cls(wfs, d["n_per_w"], d.get("seed", 0), d.get("step_size", 0.5), d.get("scan", "componentwise"),
                   d.get("warmup"), d.get("thin", 1), None if bw is None else tuple(bw),
                   d.get("min_accept", 0.01), workers)


def estimate_single(model: DensityModel, wf: WeightingFunction, n: int, settings: MhSettings,
                    scan: str = "componentwise", bandwidth=None, init=None, label: str = ""):
    """Sample one tilted target and build its ratio estimate.

    Returns ``(WeightedSampleSet, JonesRatio)``. Raises
    :class:`~wsre_meld.density.SamplerError` when the sampler fails to move
    (see ``settings.min_accept``).
    """
    target = WeightedTarget(model, wf)
    x0 = target.initial_point() if init is None else np.asarray(init, dtype=float)
    if scan == "componentwise":
        blocks = componentwise_blocks(list(range(target.dim)), settings.step_size, target.names)
    elif scan == "adaptive":
        blocks = [RandomWalkBlock(np.arange(target.dim), name="all", adapt_cov=True)]
    else:
        blocks = [RandomWalkBlock(np.arange(target.dim), name="all")]
    chain = gibbs_blocks(target, x0, blocks, settings)
    phi = target.phi_batch(chain.draws)
    if phi.shape[0] != n:
        raise ValueError(f"settings keep {phi.shape[0]} draws, expected {n}")
    h = bandwidth_rule(phi) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, float), (wf.dim,))
    wss = WeightedSampleSet(phi, wf, h, seed_record(settings.seed), chain.acceptance_rates, label)
    return wss, JonesRatio(wss)


def _run_component(args):
    model, wf, n, settings, scan, bandwidth, label = args
    wss, _ = estimate_single(model, wf, n, settings, scan, bandwidth, label=label)
    return wss


@dataclass
class WsreEstimate:
    """All tilted samples of a WSRE run plus the combined evaluator."""

    sets: List[WeightedSampleSet]
    config: dict
    model: str = ""

    def __post_init__(self):
        self._evaluator = None

    @property
    def evaluator(self) -> CombinedWsreRatio:
        if self._evaluator is None:
            self._evaluator = CombinedWsreRatio(self.sets)
        return self._evaluator

    @property
    def total_draws(self) -> int:
        return sum(len(s) for s in self.sets)

    def to_json(self) -> str:
        doc = {
            "format": "wsre-estimate",
            "version": FORMAT_VERSION,
            "model": self.model,
            "config": self.config,
            "components": [s.to_dict() for s in self.sets],
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "WsreEstimate":
        doc = json.loads(text)
        if doc.get("format") != "wsre-estimate":
            raise ValueError("not a WSRE estimate document")
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported WSRE estimate version {doc.get('version')}")
        return cls([WeightedSampleSet.from_dict(c) for c in doc["components"]], doc["config"], doc.get("model", ""))


def component_seeds(root_seed: int, W: int):
    return np.random.SeedSequence(root_seed).spawn(W)


def wsre_pipeline(model: DensityModel, config: WsreConfig, label: str = "") -> WsreEstimate:
    """Sample every tilted target and combine the estimates."""
    seeds = component_seeds(config.seed, config.W)
    bw = config.bandwidth
    tasks = [(model, wf, config.n_per_w, config.settings(seeds[k]), config.scan, bw, f"w{k + 1}")
             for k, wf in enumerate(config.weighting_functions)]
    if config.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            sets = list(pool.map(_run_component, tasks))
    else:
        sets = [_run_component(t) for t in tasks]
    return WsreEstimate(sets, config.to_dict(), label)


def reproduce_component(model: DensityModel, estimate: WsreEstimate, k: int) -> WeightedSampleSet:
    """Re-run component ``k`` of an estimate from its recorded seed and settings."""
    cfg = WsreConfig.from_dict(estimate.config)
    s = estimate.sets[k]
    settings = cfg.settings(seed_from_record(s.seed))
    wss, _ = estimate_single(model, s.wf, cfg.n_per_w, settings, cfg.scan, cfg.bandwidth, label=s.label)
    return wss


# ---------------------------------------------------------------------------
# Default grids
# ---------------------------------------------------------------------------


def grid_weighting_functions(axes: Sequence[Sequence[float]], var) -> tuple:
    """Weighting functions centred on the Cartesian product of ``axes``."""
    mesh = np.meshgrid(*[np.asarray(a, dtype=float) for a in axes], indexing="ij")
    means = np.column_stack([m.reshape(-1) for m in mesh])
    return tuple(WeightingFunction(m, var) for m in means)


def hiv_config(n_per_w: int = 250, W: int = 10, seed: int = 0, workers: int = 1) -> WsreConfig:
    wfs = grid_weighting_functions([np.linspace(0.01, 0.99, W)], [0.25 ** 2])
    return WsreConfig(wfs, n_per_w, seed, workers=workers)


def h1n1_config(n_per_w: int = 1000, per_axis: int = 10, seed: int = 0, workers: int = 1) -> WsreConfig:
    """Severity-prior grid; the binomial ridge between phi, chi and pdet needs learned joint moves."""
    wfs = grid_weighting_functions([np.linspace(30, 275, per_axis), np.linspace(500, 3000, per_axis)],
                                   [25.0 ** 2, 250.0 ** 2])
    return WsreConfig(wfs, n_per_w, seed, scan="adaptive", warmup=2000, thin=5, workers=workers)


def gaussian_config(n_per_w: int = 250, W: int = 10, seed: int = 0, workers: int = 1,
                    lo: float = 0.0, hi: float = 9.0, var: float = 2.0, thin: int = 5) -> WsreConfig:
    """Weights for right-tail accuracy on the Gaussian test bed.

    The means sit on the side of the probe points, so each tilted sample
    straddles the mode and part of the tail. Joint random-walk moves suit
    the correlated (phi, gamma) pair.
    """
    wfs = grid_weighting_functions([np.linspace(lo, hi, W)], [var])
    return WsreConfig(wfs, n_per_w, seed, scan="joint", thin=thin, workers=workers)
