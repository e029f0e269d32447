"""End-to-end pipelines for the built-in models.

Every pipeline derives its random streams from one root seed, split by
purpose, so naive and WSRE runs with the same seed share their stage-one and
stage-two proposal streams.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .density import RatioEvaluator, SampleSet, constant_ratio
from .kde import naive_ratio
from .mcmc import Chain, MhSettings, componentwise_blocks, gibbs_blocks
from .melding import MeldingRun, Submodel, pooled_ratio, stage_one, stage_two, stage_two_replicates
from .models.gaussian import FlatModel, GaussianTestbed
from .models.h1n1 import IcuModel, SeverityModel, h1n1_synthetic
from .models.hiv import HivData, HivModel
from .wsre import WsreConfig, WsreEstimate, gaussian_config, h1n1_config, hiv_config, wsre_pipeline

log = logging.getLogger(__name__)

MODELS = ("gaussian", "hiv", "h1n1")
EVALUATORS = ("naive", "wsre", "analytic")

# purposes for stream splitting; the order is part of the reproducibility contract
_STREAMS = ("estimate", "stage1", "stage2", "direct", "naive")


def streams(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return dict(zip(_STREAMS, children))


def _rng(ss) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class Budget:
    """Sample sizes for one experiment."""

    naive_draws: int
    n_per_w: int
    stage1_iterations: int
    stage1_warmup: int
    stage2_iterations: int
    stage2_warmup: int
    direct_iterations: int = 0
    direct_warmup: int = 0
    replicates: int = 1
    step_size: float = 0.5

    def __post_init__(self):
        for k in ("naive_draws", "n_per_w", "stage1_iterations", "stage2_iterations", "replicates"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")


DEFAULT_BUDGETS = {
    "hiv": Budget(naive_draws=2500, n_per_w=250, stage1_iterations=6000, stage1_warmup=1000,
                  stage2_iterations=6000, stage2_warmup=1000, direct_iterations=12000, direct_warmup=2000),
    "h1n1": Budget(naive_draws=100_000, n_per_w=1000, stage1_iterations=6000, stage1_warmup=2000,
                   stage2_iterations=3000, stage2_warmup=1000, replicates=15, step_size=0.3),
    "gaussian": Budget(naive_draws=2500, n_per_w=250, stage1_iterations=6000, stage1_warmup=1000,
                       stage2_iterations=6000, stage2_warmup=1000, direct_iterations=21000,
                       direct_warmup=1000),
}


def default_wsre_config(model: str, seed: int, n_per_w: Optional[int] = None, W: Optional[int] = None,
                        workers: int = 1) -> WsreConfig:
    kw = {"seed": seed, "workers": workers}
    if n_per_w is not None:
        kw["n_per_w"] = n_per_w
    if model == "hiv":
        if W is not None:
            kw["W"] = W
        return hiv_config(**kw)
    if model == "h1n1":
        if W is not None:
            kw["per_axis"] = int(round(W ** 0.5))
            if kw["per_axis"] ** 2 != W:
                raise ValueError("the H1N1 grid is square; W must be a perfect square")
        return h1n1_config(**kw)
    if model == "gaussian":
        if W is not None:
            kw["W"] = W
        return gaussian_config(**kw)
    raise ValueError(f"unknown model {model!r}")


def wsre_target(model: str, data=None):
    """The density whose phi marginal the WSRE estimate targets."""
    if model == "hiv":
        return HivModel(data, "sub1", prior_only=True)
    if model == "h1n1":
        return SeverityModel()
    if model == "gaussian":
        return GaussianTestbed()
    raise ValueError(f"unknown model {model!r}")


def prior_phi_sample(model: str, n: int, seed, data=None) -> SampleSet:
    """Direct Monte Carlo draws of the phi prior marginal used by the naive estimator."""
    rng = _rng(seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed))
    if model == "hiv":
        m = HivModel(data, "sub1", prior_only=True)
        phi = m.phi_batch(m.sample_prior(n, rng))
    elif model == "h1n1":
        phi = SeverityModel().sample_prior(n, rng)[:, :2]
    elif model == "gaussian":
        phi = GaussianTestbed().sample_marginal(n, rng)
    else:
        raise ValueError(f"unknown model {model!r}")
    return SampleSet(phi, label=f"{model}-prior", seed=None)


def build_evaluator(model: str, kind: str, seed: int, budget: Budget, estimate: Optional[WsreEstimate] = None,
                    data=None, workers: int = 1) -> (RatioEvaluator, Optional[WsreEstimate]):
    """The ratio evaluator for the estimated prior marginal of ``model``.

    For HIV and the Gaussian test bed this is submodel 1's phi marginal; for
    H1N1 it is the severity submodel's.
    """
    st = streams(seed)
    if kind == "naive":
        return naive_ratio(prior_phi_sample(model, budget.naive_draws, st["naive"], data)), None
    if kind == "wsre":
        if estimate is None:
            cfg = default_wsre_config(model, 0, budget.n_per_w, workers=workers)
            cfg = replace(cfg, seed=int(st["estimate"].generate_state(1)[0]))
            estimate = wsre_pipeline(wsre_target(model, data), cfg, label=model)
        return estimate.evaluator, estimate
    if kind == "analytic":
        if model == "gaussian":
            return GaussianTestbed().marginal_ratio(), None
        if model == "hiv":
            raise ValueError("no analytic phi prior marginal exists for HIV submodel 1; use naive or wsre")
        raise ValueError("no analytic phi prior marginal exists for the H1N1 severity submodel; use naive or wsre")
    raise ValueError(f"unknown evaluator {kind!r}; use one of {EVALUATORS}")


def _settings(iterations, warmup, seed, step_size=0.5, thin=1) -> MhSettings:
    return MhSettings(iterations=iterations + warmup, warmup=warmup, step_size=step_size, seed=seed,
                      thin=thin, min_accept=0.0)


@dataclass
class MeldResult:
    model: str
    evaluator: str
    runs: List[MeldingRun]
    estimate: Optional[WsreEstimate] = None
    data: object = None
    meta: dict = field(default_factory=dict)

    @property
    def stage1(self) -> Chain:
        return self.runs[0].stage1


def hiv_meld(evaluator: str, seed: int, budget: Optional[Budget] = None, data: Optional[HivData] = None,
             estimate: Optional[WsreEstimate] = None, workers: int = 1) -> MeldResult:
    """HIV: divide-prior stage one on studies 1-11, stage two with study 12."""
    b = budget or DEFAULT_BUDGETS["hiv"]
    st = streams(seed)
    r1, estimate = build_evaluator("hiv", evaluator, seed, b, estimate, data, workers)
    sub1 = Submodel(HivModel(data, "sub1"), name="hiv-sub1")
    sub2_model = HivModel(data, "sub2")
    r2 = sub2_model.analytic_phi_ratio()
    sub2 = Submodel(sub2_model, r2, name="hiv-sub2")
    pooled = pooled_ratio([r1, r2], [0.5, 0.5])
    s1 = stage_one(sub1, r1, "divide-prior", _settings(b.stage1_iterations, b.stage1_warmup, st["stage1"],
                                                        b.step_size))
    s2 = _settings(b.stage2_iterations, b.stage2_warmup, st["stage2"], b.step_size)
    if b.replicates == 1:
        runs = [stage_two(s1, sub2, pooled, r1, r2, s2, "divide-prior")]
    else:
        runs = stage_two_replicates(s1, sub2, pooled, r1, r2, s2, b.replicates, "divide-prior", workers)
    return MeldResult("hiv", evaluator, runs, estimate)


def hiv_direct(seed: int, budget: Optional[Budget] = None, data: Optional[HivData] = None) -> Chain:
    """Baseline: componentwise random-walk Metropolis on the full HIV joint."""
    b = budget or DEFAULT_BUDGETS["hiv"]
    model = HivModel(data, "full")
    settings = _settings(b.direct_iterations, b.direct_warmup, streams(seed)["direct"], b.step_size)
    blocks = componentwise_blocks(list(range(model.dim)), b.step_size, model.names)
    return gibbs_blocks(model, model.initial_point(), blocks, settings, record_phi=True)


def h1n1_stage_one(data, seed: int, budget: Optional[Budget] = None) -> Chain:
    """Plain-posterior stage one on the ICU submodel."""
    b = budget or DEFAULT_BUDGETS["h1n1"]
    model = IcuModel(data)
    settings = _settings(b.stage1_iterations, b.stage1_warmup, streams(seed)["stage1"], b.step_size)
    return stage_one(Submodel(model, name="h1n1-icu"), None, "plain-posterior", settings,
                     blocks=model.sampler_blocks(b.step_size))


def h1n1_meld(evaluator: str, seed: int, budget: Optional[Budget] = None, data=None, T: int = 28,
              estimate: Optional[WsreEstimate] = None, stage1: Optional[Chain] = None,
              workers: int = 1) -> MeldResult:
    """H1N1: ICU posterior in stage one, severity submodel (no data) in stage two.

    The ICU prior marginal of phi is treated as flat (constant ratio); the
    severity prior marginal is estimated.
    """
    b = budget or DEFAULT_BUDGETS["h1n1"]
    st = streams(seed)
    if data is None:
        data = h1n1_synthetic(seed, T)
    r2, estimate = build_evaluator("h1n1", evaluator, seed, b, estimate, workers=workers)
    r1 = constant_ratio(2)
    pooled = pooled_ratio([r1, r2], [0.5, 0.5])
    s1 = stage1 if stage1 is not None else h1n1_stage_one(data, seed, b)
    s2 = _settings(b.stage2_iterations, b.stage2_warmup, st["stage2"], b.step_size)
    runs = stage_two_replicates(s1, Submodel(SeverityModel(), name="h1n1-severity"), pooled, r1, r2, s2,
                                b.replicates, "plain-posterior", workers)
    return MeldResult("h1n1", evaluator, runs, estimate, data)


def gaussian_meld(evaluator: str, seed: int, budget: Optional[Budget] = None, rho: float = 0.5,
                  estimate: Optional[WsreEstimate] = None, workers: int = 1) -> MeldResult:
    """Toy melding: the Gaussian test bed joined to a flat one-parameter submodel."""
    b = budget or DEFAULT_BUDGETS["gaussian"]
    st = streams(seed)
    r1, estimate = build_evaluator("gaussian", evaluator, seed, b, estimate, workers=workers)
    r2 = constant_ratio(1)
    pooled = pooled_ratio([r1, r2], [0.5, 0.5])
    s1 = stage_one(Submodel(GaussianTestbed(rho)), r1, "divide-prior",
                   _settings(b.stage1_iterations, b.stage1_warmup, st["stage1"], b.step_size))
    s2 = _settings(b.stage2_iterations, b.stage2_warmup, st["stage2"], b.step_size)
    runs = stage_two_replicates(s1, Submodel(FlatModel(1)), pooled, r1, r2, s2, b.replicates, "divide-prior",
                                workers)
    return MeldResult("gaussian", evaluator, runs, estimate)


def gaussian_direct(seed: int, budget: Optional[Budget] = None, rho: float = 0.5) -> Chain:
    b = budget or DEFAULT_BUDGETS["gaussian"]
    model = GaussianTestbed(rho)
    settings = _settings(b.direct_iterations, b.direct_warmup, streams(seed)["direct"], b.step_size)
    return gibbs_blocks(model, model.initial_point(),
                        componentwise_blocks([0, 1], b.step_size, model.names), settings, record_phi=True)
