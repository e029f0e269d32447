"""Two-stage Markov melding sampler for two submodels sharing phi.

Stage one samples submodel 1, either its posterior or its posterior divided
by its phi prior marginal. Stage two proposes phi by picking a stage-one draw
uniformly at random and corrects with the remaining terms of the melded
posterior; submodel-2 parameters get random-walk updates. Prior marginals
only ever enter through self-density ratio evaluators.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .density import (BoundRatio, DensityModel, DimensionError, RatioEvaluator, SamplerError,
                      as_point, as_points)
from .mcmc import (Chain, CustomBlock, MhSettings, componentwise_blocks, gibbs_blocks, seed_record,
                   seed_sequence)

MODES = ("divide-prior", "plain-posterior")


@dataclass
class Submodel:
    """A submodel joint density with an optional analytic phi-marginal ratio."""

    model: DensityModel
    phi_ratio: Optional[RatioEvaluator] = None
    name: str = ""

    @property
    def dim_phi(self) -> int:
        return self.model.dim_phi


def as_submodel(m) -> Submodel:
    return m if isinstance(m, Submodel) else Submodel(m)


class PooledPriorRatio(RatioEvaluator):
    """Logarithmic pool: ``log r_pool = sum_m lambda_m log r_m``."""

    kind = "pooled"

    def __init__(self, ratios: Sequence[RatioEvaluator], weights: Sequence[float]):
        ratios, weights = list(ratios), [float(w) for w in weights]
        if len(ratios) != len(weights):
            raise ValueError(f"{len(ratios)} evaluators but {len(weights)} pooling weights")
        if not ratios:
            raise ValueError("need at least one evaluator to pool")
        if any(not (w >= 0 and math.isfinite(w)) for w in weights):
            raise ValueError("pooling weights must be finite and non-negative")
        dims = {r.dim for r in ratios if r.dim is not None}
        if len(dims) > 1:
            raise DimensionError("pooled evaluators differ in dimension")
        self.ratios = ratios
        self.weights = weights
        self.dim = dims.pop() if dims else None

    @property
    def total_weight(self) -> float:
        return sum(self.weights)

    def _log_ratio(self, nu, de):
        out = 0.0
        for r, lam in zip(self.ratios, self.weights):
            if lam != 0.0:
                out += lam * r.log_ratio(nu, de)
        return out

    def bind(self, points):
        return _PooledBound([(r.bind(points), lam) for r, lam in zip(self.ratios, self.weights) if lam != 0.0])


class _PooledBound(BoundRatio):
    def __init__(self, parts):
        self.parts = parts

    def log_ratio_idx(self, i, j):
        if i == j:
            return 0.0
        out = 0.0
        for b, lam in self.parts:
            out += lam * b.log_ratio_idx(i, j)
        return out


def pooled_ratio(rs: Sequence[RatioEvaluator], lams: Sequence[float]) -> PooledPriorRatio:
    return PooledPriorRatio(rs, lams)


def provenance(ev: Optional[RatioEvaluator]) -> str:
    if ev is None:
        return "none"
    if isinstance(ev, PooledPriorRatio):
        return "pooled(" + ", ".join(f"{lam:g}*{provenance(r)}" for r, lam in zip(ev.ratios, ev.weights)) + ")"
    return ev.kind


# ---------------------------------------------------------------------------
# Stage one
# ---------------------------------------------------------------------------


def stage_one(sub1, r1: Optional[RatioEvaluator], mode: str, settings: MhSettings, init=None,
              blocks=None) -> Chain:
    """Sample the stage-one target of submodel 1.

    ``divide-prior`` targets ``p_1(phi, psi_1, Y_1) / p_1(phi)``: random-walk
    acceptances carry the extra factor ``r1(phi, phi*)``. ``plain-posterior``
    targets ``p_1(phi, psi_1 | Y_1)`` and ignores ``r1``. Default blocks are
    one random-walk update per coordinate.
    """
    sub1 = as_submodel(sub1)
    if mode not in MODES:
        raise ValueError(f"unknown stage-one mode {mode!r}; use one of {MODES}")
    model = sub1.model
    if blocks is None:
        blocks = componentwise_blocks(list(range(model.dim)), settings.step_size, model.names)
    x0 = model.initial_point() if init is None else np.asarray(init, dtype=float)
    if mode == "plain-posterior":
        return gibbs_blocks(model, x0, blocks, settings, record_phi=True)
    if r1 is None:
        raise ValueError("divide-prior mode needs a ratio evaluator for the submodel-1 prior marginal")
    if any(isinstance(b, CustomBlock) for b in blocks):
        raise ValueError("divide-prior mode supports random-walk blocks only; custom updates would "
                         "skip the prior-marginal factor")
    phi = model.phi

    def ratio_term(x_prop, x_cur):
        return r1.log_ratio(phi(x_cur), phi(x_prop))

    chain = gibbs_blocks(model, x0, blocks, settings, ratio_term=ratio_term, record_phi=True)
    return chain


# ---------------------------------------------------------------------------
# Stage two
# ---------------------------------------------------------------------------


@dataclass
class MeldingRun:
    """Stage-one and stage-two output of one melding run."""

    stage1: Chain
    stage2: Chain
    indices: np.ndarray
    proposed: np.ndarray
    mode: str
    evaluators: dict
    seed: dict
    psi2_names: tuple = ()
    phi_names: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def phi(self) -> np.ndarray:
        """Melded-posterior phi draws."""
        return self.stage1.phi[self.indices]

    @property
    def psi1(self) -> np.ndarray:
        """Melded-posterior submodel-1 draws recovered through the stored indices."""
        return self.stage1.draws[self.indices]

    @property
    def psi2(self) -> np.ndarray:
        cols = [self.stage2.names.index(n) for n in self.psi2_names]
        return self.stage2.draws[:, cols]

    def check_indices(self) -> bool:
        """Exact check that each stage-two phi equals the stage-one phi at its index."""
        cols = [self.stage2.names.index(n) for n in self.phi_names]
        return bool(np.array_equal(self.stage2.draws[:, cols], self.stage1.phi[self.indices]))

    @property
    def phi_acceptance(self) -> float:
        return float(self.stage2.accepted[0] / max(1, self.stage2.proposed[0]))

    def stage_two_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", *self.phi_names, "index", *self.psi2_names])
        phi = self.phi
        psi = self.psi2
        for k in range(phi.shape[0]):
            w.writerow([k, *map(repr, phi[k].tolist()), int(self.indices[k]), *map(repr, psi[k].tolist())])
        return buf.getvalue()

    def metadata(self) -> dict:
        return {
            "mode": self.mode,
            "evaluators": self.evaluators,
            "seed": self.seed,
            "phi_names": list(self.phi_names),
            "psi2_names": list(self.psi2_names),
            "stage_one": self.stage1.metadata(),
            "stage_two": self.stage2.metadata(),
            "phi_acceptance": self.phi_acceptance,
            **self.meta,
        }

    def write(self, directory, prefix: str = ""):
        """Write stage-one CSV, stage-two CSV and a JSON sidecar into ``directory``."""
        import pathlib
        d = pathlib.Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{prefix}stage_one.csv").write_text(self.stage1.to_csv())
        (d / f"{prefix}stage_two.csv").write_text(self.stage_two_csv())
        (d / f"{prefix}melding.json").write_text(json.dumps(self.metadata(), indent=2, sort_keys=True))


class _PhiUpdate:
    """Index-resampling phi update for stage two."""

    def __init__(self, model, phi_pts, pooled_b, r1_b, r2_b, mode, index0):
        self.model = model
        self.phi_pts = phi_pts
        self.pooled_b = pooled_b
        self.r1_b = r1_b
        self.r2_b = r2_b
        self.mode = mode
        self.index = index0
        self.last_proposed = index0
        self.phi_idx = np.asarray(model.phi_index, dtype=int)
        self.n = phi_pts.shape[0]
        self.warm_accepts = 0

    def log_alpha(self, x, j):
        i = self.index
        if j == i:
            return 0.0
        xp = x.copy()
        xp[self.phi_idx] = self.phi_pts[j]
        lp_new = self.model.log_density(xp)
        if lp_new == -math.inf:
            return -math.inf
        lp_cur = self.model.log_density(x)
        la = self.pooled_b.log_ratio_idx(j, i) + (lp_new - lp_cur) + self.r2_b.log_ratio_idx(i, j)
        if self.mode == "plain-posterior":
            la += self.r1_b.log_ratio_idx(i, j)
        return la

    def __call__(self, x, rng):
        # both draws are taken every iteration so the proposal stream does not
        # depend on the evaluators
        j = int(rng.integers(self.n))
        log_u = math.log(rng.random())
        self.last_proposed = j
        la = self.log_alpha(x, j)
        if math.isnan(la):
            raise SamplerError(f"stage-two log acceptance is NaN at indices ({self.index}, {j})")
        if log_u < la:
            xn = x.copy()
            xn[self.phi_idx] = self.phi_pts[j]
            self.index = j
            return xn, True
        return x, False

    def state(self):
        return {"index": self.index, "proposed_index": self.last_proposed}


def _unique_rows(pts):
    uniq, inverse = np.unique(pts, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1)


class _IndexedBound(BoundRatio):
    """Bound evaluator on unique points addressed through original indices."""

    def __init__(self, bound, inverse):
        self.bound = bound
        self.inverse = inverse

    def log_ratio_idx(self, i, j):
        a, b = self.inverse[i], self.inverse[j]
        if a == b:
            return 0.0
        return self.bound.log_ratio_idx(a, b)


def bind_evaluators(phi1, pooled, r1, r2, mode):
    """Evaluators bound to the stage-one phi draws, as ``(pooled, r1, r2)``."""
    uniq, inverse = _unique_rows(as_points(phi1))
    cache = {}

    def bind(ev):
        # the pooled ratio usually contains r1 and r2; evaluate each only once
        if id(ev) not in cache:
            if isinstance(ev, PooledPriorRatio):
                cache[id(ev)] = _PooledBound([(bind(r), lam) for r, lam in zip(ev.ratios, ev.weights)
                                              if lam != 0.0])
            else:
                cache[id(ev)] = ev.bind(uniq)
        return cache[id(ev)]

    r1_b = _IndexedBound(bind(r1), inverse) if mode == "plain-posterior" else None
    return _IndexedBound(bind(pooled), inverse), r1_b, _IndexedBound(bind(r2), inverse)


def central_index(points) -> int:
    """Index of the draw nearest the componentwise median, in robust units.

    Used as the default stage-two starting point: it depends only on the
    stage-one sample, so every evaluator starts from the same draw.
    """
    pts = as_points(points)
    med = np.median(pts, axis=0)
    scale = np.median(np.abs(pts - med), axis=0)
    scale[scale == 0] = 1.0
    return int(np.argmin(np.sum(((pts - med) / scale) ** 2, axis=1)))


def stage_two(stage1: Chain, sub2, pooled: RatioEvaluator, r1: Optional[RatioEvaluator],
              r2: RatioEvaluator, settings: MhSettings, mode: str = "divide-prior",
              init_index: Optional[int] = None, psi2_init=None, bound=None) -> MeldingRun:
    """Metropolis-within-Gibbs over (phi via stage-one index, psi_2).

    Each iteration first proposes a uniformly random stage-one index ``j``
    and accepts with

        log a = pooled(phi_j, phi_i) + log p_2(phi_j, psi_2) - log p_2(phi_i, psi_2)
                + r2(phi_i, phi_j) [+ r1(phi_i, phi_j) in plain-posterior mode]

    then updates each psi_2 coordinate by random-walk Metropolis on
    ``p_2(phi, psi_2, Y_2)``. ``bound`` takes the output of
    :func:`bind_evaluators` for the same stage-one sample, so replicates can
    share one evaluation of the ratio estimates.
    """
    sub2 = as_submodel(sub2)
    model = sub2.model
    if mode not in MODES:
        raise ValueError(f"unknown stage-one mode {mode!r}; use one of {MODES}")
    if stage1.phi is None or stage1.phi.shape[0] == 0:
        raise ValueError("stage-one chain is empty or carries no phi draws")
    if model.phi_index is None:
        raise ValueError("submodel 2 must have phi as free coordinates")
    if mode == "plain-posterior" and r1 is None:
        raise ValueError("plain-posterior stage one needs the submodel-1 ratio evaluator in stage two")
    phi1 = as_points(stage1.phi)
    if phi1.shape[1] != model.dim_phi:
        raise DimensionError(f"stage-one phi has dimension {phi1.shape[1]}, submodel 2 expects {model.dim_phi}")

    if bound is None:
        bound = bind_evaluators(phi1, pooled, r1, r2, mode)
    pooled_b, r1_b, r2_b = bound

    n1 = phi1.shape[0]
    i0 = central_index(phi1) if init_index is None else int(init_index)
    if not 0 <= i0 < n1:
        raise ValueError(f"initial index {i0} outside the stage-one sample")
    if psi2_init is None:
        init_fn = getattr(model, "initial_for_phi", None)
        x0 = init_fn(phi1[i0]) if init_fn is not None else model.initial_point()
    else:
        x0 = np.asarray(psi2_init, dtype=float).copy()
    x0 = np.asarray(x0, dtype=float).copy()
    phi_idx = list(model.phi_index)
    x0[phi_idx] = phi1[i0]

    upd = _PhiUpdate(model, phi1, pooled_b, r1_b, r2_b, mode, i0)
    psi_idx = [k for k in range(model.dim) if k not in phi_idx]
    blocks = [CustomBlock(upd, phi_idx, name="phi", state=upd.state)]
    blocks += componentwise_blocks(psi_idx, np.broadcast_to(np.asarray(settings.step_size, float),
                                                            (model.dim,))[psi_idx], model.names)

    # the first block's stream is the phi proposal stream; count pilot acceptances
    warm = {"acc": 0, "n": 0}
    inner = upd.__call__

    def tracked(x, rng):
        xn, ok = inner(x, rng)
        if warm["n"] < settings.warmup:
            warm["n"] += 1
            warm["acc"] += int(ok)
        return xn, ok

    blocks[0].update = tracked
    chain = gibbs_blocks(model, x0, blocks, settings)
    if settings.warmup > 0 and warm["acc"] == 0:
        raise SamplerError("stage-two phi update accepted no moves during warmup")

    indices = np.asarray(chain.extra.pop("index"), dtype=np.int64)
    proposed = np.asarray(chain.extra.pop("proposed_index"), dtype=np.int64)
    run = MeldingRun(
        stage1=stage1,
        stage2=chain,
        indices=indices,
        proposed=proposed,
        mode=mode,
        evaluators={"pooled": provenance(pooled), "r1": provenance(r1), "r2": provenance(r2)},
        seed=seed_record(settings.seed),
        psi2_names=tuple(model.names[k] for k in psi_idx),
        phi_names=tuple(model.names[k] for k in phi_idx),
    )
    return run


def _stage_two_task(args):
    stage1, sub2, pooled, r1, r2, settings, mode, bound = args
    return stage_two(stage1, sub2, pooled, r1, r2, settings, mode, bound=bound)


def stage_two_replicates(stage1: Chain, sub2, pooled, r1, r2, settings: MhSettings, replicates: int,
                         mode: str = "divide-prior", workers: int = 1) -> List[MeldingRun]:
    """Independent stage-two chains sharing one stage-one sample.

    Replicate ``k`` uses the ``k``-th child of ``settings.seed``, so results
    do not depend on ``workers``.
    """
    from dataclasses import replace
    seeds = seed_sequence(settings.seed).spawn(replicates)
    if stage1.phi is None or stage1.phi.shape[0] == 0:
        raise ValueError("stage-one chain is empty or carries no phi draws")
    if mode == "plain-posterior" and r1 is None:
        raise ValueError("plain-posterior stage one needs the submodel-1 ratio evaluator in stage two")
    bound = bind_evaluators(stage1.phi, pooled, r1, r2, mode)
    tasks = [(stage1, sub2, pooled, r1, r2, replace(settings, seed=s), mode, bound) for s in seeds]
    if workers > 1 and replicates > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_stage_two_task, tasks))
    return [_stage_two_task(t) for t in tasks]


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov distance of 1-D samples."""
    from scipy.stats import ks_2samp
    return float(ks_2samp(np.asarray(a).reshape(-1), np.asarray(b).reshape(-1)).statistic)
