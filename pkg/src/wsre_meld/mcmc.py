"""Random-walk Metropolis and Metropolis-within-Gibbs with seeded streams.

Random-walk proposals are Gaussian in unconstrained coordinates (see
:class:`~wsre_meld.density.BoxTransform`), so bounded parameters move on a
log or logit scale with the Jacobian included in the target. Step sizes are
tuned only during warmup (Robbins-Monro on the log scale) and frozen after,
so the kept draws come from a fixed Markov kernel.

Every block owns an independent random stream spawned from the chain seed and
consumes a fixed number of variates per iteration, whatever the acceptance
decisions. Two runs with the same seed therefore share their proposal
streams even when their targets differ.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .density import DensityModel, SamplerError

SeedLike = Union[int, np.random.SeedSequence, None]


def seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def seed_record(seed: SeedLike):
    """JSON-friendly description of a seed that rebuilds the same stream."""
    ss = seed_sequence(seed)
    return {"entropy": ss.entropy, "spawn_key": list(ss.spawn_key)}


def seed_from_record(rec) -> np.random.SeedSequence:
    if isinstance(rec, dict):
        return np.random.SeedSequence(rec["entropy"], spawn_key=tuple(rec["spawn_key"]))
    return np.random.SeedSequence(rec)


@dataclass(frozen=True)
class MhSettings:
    iterations: int
    warmup: int = 0
    step_size: Union[float, Sequence[float]] = 0.5
    seed: SeedLike = 0
    thin: int = 1
    adapt: bool = True
    target_accept: Optional[float] = None
    min_accept: float = 0.0

    def __post_init__(self):
        if not (self.iterations > self.warmup >= 0):
            raise ValueError("need iterations > warmup >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if np.any(np.asarray(self.step_size, dtype=float) <= 0):
            raise ValueError("step sizes must be positive")

    @property
    def kept(self) -> int:
        return len(range(self.warmup, self.iterations, self.thin))

    def describe(self) -> dict:
        d = asdict(self)
        d["seed"] = seed_record(self.seed)
        d["step_size"] = np.asarray(self.step_size, dtype=float).tolist()
        return d


class RandomWalkBlock:
    """Gaussian random-walk update of a subset of coordinates.

    With ``adapt_cov`` the proposal covariance of a multi-coordinate block
    is learned from the warmup draws on the unconstrained scale and then
    frozen, so kept draws come from a fixed kernel.
    """

    def __init__(self, indices: Sequence[int], step_size=None, name: Optional[str] = None,
                 adapt_cov: bool = False):
        self.indices = np.asarray(indices, dtype=int).reshape(-1)
        if self.indices.size == 0:
            raise ValueError("a block needs at least one coordinate")
        self.step_size = None if step_size is None else np.broadcast_to(
            np.asarray(step_size, dtype=float), self.indices.shape).copy()
        self.name = name
        self.adapt_cov = bool(adapt_cov) and self.indices.size > 1


class _CovarianceTracker:
    """Running warmup covariance of one block with a periodic Cholesky refresh."""

    def __init__(self, d: int, start: int, period: int = 50):
        self.n = 0
        self.mean = np.zeros(d)
        self.m2 = np.zeros((d, d))
        self.start = start
        self.period = period
        self.chol = None
        self.factor = 2.38 / math.sqrt(d)

    def update(self, it: int, zb: np.ndarray) -> bool:
        """Record a warmup state; returns True when the Cholesky factor changed."""
        self.n += 1
        delta = zb - self.mean
        self.mean += delta / self.n
        self.m2 += np.outer(delta, zb - self.mean)
        if it + 1 < self.start or (it + 1 - self.start) % self.period:
            return False
        cov = self.m2 / max(self.n - 1, 1)
        cov += np.eye(cov.shape[0]) * (1e-10 + 1e-8 * np.trace(cov) / cov.shape[0])
        try:
            self.chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            return False
        return True


class CustomBlock:
    """Externally supplied update rule.

    ``update(x, rng)`` returns ``(x_new, accepted)`` where ``x`` is the
    current state in natural coordinates. ``state()`` may return a dict of
    scalars to record alongside each kept draw.
    """

    def __init__(self, update: Callable, indices: Sequence[int], name: str = "custom",
                 state: Optional[Callable[[], dict]] = None):
        self.update = update
        self.indices = np.asarray(indices, dtype=int).reshape(-1)
        self.name = name
        self.state = state


Block = Union[RandomWalkBlock, CustomBlock]


def componentwise_blocks(indices: Sequence[int], step_size=None, names=None) -> List[RandomWalkBlock]:
    steps = np.broadcast_to(np.asarray(0.5 if step_size is None else step_size, dtype=float),
                            (len(indices),))
    return [RandomWalkBlock([i], steps[k], None if names is None else names[i])
            for k, i in enumerate(indices)]


@dataclass
class Chain:
    """Kept draws of one run, in natural coordinates."""

    draws: np.ndarray
    names: tuple
    accepted: np.ndarray
    proposed: np.ndarray
    block_names: tuple
    settings: dict
    step_sizes: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    phi: Optional[np.ndarray] = None
    phi_names: tuple = ()

    def __len__(self):
        return self.draws.shape[0]

    @property
    def acceptance_rates(self) -> dict:
        with np.errstate(invalid="ignore", divide="ignore"):
            rates = self.accepted / np.maximum(self.proposed, 1)
        return {name: float(r) for name, r in zip(self.block_names, rates)}

    def column(self, name: str) -> np.ndarray:
        if name in self.names:
            return self.draws[:, self.names.index(name)]
        if name in self.phi_names:
            return self.phi[:, self.phi_names.index(name)]
        if name in self.extra:
            return np.asarray(self.extra[name])
        raise KeyError(name)

    def table(self):
        """Header and columns in CSV order: draws, derived phi, extra traces."""
        header = list(self.names)
        cols = [self.draws[:, j] for j in range(self.draws.shape[1])]
        if self.phi is not None:
            for j, n in enumerate(self.phi_names):
                if n not in header:
                    header.append(n)
                    cols.append(self.phi[:, j])
        for k, v in self.extra.items():
            header.append(k)
            cols.append(np.asarray(v))
        return header, cols

    def to_csv(self, path=None) -> str:
        header, cols = self.table()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration"] + header)
        for i in range(len(self)):
            w.writerow([i] + [_fmt(c[i]) for c in cols])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def metadata(self) -> dict:
        return {
            "names": list(self.names),
            "phi_names": list(self.phi_names),
            "settings": self.settings,
            "blocks": list(self.block_names),
            "accepted": [int(a) for a in self.accepted],
            "proposed": [int(p) for p in self.proposed],
            "acceptance_rates": self.acceptance_rates,
            "final_step_sizes": self.step_sizes,
            "length": len(self),
        }


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def gibbs_blocks(target: DensityModel, init, blocks: Sequence[Block], settings: MhSettings,
                 ratio_term: Optional[Callable[[np.ndarray, np.ndarray], float]] = None,
                 record_phi: bool = False) -> Chain:
    """Metropolis-within-Gibbs over ``blocks`` in fixed order.

    ``ratio_term(x_prop, x_cur)``, when given, is added to the log acceptance
    ratio of random-walk blocks; it carries density factors that are only
    available in ratio form. It is evaluated only when the proposal lies in
    the support of ``target``.
    """
    blocks = list(blocks)
    _check_partition(blocks, target.dim)
    tf = target.transform()
    x = target.check_theta(np.array(init, dtype=float))
    z = tf.to_unconstrained(x)
    x, logj = tf.from_unconstrained(z)
    lp = target.log_density(x) + logj
    if not np.isfinite(lp):
        raise SamplerError(f"initial point is outside the support of the target: {x}")

    ss = seed_sequence(settings.seed)
    rngs = [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(len(blocks))]

    base = np.broadcast_to(np.asarray(settings.step_size, dtype=float), (target.dim,))
    steps = []
    for b in blocks:
        if isinstance(b, RandomWalkBlock):
            steps.append(b.step_size.copy() if b.step_size is not None else base[b.indices].copy())
        else:
            steps.append(None)
    log_scale = np.zeros(len(blocks))
    trackers = [_CovarianceTracker(b.indices.size, max(100, settings.warmup // 5))
                if isinstance(b, RandomWalkBlock) and b.adapt_cov and settings.adapt and settings.warmup > 0
                else None for b in blocks]
    targets = []
    for b in blocks:
        if settings.target_accept is not None:
            targets.append(settings.target_accept)
        elif isinstance(b, RandomWalkBlock):
            targets.append(0.44 if b.indices.size == 1 else 0.234)
        else:
            targets.append(None)

    n_keep = settings.kept
    draws = np.empty((n_keep, target.dim))
    extra_names = {}
    extra = {}
    accepted = np.zeros(len(blocks), dtype=np.int64)
    proposed = np.zeros(len(blocks), dtype=np.int64)
    warm_acc = np.zeros(len(blocks), dtype=np.int64)
    k = 0

    for it in range(settings.iterations):
        warm = it < settings.warmup
        for bi, b in enumerate(blocks):
            rng = rngs[bi]
            if isinstance(b, RandomWalkBlock):
                eps = rng.standard_normal(b.indices.size)
                log_u = math.log(rng.random())
                zp = z.copy()
                tr = trackers[bi]
                if tr is not None and tr.chol is not None:
                    zp[b.indices] += math.exp(log_scale[bi]) * tr.factor * (tr.chol @ eps)
                else:
                    zp[b.indices] += math.exp(log_scale[bi]) * steps[bi] * eps
                xp, logjp = tf.from_unconstrained(zp)
                lpp = target.log_density(xp)
                if math.isnan(lpp):
                    raise SamplerError(f"target returned NaN at {xp}")
                lpp += logjp
                if lpp == -math.inf or np.isnan(lpp):
                    log_a = -math.inf
                else:
                    log_a = lpp - lp
                    if ratio_term is not None:
                        log_a += ratio_term(xp, x)
                ok = log_u < log_a
                if ok:
                    x, z, lp = xp, zp, lpp
                if warm and settings.adapt:
                    a = 1.0 if log_a >= 0 else math.exp(log_a)
                    log_scale[bi] += (it + 1) ** -0.6 * (a - targets[bi])
                    if tr is not None and tr.update(it, z[b.indices]) and tr.n == tr.start:
                        log_scale[bi] = 0.0
            else:
                xn, ok = b.update(x, rng)
                if ok:
                    x = target.check_theta(np.array(xn, dtype=float))
                    z = tf.to_unconstrained(x)
                    lp = target.log_density(x) + tf.from_unconstrained(z)[1]
            proposed[bi] += 1
            if ok:
                accepted[bi] += 1
                if warm:
                    warm_acc[bi] += 1

        if it + 1 == settings.warmup:
            for bi, b in enumerate(blocks):
                if isinstance(b, RandomWalkBlock) and warm_acc[bi] == 0:
                    raise SamplerError(f"block {bi} accepted no moves during warmup")
            accepted[:] = 0
            proposed[:] = 0

        if not warm and (it - settings.warmup) % settings.thin == 0:
            draws[k] = x
            for b in blocks:
                if isinstance(b, CustomBlock) and b.state is not None:
                    for name, val in b.state().items():
                        if name not in extra:
                            extra[name] = []
                            extra_names[name] = True
                        extra[name].append(val)
            k += 1

    if settings.min_accept > 0:
        rates = accepted / np.maximum(proposed, 1)
        for bi, b in enumerate(blocks):
            if isinstance(b, RandomWalkBlock) and rates[bi] < settings.min_accept:
                raise SamplerError(
                    f"block {bi} ({b.name or list(b.indices)}) acceptance {rates[bi]:.4f} "
                    f"below {settings.min_accept} after warmup; final scale {math.exp(log_scale[bi]):.3g}")

    chain = Chain(
        draws=draws,
        names=tuple(target.names),
        accepted=accepted,
        proposed=proposed,
        block_names=tuple(b.name or ("block%d" % i) for i, b in enumerate(blocks)),
        settings=settings.describe(),
        step_sizes=[None if s is None else (math.exp(log_scale[i]) * s).tolist() for i, s in enumerate(steps)],
        extra={k_: np.asarray(v) for k_, v in extra.items()},
    )
    if record_phi:
        chain.phi = target.phi_batch(draws)
        chain.phi_names = tuple(target.phi_names)
    return chain


def rw_metropolis(target: DensityModel, init, settings: MhSettings,
                  ratio_term: Optional[Callable] = None, record_phi: bool = False) -> Chain:
    """Joint Gaussian random-walk Metropolis over all coordinates."""
    block = RandomWalkBlock(np.arange(target.dim), name="all")
    return gibbs_blocks(target, init, [block], settings, ratio_term=ratio_term, record_phi=record_phi)


def _check_partition(blocks, dim):
    seen = np.zeros(dim, dtype=int)
    for b in blocks:
        if np.any(b.indices < 0) or np.any(b.indices >= dim):
            raise ValueError("block index out of range")
        seen[b.indices] += 1
    if np.any(seen > 1):
        raise ValueError(f"blocks overlap on coordinates {np.flatnonzero(seen > 1).tolist()}")


def chain_to_json(chain: Chain) -> str:
    return json.dumps(chain.metadata(), indent=2, sort_keys=True)
