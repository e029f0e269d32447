"""Chain diagnostics: effective sample size, stuck runs, quantile comparison.

Reports are plain dataclasses with ``to_dict`` for JSON and long-format
``(statistic, chain, value)`` rows for CSV.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .density import MeldError

DEFAULT_GRID = tuple(np.round(np.arange(1, 20) * 0.05, 2))
TAIL_GRID = (0.005, 0.01, 0.025, 0.975, 0.99, 0.995)


class CsvFormatError(MeldError, ValueError):
    pass


def _column(chain, dimension=None) -> np.ndarray:
    if hasattr(chain, "column") and dimension is not None and not isinstance(dimension, (int, np.integer)):
        return np.asarray(chain.column(dimension), dtype=float)
    x = np.asarray(getattr(chain, "draws", chain), dtype=float)
    if x.ndim == 1:
        return x
    return x[:, 0 if dimension is None else int(dimension)]


# ---------------------------------------------------------------------------
# Effective sample size
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EssReport:
    ess: float
    n: int
    flag: Optional[str] = None  # "constant" or "antithetic"
    raw: float = float("nan")

    def __float__(self):
        return self.ess

    def to_dict(self):
        return asdict(self)


def autocorrelation(x: np.ndarray) -> np.ndarray:
    """Sample autocorrelation at all lags (biased autocovariance, via FFT)."""
    n = x.shape[0]
    y = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(y, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def ess(chain, dimension=None) -> EssReport:
    """Initial-positive-sequence effective sample size of one dimension.

    A constant chain gives ``ess=1`` with flag ``"constant"``. When the
    estimate exceeds ``N`` (negatively correlated chains) it is clamped to
    ``N`` and flagged ``"antithetic"``; the unclamped value is kept in ``raw``.
    """
    x = _column(chain, dimension)
    n = x.shape[0]
    if n < 10:
        raise ValueError("ESS needs a chain of length >= 10")
    if not np.all(np.isfinite(x)):
        raise ValueError("chain contains non-finite values")
    if np.ptp(x) == 0.0:
        return EssReport(1.0, n, "constant", 1.0)
    rho = autocorrelation(x)
    tau = -1.0
    for k in range(n // 2):
        gamma = rho[2 * k] + (rho[2 * k + 1] if 2 * k + 1 < n else 0.0)
        if gamma <= 0:
            break
        tau += 2.0 * gamma
    raw = n / tau if tau > 0 else math.inf
    if raw > n:
        return EssReport(float(n), n, "antithetic", raw)
    return EssReport(float(raw), n, None, raw)


# ---------------------------------------------------------------------------
# Stuck runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StuckReport:
    n: int
    longest: int
    start: int
    threshold: int
    fraction: float  # share of iterations inside runs of length >= threshold
    terminal: int  # length of the run that ends the chain

    @property
    def terminal_fraction(self) -> float:
        return self.terminal / self.n if self.n else 0.0

    def to_dict(self):
        d = asdict(self)
        d["terminal_fraction"] = self.terminal_fraction
        return d


def run_lengths(x, rel_eps: float = 0.0):
    """Run-length encoding: ``(starts, lengths)``.

    Consecutive values are equal when identical (``rel_eps=0``) or within
    ``rel_eps * max(|a|, |b|)``. Rows of a 2-D input must match in every
    column.
    """
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    n = a.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if rel_eps == 0.0:
        same = np.all(a[1:] == a[:-1], axis=1)
    else:
        tol = rel_eps * np.maximum(np.abs(a[1:]), np.abs(a[:-1]))
        same = np.all(np.abs(a[1:] - a[:-1]) <= tol, axis=1)
    breaks = np.flatnonzero(~same) + 1
    starts = np.concatenate([[0], breaks]).astype(np.int64)
    ends = np.concatenate([breaks, [n]]).astype(np.int64)
    return starts, ends - starts


def stuck_runs(chain, dimension=None, threshold: Optional[int] = None, rel_eps: float = 0.0) -> StuckReport:
    """Longest run of unchanged values and related counts.

    ``threshold`` defaults to 10% of the chain length (at least 2).
    Index-resampled chains repeat values exactly on rejection, so the default
    comparison is exact; pass ``rel_eps=1e-12`` for continuous chains.
    """
    if dimension is None and not hasattr(chain, "draws"):
        x = np.asarray(chain, dtype=float)
    else:
        x = _column(chain, dimension)
    n = x.shape[0]
    if threshold is None:
        threshold = max(2, int(math.ceil(0.1 * n)))
    if n == 0:
        return StuckReport(0, 0, 0, threshold, 0.0, 0)
    starts, lengths = run_lengths(x, rel_eps)
    k = int(np.argmax(lengths))
    long_mass = int(lengths[lengths >= threshold].sum())
    return StuckReport(n, int(lengths[k]), int(starts[k]), int(threshold), long_mass / n, int(lengths[-1]))


# ---------------------------------------------------------------------------
# Quantile comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QqTable:
    probs: np.ndarray
    qa: np.ndarray
    qb: np.ndarray
    tail_probs: np.ndarray
    tail_qa: np.ndarray
    tail_qb: np.ndarray
    labels: tuple = ("a", "b")

    @property
    def gaps(self) -> np.ndarray:
        return np.abs(self.qa - self.qb)

    @property
    def max_gap(self) -> float:
        return float(np.max(self.gaps))

    @property
    def mean_gap(self) -> float:
        return float(np.mean(self.gaps))

    @property
    def tail_max_gap(self) -> float:
        return float(np.max(np.abs(self.tail_qa - self.tail_qb))) if self.tail_probs.size else 0.0

    def to_dict(self):
        return {
            "labels": list(self.labels),
            "probs": self.probs.tolist(),
            "quantiles_a": self.qa.tolist(),
            "quantiles_b": self.qb.tolist(),
            "max_gap": self.max_gap,
            "mean_gap": self.mean_gap,
            "tail_probs": self.tail_probs.tolist(),
            "tail_quantiles_a": self.tail_qa.tolist(),
            "tail_quantiles_b": self.tail_qb.tolist(),
            "tail_max_gap": self.tail_max_gap,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["prob", "region", self.labels[0], self.labels[1], "gap"])
        for p, a, b in zip(self.probs, self.qa, self.qb):
            w.writerow([repr(float(p)), "body", repr(float(a)), repr(float(b)), repr(float(abs(a - b)))])
        for p, a, b in zip(self.tail_probs, self.tail_qa, self.tail_qb):
            w.writerow([repr(float(p)), "tail", repr(float(a)), repr(float(b)), repr(float(abs(a - b)))])
        return buf.getvalue()


def qq_compare(chain_a, chain_b, grid: Sequence[float] = DEFAULT_GRID, dimension=None,
               tails: Sequence[float] = TAIL_GRID, labels=("a", "b")) -> QqTable:
    """Empirical quantiles of two chains on ``grid`` plus separate tail points."""
    a = _column(chain_a, dimension)
    b = _column(chain_b, dimension)
    if a.size == 0 or b.size == 0:
        raise ValueError("both chains must be non-empty")
    p = np.asarray(grid, dtype=float)
    if p.size == 0 or np.any((p <= 0) | (p >= 1)):
        raise ValueError("probability grid must lie inside (0, 1)")
    t = np.asarray(tails, dtype=float)
    sa, sb = np.sort(a), np.sort(b)
    return QqTable(p, np.quantile(sa, p), np.quantile(sb, p), t,
                   np.quantile(sa, t) if t.size else t, np.quantile(sb, t) if t.size else t, tuple(labels))


# ---------------------------------------------------------------------------
# HDR coverage
# ---------------------------------------------------------------------------


def hdr_coverage(reference, points, mass: float = 0.95) -> float:
    """Share of ``points`` inside the ``mass`` HDR of a KDE of ``reference``.

    The HDR threshold is the ``1 - mass`` quantile of the KDE evaluated at the
    reference draws themselves.
    """
    from .kde import GaussianKde
    if not 0 < mass < 1:
        raise ValueError("mass must lie in (0, 1)")
    kde = GaussianKde(reference)
    level = np.quantile(kde.logpdf(kde.sample), 1.0 - mass)
    return float(np.mean(kde.logpdf(points) >= level))


# ---------------------------------------------------------------------------
# Tables and CSV input
# ---------------------------------------------------------------------------


def long_rows(chain_label: str, report) -> List[tuple]:
    """``(statistic, chain, value)`` rows from a report's scalar fields."""
    d = report.to_dict() if hasattr(report, "to_dict") else dict(report)
    rows = []
    for k, v in d.items():
        if isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool):
            rows.append((k, chain_label, v))
        elif v is None or isinstance(v, str):
            rows.append((k, chain_label, "" if v is None else v))
    return rows


def long_csv(rows: Iterable[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["statistic", "chain", "value"])
    for stat, chain, value in rows:
        if isinstance(value, (float, np.floating)):
            value = repr(float(value))
        w.writerow([stat, chain, value])
    return buf.getvalue()


def read_chain_csv(path):
    """Read a chain CSV (header row, numeric rows) into ``(names, array)``.

    An ``iteration`` column, if present, is dropped. Errors name the file and
    line.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}:1: empty file") from None
        if not header or any(h.strip() == "" for h in header):
            raise CsvFormatError(f"{path}:1: bad header {header}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise CsvFormatError(f"{path}:{line_no}: non-numeric value in {row}") from None
    data = np.asarray(rows, dtype=float).reshape(-1, len(header))
    if header[0] == "iteration":
        return tuple(header[1:]), data[:, 1:]
    return tuple(header), data


def compare_stuck(groups: Dict[str, Sequence[StuckReport]], terminal_fraction: float = 0.1) -> dict:
    """Median longest run and count of long terminal runs per group of replicates."""
    out = {}
    for label, reports in groups.items():
        reports = list(reports)
        out[label] = {
            "replicates": len(reports),
            "median_longest": float(np.median([r.longest for r in reports])) if reports else float("nan"),
            "terminal_stuck": sum(r.terminal >= terminal_fraction * r.n for r in reports),
        }
    return out
