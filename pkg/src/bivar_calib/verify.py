"""Multivariate forecast verification.

Energy scores (ensemble and Monte Carlo forms), multivariate and univariate
rank histograms, reliability index, determinant sharpness, Euclidean error of
point forecasts, and the geometric median used as the bivariate median.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np


class Predictive(Protocol):
    """A predictive distribution for one case."""

    n_members: int

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray: ...

    def mean(self) -> np.ndarray: ...


def energy_score_ensemble(members, x) -> float:
    """Energy score of an ensemble ``(M, d)`` against observation ``x``."""
    f = np.asarray(members, dtype=float)
    if f.ndim == 1:
        f = f[None, :]
    m = f.shape[0]
    if m == 0:
        raise ValueError("empty ensemble")
    x = np.asarray(x, dtype=float)
    term1 = np.linalg.norm(f - x, axis=1).sum() / m
    diffs = f[:, None, :] - f[None, :, :]
    term2 = np.sqrt((diffs**2).sum(axis=-1)).sum() / (2.0 * m * m)
    return float(term1 - term2)


def energy_score_mc(sample, x) -> float:
    """Monte Carlo energy score; the spread term pairs consecutive draws."""
    s = np.asarray(sample, dtype=float)
    n = s.shape[0]
    if n < 2:
        raise ValueError("energy_score_mc needs at least two draws")
    x = np.asarray(x, dtype=float)
    term1 = np.linalg.norm(s - x, axis=1).sum() / n
    term2 = np.linalg.norm(s[1:] - s[:-1], axis=1).sum() / (2.0 * (n - 1))
    return float(term1 - term2)


def _rank_from_preranks(pre_obs, pre_members, rng: np.random.Generator) -> int:
    below = int(np.sum(pre_members < pre_obs))
    ties = int(np.sum(pre_members == pre_obs))
    return below + 1 + int(rng.integers(0, ties + 1))


def multivariate_rank(members, x, rng: np.random.Generator) -> int:
    """Rank (1..M+1) of ``x`` among ``members`` under the componentwise pre-rank
    ordering, ties broken uniformly at random."""
    f = np.asarray(members, dtype=float)
    pooled = np.vstack([np.asarray(x, dtype=float)[None, :], f])
    # pre[j] = #{i : pooled[i] <= pooled[j] componentwise}
    le = np.all(pooled[:, None, :] <= pooled[None, :, :], axis=-1)
    pre = le.sum(axis=0)
    return _rank_from_preranks(pre[0], pre[1:], rng)


def univariate_rank(members, x, rng: np.random.Generator) -> int:
    f = np.asarray(members, dtype=float).reshape(-1)
    x = float(x)
    below = int(np.sum(f < x))
    ties = int(np.sum(f == x))
    return below + 1 + int(rng.integers(0, ties + 1))


@dataclass
class RankHistogram:
    counts: np.ndarray  # counts[r - 1] for rank r = 1..M+1

    @classmethod
    def from_ranks(cls, ranks: Iterable[int], n_members: int) -> "RankHistogram":
        r = np.asarray(list(ranks), dtype=int)
        if r.size and (r.min() < 1 or r.max() > n_members + 1):
            raise ValueError("rank outside 1..M+1")
        return cls(np.bincount(r - 1, minlength=n_members + 1))

    @property
    def n_cases(self) -> int:
        return int(self.counts.sum())

    @property
    def n_members(self) -> int:
        return len(self.counts) - 1

    def frequencies(self) -> np.ndarray:
        return self.counts / self.n_cases

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "count"])
        for r, c in enumerate(self.counts, start=1):
            w.writerow([r, int(c)])
        return buf.getvalue()


def reliability_index(h: RankHistogram) -> float:
    """L1 distance of the relative rank frequencies from uniform."""
    if h.n_cases == 0:
        raise ValueError("empty rank histogram")
    k = len(h.counts)
    return float(np.abs(h.frequencies() - 1.0 / k).sum())


def determinant_sharpness(cov) -> float:
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = cov.shape[0]
    det = float(np.linalg.det(cov))
    if det < 0.0:
        # round-off on a singular matrix
        if det > -1e-12 * max(float(np.abs(cov).max()), 1.0) ** d:
            return 0.0
        raise ValueError(f"covariance has negative determinant {det}")
    return det ** (1.0 / (2 * d))


def _distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    r = x - y
    if r.shape[1] == 2:
        return np.hypot(r[:, 0], r[:, 1])
    return np.sqrt(np.einsum("ij,ij->i", r, r))


def geometric_median(points, tol: float = 1e-9, max_iter: int = 1000) -> np.ndarray:
    """Minimiser of the summed Euclidean distance to ``points`` (shape ``(n, d)``).

    Weiszfeld iteration started from the coordinatewise mean or median,
    whichever has the smaller objective; it stops once an iterate moves less
    than ``tol``. When an iterate coincides with data points, the subgradient
    test decides optimality and otherwise the Vardi-Zhang step moves off the
    anchor with guaranteed descent.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] == 0:
        raise ValueError("geometric median of an empty point set")
    if x.shape[0] == 1:
        return x[0].copy()
    starts = (x.mean(axis=0), np.median(x, axis=0))
    y = min(starts, key=lambda s: _distances(x, s).sum())
    eps = 1e-12 * max(float(np.abs(x - y).max()), 1e-300)
    for _ in range(max_iter):
        d = _distances(x, y)
        at = d <= eps
        n_at = int(at.sum())
        inv = np.zeros_like(d)
        inv[~at] = 1.0 / d[~at]
        total = inv.sum()
        t = (inv @ x) / total if total > 0 else y
        if n_at == 0:
            y_new = t
        else:
            r = float(np.linalg.norm(inv[~at] @ (x[~at] - y)))
            if r <= n_at:
                return y
            frac = n_at / r
            y_new = (1.0 - frac) * t + frac * y
        step = float(np.linalg.norm(y_new - y))
        y = y_new
        if step <= tol:
            break
    return y


def gm_objective(points, alpha) -> float:
    x = np.atleast_2d(np.asarray(points, dtype=float))
    return float(_distances(x, np.asarray(alpha, dtype=float)).sum())


@dataclass
class CaseScore:
    """Per-case verification inputs; aggregated by :func:`aggregate`."""

    obs: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    es: float
    ds: float
    rank: int
    rank_wind: int
    rank_temp: int
    n_members: int


def score_case(
    forecast, obs, rng: np.random.Generator, n_mc: int = 10000
) -> CaseScore:
    """Score one forecast: a raw ensemble (array ``(M, 2)``) or a predictive
    distribution (anything with ``sample``, ``mean`` and ``n_members``).

    Predictive distributions are scored from an ``n_mc`` draw (energy score,
    covariance for sharpness, geometric median) and ranked against a separate
    ``M``-member draw.
    """
    obs = np.asarray(obs, dtype=float)
    if isinstance(forecast, np.ndarray) or isinstance(forecast, (list, tuple)):
        ens = np.asarray(forecast, dtype=float)
        m = ens.shape[0]
        es = energy_score_ensemble(ens, obs)
        cov = np.cov(ens.T) if m > 1 else np.zeros((2, 2))
        mean = ens.mean(axis=0)
        median = geometric_median(ens)
        rank_set = ens
    else:
        m = forecast.n_members
        draws = forecast.sample(n_mc, rng)
        es = energy_score_mc(draws, obs)
        cov = np.cov(draws.T)
        mean = np.asarray(forecast.mean(), dtype=float)
        median = geometric_median(draws)
        rank_set = forecast.sample(m, rng)
    return CaseScore(
        obs=obs,
        mean=mean,
        median=median,
        es=es,
        ds=determinant_sharpness(cov),
        rank=multivariate_rank(rank_set, obs, rng),
        rank_wind=univariate_rank(rank_set[:, 0], obs[0], rng),
        rank_temp=univariate_rank(rank_set[:, 1], obs[1], rng),
        n_members=m,
    )


@dataclass
class VerificationReport:
    method: str
    es: float
    delta: float
    ds: float
    ee_median: float
    ee_mean: float
    corr_median: float
    corr_mean: float
    n_cases: int
    coverage_wind: float
    coverage_temp: float
    delta_wind: float
    delta_temp: float

    def to_dict(self) -> dict:
        # NaN is not valid JSON
        return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationReport":
        vals = {k: d[k] for k in cls.__dataclass_fields__}
        return cls(**{k: (float("nan") if v is None else v) for k, v in vals.items()})


REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "method", "es", "delta", "ds", "ee_median", "ee_mean",
        "corr_median", "corr_mean", "n_cases",
    ],
    "properties": {
        "method": {"type": "string"},
        "es": {"type": "number", "minimum": 0},
        "delta": {"type": "number", "minimum": 0, "maximum": 2},
        "ds": {"type": "number", "minimum": 0},
        "ee_median": {"type": "number", "minimum": 0},
        "ee_mean": {"type": "number", "minimum": 0},
        "corr_median": {"type": ["number", "null"]},
        "corr_mean": {"type": ["number", "null"]},
        "n_cases": {"type": "integer", "minimum": 1},
        "coverage_wind": {"type": "number", "minimum": 0, "maximum": 1},
        "coverage_temp": {"type": "number", "minimum": 0, "maximum": 1},
        "delta_wind": {"type": "number", "minimum": 0},
        "delta_temp": {"type": "number", "minimum": 0},
    },
}


def _corr(a: np.ndarray) -> float:
    if a.shape[0] < 2 or np.any(a.std(axis=0) == 0.0):
        return float("nan")
    return float(np.corrcoef(a.T)[0, 1])


def histograms(scores: Sequence[CaseScore]) -> dict[str, RankHistogram]:
    m = scores[0].n_members
    return {
        "multivariate": RankHistogram.from_ranks((s.rank for s in scores), m),
        "wind": RankHistogram.from_ranks((s.rank_wind for s in scores), m),
        "temp": RankHistogram.from_ranks((s.rank_temp for s in scores), m),
    }


def aggregate(scores: Sequence[CaseScore], method: str = "") -> VerificationReport:
    if not scores:
        raise ValueError("no cases to verify")
    if len({s.n_members for s in scores}) != 1:
        raise ValueError("all cases must share one ensemble size")
    m = scores[0].n_members
    obs = np.array([s.obs for s in scores])
    means = np.array([s.mean for s in scores])
    medians = np.array([s.median for s in scores])
    hist = histograms(scores)
    inner = slice(1, m)  # ranks 2..M: observation inside the ensemble range
    return VerificationReport(
        method=method,
        es=float(np.mean([s.es for s in scores])),
        delta=reliability_index(hist["multivariate"]),
        ds=float(np.mean([s.ds for s in scores])),
        ee_median=float(np.linalg.norm(medians - obs, axis=1).mean()),
        ee_mean=float(np.linalg.norm(means - obs, axis=1).mean()),
        corr_median=_corr(medians),
        corr_mean=_corr(means),
        n_cases=len(scores),
        coverage_wind=float(hist["wind"].counts[inner].sum() / len(scores)),
        coverage_temp=float(hist["temp"].counts[inner].sum() / len(scores)),
        delta_wind=reliability_index(hist["wind"]),
        delta_temp=reliability_index(hist["temp"]),
    )


def evaluate(
    cases: Sequence[tuple[object, np.ndarray]],
    rng: np.random.Generator,
    n_mc: int = 10000,
    method: str = "",
) -> VerificationReport:
    """Score every ``(forecast, observation)`` pair and aggregate."""
    if not cases:
        raise ValueError("no cases to verify")
    return aggregate([score_case(f, x, rng, n_mc) for f, x in cases], method)
