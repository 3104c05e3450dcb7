"""Gaussian-copula baseline.

Wind and temperature are calibrated separately with univariate BMA (truncated
normal components for wind, normal for temperature) and joined by one latent
Gaussian correlation estimated on a held-out period.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import special

from . import dists, em
from .bma import GroupSpec
from .data import ForecastCase, TrainingWindow

Family = Literal["truncnormal", "normal"]
_VARIABLES = {"wind": (0, "truncnormal"), "temp": (1, "normal")}
CDF_CLAMP = 1e-9
CORR_CLAMP = 0.999


class InsufficientHistoryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class UniBmaModel:
    family: Family
    spec: GroupSpec
    weights: np.ndarray  # per-member weight of each group
    a: np.ndarray  # intercept per group
    b: np.ndarray  # slope per group
    variance: float

    def __post_init__(self):
        if self.family not in ("truncnormal", "normal"):
            raise ValueError(f"unknown family {self.family!r}")
        if not self.variance > 0:
            raise ValueError("variance must be positive")
        for name in ("weights", "a", "b"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            if arr.shape != (self.spec.n_groups,):
                raise ValueError(f"{name} needs one entry per group")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.weights < 0) or not np.isclose(self.weights @ self.spec.sizes, 1.0, atol=1e-9):
            raise ValueError("weights must be nonnegative with total mixture mass 1")
        object.__setattr__(self, "variance", float(self.variance))

    @property
    def sd(self) -> float:
        return float(np.sqrt(self.variance))

    @property
    def truncated(self) -> bool:
        return self.family == "truncnormal"

    def member_weights(self) -> np.ndarray:
        return self.weights[self.spec.member_group()]

    def locations(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float).reshape(-1)
        if f.size != self.spec.n_members:
            raise ValueError(f"forecast has {f.size} members, margin expects {self.spec.n_members}")
        g = self.spec.member_group()
        return self.a[g] + self.b[g] * f

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "groups": self.spec.to_list(),
            "weights": self.weights.tolist(),
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "variance": self.variance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UniBmaModel":
        return cls(
            family=d["family"],
            spec=GroupSpec.from_list(d["groups"]),
            weights=d["weights"],
            a=d["a"],
            b=d["b"],
            variance=d["variance"],
        )


def fit_margin(
    window: TrainingWindow,
    variable: str,
    spec: GroupSpec,
    config: em.EmConfig | None = None,
) -> UniBmaModel:
    """Univariate BMA fit by the same EM code as the bivariate model, in one
    dimension."""
    config = config or em.EmConfig()
    if variable not in _VARIABLES:
        raise ValueError(f"variable must be 'wind' or 'temp', got {variable!r}")
    j, family = _VARIABLES[variable]
    obs, members = window.arrays()
    X = obs[:, [j]]
    F = members[:, :, [j]]
    lay = em.Layout.from_spec(spec, "full")
    p, _, _ = em.run_em(X, F, lay, family == "truncnormal", config)
    return UniBmaModel(
        family=family,
        spec=spec,
        weights=p.weights,
        a=p.A[:, 0],
        b=p.B[:, 0, 0],
        variance=float(p.sigma[0, 0]),
    )


def _component_cdf(m: UniBmaModel, mu: np.ndarray, x: np.ndarray) -> np.ndarray:
    sd = m.sd
    if not m.truncated:
        return special.ndtr((x - mu) / sd)
    # 1 - Phi((mu - x)/sd) / Phi(mu/sd) on x >= 0
    tail = np.exp(special.log_ndtr((mu - x) / sd) - special.log_ndtr(mu / sd))
    return np.where(x >= 0.0, np.clip(1.0 - tail, 0.0, 1.0), 0.0)


def _component_pdf(m: UniBmaModel, mu: np.ndarray, x: np.ndarray) -> np.ndarray:
    sd = m.sd
    dens = dists.std_normal_pdf((x - mu) / sd) / sd
    if not m.truncated:
        return dens
    dens = dens / special.ndtr(mu / sd)
    return np.where(x >= 0.0, dens, 0.0)


def margin_cdf(m: UniBmaModel, f, x):
    mu = m.locations(f)
    x = np.asarray(x, dtype=float)
    out = _component_cdf(m, mu, x[..., None]) @ m.member_weights()
    return float(out) if out.ndim == 0 else out


def margin_pdf(m: UniBmaModel, f, x):
    mu = m.locations(f)
    x = np.asarray(x, dtype=float)
    out = _component_pdf(m, mu, x[..., None]) @ m.member_weights()
    return float(out) if out.ndim == 0 else out


def margin_mean(m: UniBmaModel, f) -> float:
    mu = m.locations(f)
    if m.truncated:
        mu = mu + m.sd * dists.hazard(mu / m.sd)
    return float(m.member_weights() @ mu)


def margin_quantile(m: UniBmaModel, f, p, tol: float = 1e-9, max_iter: int = 200):
    """Inverse of :func:`margin_cdf`.

    Bracketed root finding: a coarse CDF grid supplies the starting bracket,
    then Newton steps are taken whenever they stay inside the bracket and
    bisection otherwise, until the bracket is narrower than ``tol``.
    """
    p_arr = np.asarray(p, dtype=float)
    if np.any(~((p_arr > 0.0) & (p_arr < 1.0))):
        raise ValueError("margin_quantile requires 0 < p < 1")
    flat = p_arr.reshape(-1)
    mu = m.locations(f)
    w = m.member_weights()
    sd = m.sd
    lo_b = 0.0 if m.truncated else float(mu.min()) - 40.0 * sd
    hi_b = max(float(mu.max()), 0.0) + 40.0 * sd
    grid = np.linspace(lo_b, hi_b, 257)
    cgrid = _component_cdf(m, mu, grid[:, None]) @ w
    k = np.clip(np.searchsorted(cgrid, flat, side="left"), 1, len(grid) - 1)
    lo = grid[k - 1].copy()
    hi = grid[k].copy()
    c_lo, c_hi = cgrid[k - 1], cgrid[k]
    span = np.where(c_hi > c_lo, c_hi - c_lo, 1.0)
    x = lo + (hi - lo) * np.clip((flat - c_lo) / span, 0.0, 1.0)

    active = np.ones(flat.size, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if not idx.size:
            break
        xi = x[idx]
        g = _component_cdf(m, mu, xi[:, None]) @ w - flat[idx]
        below = g < 0.0
        lo[idx] = np.where(below, xi, lo[idx])
        hi[idx] = np.where(below, hi[idx], xi)
        dens = _component_pdf(m, mu, xi[:, None]) @ w
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = xi - g / dens
        ok = np.isfinite(newton) & (newton >= lo[idx]) & (newton <= hi[idx])
        nxt = np.where(ok, newton, 0.5 * (lo[idx] + hi[idx]))
        done = (np.abs(nxt - xi) < tol) | (hi[idx] - lo[idx] < tol) | (g == 0.0)
        x[idx] = np.where(g == 0.0, xi, nxt)
        active[idx[done]] = False
    out = x.reshape(p_arr.shape)
    return float(out) if out.ndim == 0 else out


def latent_pair(case: ForecastCase, wind: UniBmaModel, temp: UniBmaModel) -> np.ndarray:
    u = np.array(
        [
            margin_cdf(wind, case.members[:, 0], case.obs[0]),
            margin_cdf(temp, case.members[:, 1], case.obs[1]),
        ]
    )
    u = np.clip(u, CDF_CLAMP, 1.0 - CDF_CLAMP)
    return special.ndtri(u)


def estimate_latent_corr(
    history: Sequence[tuple[ForecastCase, tuple[UniBmaModel, UniBmaModel]]],
) -> float:
    """Pearson correlation of latent normal scores of past observations, each
    transformed by the margins fitted for its own date."""
    z = [latent_pair(case, wm, tm) for case, (wm, tm) in history]
    z = np.array([p for p in z if np.all(np.isfinite(p))])
    if len(z) < 10:
        raise InsufficientHistoryError(f"need at least 10 latent pairs, got {len(z)}")
    if np.any(z.std(axis=0) == 0.0):
        r = 1.0 if np.allclose(z[:, 0], z[:, 1]) else 0.0
    else:
        r = float(np.corrcoef(z.T)[0, 1])
    return float(np.clip(r, -CORR_CLAMP, CORR_CLAMP))


@dataclass(frozen=True, eq=False)
class CopulaModel:
    wind_margin: UniBmaModel
    temp_margin: UniBmaModel
    latent_corr: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not abs(self.latent_corr) < 1.0:
            raise ValueError("latent correlation must lie in (-1, 1)")

    def to_dict(self) -> dict:
        return {
            "wind_margin": self.wind_margin.to_dict(),
            "temp_margin": self.temp_margin.to_dict(),
            "latent_corr": float(self.latent_corr),
            "corr_window": self.meta.get("corr_window"),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "CopulaModel":
        return cls(
            UniBmaModel.from_dict(d["wind_margin"]),
            UniBmaModel.from_dict(d["temp_margin"]),
            float(d["latent_corr"]),
            {"corr_window": d.get("corr_window")},
        )

    @classmethod
    def from_json(cls, text: str) -> "CopulaModel":
        return cls.from_dict(json.loads(text))


def copula_sample(cm: CopulaModel, f, n: int, rng: np.random.Generator) -> np.ndarray:
    f = np.asarray(f, dtype=float).reshape(-1, 2)
    r = cm.latent_corr
    z = rng.standard_normal((n, 2))
    z[:, 1] = r * z[:, 0] + np.sqrt(1.0 - r * r) * z[:, 1]
    tiny = np.finfo(float).eps
    u = np.clip(special.ndtr(z), tiny, 1.0 - tiny)
    out = np.empty((n, 2))
    out[:, 0] = margin_quantile(cm.wind_margin, f[:, 0], u[:, 0])
    out[:, 1] = margin_quantile(cm.temp_margin, f[:, 1], u[:, 1])
    return out


@dataclass(frozen=True, eq=False)
class CopulaForecast:
    model: CopulaModel
    members: np.ndarray

    @property
    def n_members(self) -> int:
        return self.model.wind_margin.spec.n_members

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return copula_sample(self.model, self.members, n, rng)

    def mean(self) -> np.ndarray:
        return np.array(
            [
                margin_mean(self.model.wind_margin, self.members[:, 0]),
                margin_mean(self.model.temp_margin, self.members[:, 1]),
            ]
        )
