"""Synthetic ensembles with a known truth.

Each case draws a predictable signal ``c`` from a climatological bivariate
normal. The observation is ``c + e_0`` and member ``j`` is
``c + bias + dispersion * e_j``, where the errors ``e_j`` are i.i.d. with a
covariance proportional to the climatological one. With ``dispersion = 1``
and zero bias the observation is exchangeable with the members; smaller
dispersion gives the underdispersed, U-shaped rank histograms of raw NWP
ensembles. Cases whose observed wind would be negative are redrawn, and member
wind is floored at zero.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .bma import BmaModel, make_group_model
from .data import DatasetManifest, ForecastCase
from . import bma

# climatological signal: (wind m/s, temperature K)
CLIM_MEAN = np.array([8.0, 283.0])
CLIM_SD = np.array([2.0, 5.0])
# forecast error variance as a fraction of the signal variance
ERROR_FRACTION = 0.3


@dataclass(frozen=True)
class SynthConfig:
    n_stations: int = 10
    n_days: int = 400
    M: int = 8
    truth_corr: float = 0.12
    member_bias: tuple[float, float] = (0.8, -1.2)
    dispersion_factor: float = 0.4
    grouping: str = "uwme8"
    seed: int = 0
    start_date: dt.date = dt.date(2008, 1, 1)

    def __post_init__(self):
        if self.n_stations < 1 or self.n_days < 1 or self.M < 1:
            raise ValueError("n_stations, n_days and M must be positive")
        if not self.dispersion_factor > 0:
            raise ValueError("dispersion_factor must be positive")
        if not abs(self.truth_corr) < 1:
            raise ValueError("truth_corr must lie in (-1, 1)")
        make_group_model(self.grouping, self.M)  # validates the grouping name


def _scale_matrix(sd: np.ndarray, corr: float) -> np.ndarray:
    return np.array([[sd[0] ** 2, corr * sd[0] * sd[1]], [corr * sd[0] * sd[1], sd[1] ** 2]])


def generate(cfg: SynthConfig) -> list[ForecastCase]:
    rng = np.random.default_rng(cfg.seed)
    clim = np.linalg.cholesky(_scale_matrix(CLIM_SD, cfg.truth_corr))
    err = np.sqrt(ERROR_FRACTION) * clim
    bias = np.asarray(cfg.member_bias, dtype=float)
    cases = []
    for day in range(cfg.n_days):
        date = cfg.start_date + dt.timedelta(days=day)
        for s in range(cfg.n_stations):
            while True:
                c = CLIM_MEAN + clim @ rng.standard_normal(2)
                e = rng.standard_normal((cfg.M + 1, 2)) @ err.T
                obs = c + e[0]
                if obs[0] >= 0.0:
                    break
            members = c + bias + cfg.dispersion_factor * e[1:]
            members[:, 0] = np.maximum(members[:, 0], 0.0)
            cases.append(ForecastCase(f"S{s + 1:03d}", date, members, obs))
    return cases


def manifest_for(cfg: SynthConfig) -> DatasetManifest:
    return DatasetManifest(
        ensemble_name=f"synthetic-M{cfg.M}",
        M=cfg.M,
        member_labels=[f"m{k}" for k in range(1, cfg.M + 1)],
        grouping=cfg.grouping,
    )


def sample_from_model(
    model: BmaModel, forecasts: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """One observation per forecast row (shape ``(N, M, 2)``) drawn from the
    model's predictive distribution."""
    return np.array([bma.predictive_sample(model, f, 1, rng)[0] for f in forecasts])
