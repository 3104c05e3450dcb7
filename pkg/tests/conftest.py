import datetime as dt

import numpy as np

from bivar_calib import dists
from bivar_calib.data import ForecastCase, TrainingWindow

D0 = dt.date(2010, 1, 1)


def make_window(X, F, n_days=40):
    """Training window holding one case per row of ``X`` / ``F``."""
    X = np.asarray(X, dtype=float)
    F = np.asarray(F, dtype=float)
    cases = [
        ForecastCase(f"S{i:04d}", D0 + dt.timedelta(days=i % n_days), F[i], X[i]) for i in range(len(X))
    ]
    return TrainingWindow(cases, n_days, D0 + dt.timedelta(days=n_days))


# Recovery design: forecast anomalies centred at zero keep the intercept well
# identified; mu_W / sigma_W >= 4 for every case (no-truncation regime).
REC_A = np.array([3.0, -1.0])
REC_B = np.array([[0.9, 0.05], [0.1, 1.0]])
REC_SIGMA = np.array([[0.25, 0.05], [0.05, 0.25]])


def single_component_data(n, rng, A=REC_A, B=REC_B, sigma=REC_SIGMA):
    """Forecasts ``(n, 1, 2)`` and observations drawn from one truncated component."""
    F = rng.uniform([-1.0, -2.0], [1.0, 2.0], size=(n, 1, 2))
    mu = np.asarray(A) + F[:, 0, :] @ np.asarray(B).T
    X = dists.sample_rows(mu, np.asarray(sigma), rng)
    return X, F
