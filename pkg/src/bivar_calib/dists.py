"""Normal utilities and the bivariate normal truncated to nonnegative wind.

Coordinates are ordered ``(wind, temperature)``. The truncation region is
always ``{x : x[0] >= 0}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

_LOG_2PI = float(np.log(2.0 * np.pi))
_LOG_SQRT_2PI = 0.5 * _LOG_2PI
_PD_RTOL = 1e-10
# Below this acceptance probability rejection sampling is abandoned.
_REJECTION_MIN_ACCEPT = 0.05


class InvalidDistributionError(ValueError):
    """Raised for a scale matrix that is not symmetric positive definite."""


def std_normal_pdf(z):
    z = np.asarray(z, dtype=float)
    return np.exp(-0.5 * z * z - _LOG_SQRT_2PI)


def std_normal_cdf(z):
    return special.ndtr(np.asarray(z, dtype=float))


def std_normal_quantile(p):
    """Inverse of the standard normal CDF; ``p`` must lie strictly in (0, 1)."""
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0.0) & (p < 1.0))):
        raise ValueError("std_normal_quantile requires 0 < p < 1")
    return special.ndtri(p)


def log_std_normal_cdf(z):
    return special.log_ndtr(np.asarray(z, dtype=float))


def hazard(t):
    """Inverse Mills ratio ``phi(t) / Phi(t)``, evaluated in log space.

    Stays finite for very negative ``t`` where both numerator and denominator
    underflow.
    """
    t = np.asarray(t, dtype=float)
    return np.exp(-0.5 * t * t - _LOG_SQRT_2PI - special.log_ndtr(t))


def check_scale(sigma) -> np.ndarray:
    sigma = np.array(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise InvalidDistributionError(f"scale matrix must be square, got shape {sigma.shape}")
    if not np.all(np.isfinite(sigma)):
        raise InvalidDistributionError("scale matrix has non-finite entries")
    if not np.allclose(sigma, sigma.T, rtol=1e-12, atol=0.0):
        raise InvalidDistributionError("scale matrix is not symmetric")
    eig = np.linalg.eigvalsh(sigma)
    if eig[0] <= 0.0 or eig[0] < _PD_RTOL * np.trace(sigma):
        raise InvalidDistributionError(
            f"scale matrix is not positive definite (eigenvalues {eig})"
        )
    return sigma


@dataclass(frozen=True, eq=False)
class Moments2:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True, eq=False)
class TruncBivNormal:
    """Bivariate normal with location ``mu`` and scale ``sigma`` restricted to
    nonnegative wind and renormalised by ``Phi(mu_W / sigma_W)``."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(-1)
        if mu.shape != (2,) or not np.all(np.isfinite(mu)):
            raise InvalidDistributionError(f"location must be a finite 2-vector, got {self.mu!r}")
        sigma = check_scale(self.sigma)
        if sigma.shape != (2, 2):
            raise InvalidDistributionError("scale matrix must be 2x2")
        mu.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def sd_wind(self) -> float:
        return float(np.sqrt(self.sigma[0, 0]))

    def pdf(self, x):
        return pdf(self, x)

    def logpdf(self, x):
        return trunc_logpdf(x, self.mu, self.sigma)

    def moments(self) -> Moments2:
        return moments(self)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample(self, n, rng)


def trunc_logpdf(x, mu, sigma, truncated: bool = True):
    """Log density of a d-variate normal, optionally truncated to ``x[..., 0] >= 0``.

    ``x`` and ``mu`` broadcast against each other with the coordinate on the
    last axis; ``sigma`` is a single ``(d, d)`` scale matrix shared by all
    rows. Returns ``-inf`` outside the support.
    """
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    d = sigma.shape[0]
    prec = np.linalg.inv(sigma)
    _, logdet = np.linalg.slogdet(sigma)
    r = x - mu
    quad = np.einsum("...i,ij,...j->...", r, prec, r)
    out = -0.5 * quad - 0.5 * logdet - 0.5 * d * _LOG_2PI
    if truncated:
        sd_w = np.sqrt(sigma[0, 0])
        out = out - special.log_ndtr(mu[..., 0] / sd_w)
        out = np.where(x[..., 0] >= 0.0, out, -np.inf)
    return out


def pdf(d: TruncBivNormal, x) -> float | np.ndarray:
    """Density of ``d`` at ``x`` (a 2-vector or an ``(n, 2)`` array)."""
    out = np.exp(trunc_logpdf(x, d.mu, d.sigma))
    return float(out) if np.ndim(out) == 0 else out


def truncation_terms(mu_w, sd_w):
    """Return ``(t, h)`` with ``t = mu_w / sd_w`` and ``h = phi(t) / Phi(t)``."""
    t = np.asarray(mu_w, dtype=float) / sd_w
    return t, hazard(t)


def moments(d: TruncBivNormal) -> Moments2:
    """Closed-form mean and covariance of the truncated distribution.

    With ``t = mu_W / sigma_W``, ``h`` the inverse Mills ratio at ``t`` and
    ``v = sigma[:, 0]`` (the wind column)::

        mean = mu + (h / sigma_W) * v
        cov  = sigma - (t*h + h**2) / sigma_W**2 * v v^T

    Temperature moves with wind through the regression of T on W, so the
    temperature mean and the cross/temperature covariance entries change
    whenever ``sigma_WT != 0``. For ``sigma_WT = 0`` only the wind entries move.
    """
    sd_w = d.sd_wind
    t, h = truncation_terms(d.mu[0], sd_w)
    t, h = float(t), float(h)
    v = d.sigma[:, 0]
    mean = trunc_mean_rows(d.mu, d.sigma)
    cov = d.sigma - ((t * h + h * h) / d.sigma[0, 0]) * np.outer(v, v)
    return Moments2(mean=mean, cov=cov)


def trunc_mean_rows(mu, sigma) -> np.ndarray:
    """Truncated means for each row of ``mu`` (shape ``(..., 2)``) under a
    common scale matrix."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    sd_w = np.sqrt(sigma[0, 0])
    _, h = truncation_terms(mu[..., 0], sd_w)
    return mu + (h / sd_w)[..., None] * sigma[:, 0]


def sample_rows(mu, sigma, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of ``mu`` (shape ``(n, 2)``) from the truncated law with
    common scale ``sigma``.

    Rows whose acceptance probability ``Phi(mu_W / sigma_W)`` is at least 0.05
    use rejection from the untruncated normal; the rest draw wind by inverse
    CDF on the truncated marginal and temperature from its conditional normal.
    """
    mu = np.asarray(mu, dtype=float)
    n = mu.shape[0]
    sigma = np.asarray(sigma, dtype=float)
    chol = np.linalg.cholesky(sigma)
    sd_w = np.sqrt(sigma[0, 0])
    t = mu[:, 0] / sd_w
    accept = special.ndtr(t)
    out = np.empty((n, 2))

    rej = np.flatnonzero(accept >= _REJECTION_MIN_ACCEPT)
    pending = rej
    while pending.size:
        z = rng.standard_normal((pending.size, 2))
        draw = mu[pending] + z @ chol.T
        ok = draw[:, 0] >= 0.0
        out[pending[ok]] = draw[ok]
        pending = pending[~ok]

    inv = np.flatnonzero(accept < _REJECTION_MIN_ACCEPT)
    if inv.size:
        u = rng.random(inv.size)
        u = np.where(u > 0.0, u, np.finfo(float).tiny)
        # Z > -t  <=>  -Z < t: draw -Z from the normal restricted below t.
        z_w = -special.ndtri_exp(np.log(u) + special.log_ndtr(t[inv]))
        w = np.maximum(mu[inv, 0] + sd_w * z_w, 0.0)
        slope = sigma[0, 1] / sigma[0, 0]
        cond_sd = np.sqrt(max(sigma[1, 1] - sigma[0, 1] * slope, 0.0))
        temp = mu[inv, 1] + slope * (w - mu[inv, 0]) + cond_sd * rng.standard_normal(inv.size)
        out[inv, 0] = w
        out[inv, 1] = temp
    return out


def sample(d: TruncBivNormal, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("sample size must be at least 1")
    return sample_rows(np.broadcast_to(d.mu, (n, 2)), d.sigma, rng)
