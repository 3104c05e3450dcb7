"""Maximum likelihood for truncated-normal BMA mixtures by EM.

Each EM cycle is one E step (responsibilities), the weight update, and a
single sweep of the hazard-corrected location/scale updates. The sweep is a
fixed-point iteration, not an exact maximiser, so :func:`fit` keeps the
iterate with the highest observed-data log-likelihood.

The array core works in dimension ``d`` (1 or 2) with the first coordinate
optionally truncated at zero, so the univariate margins of the copula baseline
use the same update code as the bivariate model.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.special import logsumexp

from . import dists
from .bma import BmaModel, GroupSpec, Mode
from .data import TrainingWindow


class DegenerateLikelihoodError(ValueError):
    """Some training case has zero density under every component."""


class RankDeficiencyError(ValueError):
    """The weighted forecast Gram matrix of a location group is singular."""


class EMDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 500
    tol_loglik: float = 1e-6
    tol_param: float = 1e-6
    min_weight: float = 1e-4
    sigma_floor: float = 1e-8

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        for name in ("tol_loglik", "tol_param", "min_weight", "sigma_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Diagnostics:
    iterations: int
    loglik_trace: list[float]
    converged: bool
    best_iter: int
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "loglik_trace": list(self.loglik_trace),
            "converged": self.converged,
            "best_iter": self.best_iter,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class EmState:
    model: BmaModel
    responsibilities: np.ndarray  # (N, M)
    loglik: float
    iteration: int = 0


@dataclass
class Params:
    """Raw parameter arrays: group weights ``(G,)``, ``A (L, d)``,
    ``B (L, d, d)`` and ``sigma (d, d)``."""

    weights: np.ndarray
    A: np.ndarray
    B: np.ndarray
    sigma: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights, self.A.ravel(), self.B.ravel(), self.sigma.ravel()])


@dataclass(frozen=True)
class Layout:
    """How members map to weight groups and to location maps."""

    member_group: np.ndarray  # (M,)
    sizes: np.ndarray  # (G,)
    loc_index: np.ndarray  # (M,) index into A/B
    n_loc: int

    @classmethod
    def from_spec(cls, spec: GroupSpec, mode: Mode) -> "Layout":
        mg = spec.member_group()
        if mode == "parsimonious":
            return cls(mg, spec.sizes, np.zeros_like(mg), 1)
        return cls(mg, spec.sizes, mg, spec.n_groups)

    def loc_indicator(self) -> np.ndarray:
        return (self.loc_index[:, None] == np.arange(self.n_loc)[None, :]).astype(float)

    def group_indicator(self) -> np.ndarray:
        return (self.member_group[:, None] == np.arange(len(self.sizes))[None, :]).astype(float)


# ---------------------------------------------------------------- array core


def locations(p: Params, F: np.ndarray, lay: Layout, A=None, B=None) -> np.ndarray:
    A = p.A if A is None else A
    B = p.B if B is None else B
    return A[lay.loc_index] + np.einsum("mij,nmj->nmi", B[lay.loc_index], F)


def component_logdens(X, MU, sigma, truncated: bool) -> np.ndarray:
    return dists.trunc_logpdf(X[:, None, :], MU, sigma, truncated)


def _hazard(MU, sigma, truncated: bool) -> np.ndarray:
    if not truncated:
        return np.zeros(MU.shape[:-1])
    return dists.hazard(MU[..., 0] / np.sqrt(sigma[0, 0]))


def responsibilities(logdens: np.ndarray, member_weights: np.ndarray):
    """Return ``(Z, per-case log mixture density)``."""
    with np.errstate(divide="ignore"):
        a = logdens + np.log(member_weights)[None, :]
    ll = logsumexp(a, axis=1)
    bad = np.flatnonzero(~np.isfinite(ll))
    if bad.size:
        raise DegenerateLikelihoodError(
            f"training case {int(bad[0])} has zero density under every component"
        )
    return np.exp(a - ll[:, None]), ll


def weights_from_resp(Z: np.ndarray, lay: Layout) -> np.ndarray:
    n = Z.shape[0]
    col = Z.sum(axis=0)
    return np.einsum("mg,m->g", lay.group_indicator(), col) / (n * lay.sizes)


def floor_weights(w: np.ndarray, sizes: np.ndarray, min_weight: float) -> np.ndarray:
    w = np.maximum(w, min_weight)
    return w / (w @ sizes)


def floor_scale(S: np.ndarray, floor: float) -> np.ndarray:
    S = 0.5 * (S + S.T)
    vals, vecs = np.linalg.eigh(S)
    lo = max(floor, 1e-9 * float(np.abs(vals).sum()))
    if vals[0] >= lo:
        return S
    vals = np.maximum(vals, lo)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def expected_cll(X, F, Z, p: Params, lay: Layout, truncated: bool) -> float:
    """Expected complete-data log-likelihood for fixed responsibilities."""
    logd = component_logdens(X, locations(p, F, lay), p.sigma, truncated)
    with np.errstate(divide="ignore"):
        logw = np.log(p.weights[lay.member_group])
    return float(np.sum(Z * (logw[None, :] + logd)))


def scale_candidate(X, MU, Z, sigma_old, truncated: bool, rule: str = "derived") -> np.ndarray:
    """Hazard-corrected scatter update at new locations ``MU``.

    ``rule="derived"`` uses the stationarity condition of the complete-data
    log-likelihood: ``S + mean(z * mu_W * h / sd_W**3) * v v^T`` with ``v`` the
    wind column of ``sigma_old``. ``rule="printed"`` reproduces a variant whose
    temperature entry is ``(s_WT / s_W)**3`` instead of ``(s_WT / s_W)**2``; it
    is kept only for comparison.
    """
    n = X.shape[0]
    r = X[:, None, :] - MU
    Zr = Z[..., None] * r
    S = (r[..., :, None] * Zr[..., None, :]).sum(axis=(0, 1)) / n
    if not truncated:
        return S
    sd_w = np.sqrt(sigma_old[0, 0])
    h = _hazard(MU, sigma_old, truncated)
    coef = float(np.sum(Z * MU[..., 0] * h)) / n
    if rule == "derived":
        v = sigma_old[:, 0]
        return S + coef / sd_w**3 * np.outer(v, v)
    if rule == "printed":
        s_w2, s_wt = sigma_old[0, 0], sigma_old[0, 1]
        corr = np.array([[s_w2, s_wt], [s_wt, (s_wt / sd_w) ** 3]])
        return S + coef / sd_w * corr
    raise ValueError(f"unknown scale rule {rule!r}")


def location_scale_sweep(
    X,
    F,
    Z,
    p: Params,
    lay: Layout,
    truncated: bool,
    sigma_floor: float = 1e-8,
    rule: str = "derived",
    safeguard: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One sweep of the intercept, slope and scale updates.

    The intercept and slope steps each maximise a tangent minorant of the
    expected complete-data log-likelihood (the truncation term ``-log Phi`` is
    convex), so neither can decrease it. The scale step is a plain fixed
    point; with ``safeguard`` it is backtracked towards the old scale whenever
    it would lower the objective.

    Forecasts are centred at each location group's responsibility-weighted
    mean before the intercept/slope steps and the intercept is mapped back
    afterwards. The model and fixed points are unchanged; without centring the
    two steps are nearly collinear for forecasts far from zero (temperature in
    K) and the sweep crawls.
    """
    sigma = p.sigma
    sd_w = np.sqrt(sigma[0, 0])
    c = sigma[:, 0] / sd_w
    Lm = lay.loc_indicator()
    li = lay.loc_index

    zsum = Lm.T @ Z.sum(axis=0)
    if np.any(zsum <= 0.0):
        raise DegenerateLikelihoodError("a location group carries no responsibility mass")
    fbar = _to_groups(Lm, (Z[..., None] * F).sum(axis=0)) / zsum[:, None]
    Fc = F - fbar[li]
    # intercept in centred coordinates: A' = A + B fbar
    A_c = p.A + np.einsum("lij,lj->li", p.B, fbar)

    BF = np.einsum("mij,nmj->nmi", p.B[li], Fc)
    h = _hazard(A_c[li] + BF, sigma, truncated)
    resid = X[:, None, :] - BF - h[..., None] * c
    A_c = _to_groups(Lm, (Z[..., None] * resid).sum(axis=0)) / zsum[:, None]

    h_t = _hazard(A_c[li] + BF, sigma, truncated)
    R = X[:, None, :] - A_c[li] - h_t[..., None] * c
    ZFc = Z[..., None] * Fc
    num_b = _to_groups(Lm, (R[..., :, None] * ZFc[..., None, :]).sum(axis=0))
    gram = _to_groups(Lm, (Fc[..., :, None] * ZFc[..., None, :]).sum(axis=0))
    B_new = np.empty_like(p.B)
    for k in range(lay.n_loc):
        ev = np.linalg.eigvalsh(gram[k])
        if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
            raise RankDeficiencyError(
                f"forecast Gram matrix of location group {k} is singular (eigenvalues {ev})"
            )
        B_new[k] = np.linalg.solve(gram[k], num_b[k].T).T
    A_new = A_c - np.einsum("lij,lj->li", B_new, fbar)

    MU = A_c[li] + np.einsum("mij,nmj->nmi", B_new[li], Fc)
    cand = floor_scale(scale_candidate(X, MU, Z, sigma, truncated, rule), sigma_floor)
    if safeguard:
        cand = _backtrack_scale(X, MU, Z, sigma, cand, truncated)
    return A_new, B_new, cand


def _to_groups(indicator: np.ndarray, per_member: np.ndarray) -> np.ndarray:
    """Sum per-member quantities ``(M, ...)`` into groups ``(L, ...)``."""
    return np.tensordot(indicator.T, per_member, axes=1)


def _scale_objective(X, MU, Z, sigma, truncated) -> float:
    return float(np.sum(Z * component_logdens(X, MU, sigma, truncated)))


def _backtrack_scale(X, MU, Z, old, cand, truncated, max_halvings: int = 30):
    base = _scale_objective(X, MU, Z, old, truncated)
    lam = 1.0
    for _ in range(max_halvings):
        trial = (1.0 - lam) * old + lam * cand
        if _scale_objective(X, MU, Z, trial, truncated) >= base:
            return trial
        lam *= 0.5
    return old


def initial_params(X, F, lay: Layout, sigma_floor: float = 1e-8) -> tuple[Params, list[str]]:
    """Least-squares location maps per location group, observation covariance
    as scale, equal weights."""
    n, m, d = F.shape
    notes: list[str] = []
    A = np.zeros((lay.n_loc, d))
    B = np.zeros((lay.n_loc, d, d))
    for k in range(lay.n_loc):
        cols = np.flatnonzero(lay.loc_index == k)
        f = F[:, cols, :].reshape(-1, d)
        y = np.repeat(X[:, None, :], len(cols), axis=1).reshape(-1, d)
        design = np.hstack([np.ones((f.shape[0], 1)), f])
        coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
        if rank < d + 1:
            A[k] = (y - f).mean(axis=0)
            B[k] = np.eye(d)
            notes.append(f"location group {k}: rank-deficient regression, used A=mean residual, B=I")
        else:
            A[k] = coef[0]
            B[k] = coef[1:].T
    cov = np.atleast_2d(np.cov(X.T)) if n > 1 else np.zeros((d, d))
    sigma = floor_scale(cov, sigma_floor)
    weights = np.full(len(lay.sizes), 1.0 / m)
    return Params(weights, A, B, sigma), notes


def run_em(
    X,
    F,
    lay: Layout,
    truncated: bool,
    config: EmConfig,
    init: Params | None = None,
    rule: str = "derived",
) -> tuple[Params, Diagnostics, np.ndarray]:
    """EM on raw arrays. Returns the best iterate, diagnostics and its
    responsibilities."""
    notes: list[str] = []
    if init is None:
        p, notes = initial_params(X, F, lay, config.sigma_floor)
    else:
        p = init
    n_params = p.flat().size
    if X.shape[0] < n_params / 2:
        warnings.warn(
            f"only {X.shape[0]} training cases for {n_params} parameters", RuntimeWarning, stacklevel=2
        )

    def estep(q: Params):
        logd = component_logdens(X, locations(q, F, lay), q.sigma, truncated)
        Z, ll = responsibilities(logd, q.weights[lay.member_group])
        return Z, float(ll.sum())

    Z, ll = estep(p)
    trace = [ll]
    best = (ll, p, Z, 0)
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        w = floor_weights(weights_from_resp(Z, lay), lay.sizes, config.min_weight)
        A, B, S = location_scale_sweep(
            X, F, Z, p, lay, truncated, config.sigma_floor, rule=rule
        )
        q = Params(w, A, B, S)
        if not np.all(np.isfinite(q.flat())):
            raise EMDivergenceError(f"non-finite parameters at EM iteration {it}")
        Z, ll_new = estep(q)
        trace.append(ll_new)
        if ll_new > best[0]:
            best = (ll_new, q, Z, it)
        dparam = float(np.max(np.abs(q.flat() - p.flat())))
        rel = abs(ll_new - ll) / max(abs(ll), 1e-300)
        p, ll = q, ll_new
        if rel < config.tol_loglik or dparam < config.tol_param:
            converged = True
            break
    diag = Diagnostics(
        iterations=it, loglik_trace=trace, converged=converged, best_iter=best[3], notes=notes
    )
    return best[1], diag, best[2]


# ------------------------------------------------------------ model-level API


def _arrays(window: TrainingWindow) -> tuple[np.ndarray, np.ndarray]:
    if window.N == 0:
        raise ValueError("empty training window")
    X, F = window.arrays()
    if np.any(X[:, 0] < 0):
        raise ValueError("training observations must have nonnegative wind")
    return X, F


def to_params(model: BmaModel) -> Params:
    return Params(
        np.array(model.weights), np.array(model.A), np.array(model.B), np.array(model.sigma)
    )


def from_params(p: Params, spec: GroupSpec, mode: Mode, meta: dict | None = None) -> BmaModel:
    return BmaModel(spec=spec, weights=p.weights, A=p.A, B=p.B, sigma=p.sigma, mode=mode, meta=meta or {})


def log_likelihood(model: BmaModel, window: TrainingWindow) -> float:
    """Observed-data log-likelihood of the window."""
    X, F = _arrays(window)
    lay = Layout.from_spec(model.spec, model.mode)
    logd = component_logdens(X, locations(to_params(model), F, lay), model.sigma, True)
    _, ll = responsibilities(logd, model.member_weights())
    return float(ll.sum())


def e_step(state: EmState | BmaModel, window: TrainingWindow) -> np.ndarray:
    model = state.model if isinstance(state, EmState) else state
    X, F = _arrays(window)
    lay = Layout.from_spec(model.spec, model.mode)
    logd = component_logdens(X, locations(to_params(model), F, lay), model.sigma, True)
    Z, _ = responsibilities(logd, model.member_weights())
    return Z


def m_step_weights(resp: np.ndarray, spec: GroupSpec | None = None) -> np.ndarray:
    """Group weights from responsibilities ``(N, M)``: column means, averaged
    within each group. Without a spec every member is its own group."""
    resp = np.asarray(resp, dtype=float)
    if spec is None:
        spec = GroupSpec(tuple((str(i), (i,)) for i in range(resp.shape[1])))
    return weights_from_resp(resp, Layout.from_spec(spec, "full"))


def m_step_location_scale(
    state: EmState, window: TrainingWindow, config: EmConfig | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    config = config or EmConfig()
    X, F = _arrays(window)
    lay = Layout.from_spec(state.model.spec, state.model.mode)
    return location_scale_sweep(
        X, F, state.responsibilities, to_params(state.model), lay, True, config.sigma_floor
    )


def initialize(
    window: TrainingWindow, spec: GroupSpec, mode: Mode = "full", config: EmConfig | None = None
) -> BmaModel:
    config = config or EmConfig()
    X, F = _arrays(window)
    p, notes = initial_params(X, F, Layout.from_spec(spec, mode), config.sigma_floor)
    return from_params(p, spec, mode, {"init_notes": notes})


def fit(
    window: TrainingWindow,
    spec: GroupSpec,
    mode: Mode = "full",
    config: EmConfig | None = None,
    init: BmaModel | None = None,
) -> tuple[BmaModel, Diagnostics]:
    """Fit a bivariate BMA model on a training window."""
    config = config or EmConfig()
    X, F = _arrays(window)
    if F.shape[1] != spec.n_members:
        raise ValueError(f"window has {F.shape[1]} members, grouping expects {spec.n_members}")
    lay = Layout.from_spec(spec, mode)
    p0 = to_params(init) if init is not None else None
    p, diag, _ = run_em(X, F, lay, True, config, init=p0)
    meta = {
        "training_window": {
            "start_date": window.start_date.isoformat(),
            "end_date": window.end_date.isoformat(),
        }
    }
    return from_params(p, spec, mode, meta), diag
