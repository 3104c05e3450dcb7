"""Bivariate BMA mixtures of wind-truncated normal components.

A model holds one weight per exchangeable group of ensemble members (the
per-member weight shared by the group) and affine location maps
``mu = A + B f`` that are either per group (``full``) or shared by every
member (``parsimonious``). All components share the scale matrix ``sigma``.

Member indices are 0-based throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.special import logsumexp

from . import dists
from .verify import geometric_median

Mode = Literal["full", "parsimonious"]
GROUP_KINDS = ("uwme8", "ah_two_group", "ah_three_group", "singleton", "exchangeable")


@dataclass(frozen=True)
class GroupSpec:
    """Partition of the ensemble members into exchangeable groups."""

    groups: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        groups = tuple((str(gid), tuple(int(i) for i in members)) for gid, members in self.groups)
        object.__setattr__(self, "groups", groups)
        if not groups:
            raise ValueError("a group spec needs at least one group")
        ids = [g for g, _ in groups]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate group ids in {ids}")
        flat = sorted(i for _, members in groups for i in members)
        if any(len(m) == 0 for _, m in groups):
            raise ValueError("every group must contain at least one member")
        if flat != list(range(len(flat))):
            raise ValueError("group members must partition 0..M-1")

    @property
    def n_members(self) -> int:
        return sum(len(m) for _, m in self.groups)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(m) for _, m in self.groups])

    @property
    def ids(self) -> list[str]:
        return [g for g, _ in self.groups]

    def member_group(self) -> np.ndarray:
        """Group index of each member."""
        out = np.empty(self.n_members, dtype=int)
        for k, (_, members) in enumerate(self.groups):
            out[list(members)] = k
        return out

    def to_list(self) -> list[dict]:
        return [{"id": g, "members": list(m)} for g, m in self.groups]

    @classmethod
    def from_list(cls, items: Sequence[dict]) -> "GroupSpec":
        return cls(tuple((d["id"], tuple(d["members"])) for d in items))


def make_group_model(kind: str, n_members: int | None = None) -> GroupSpec:
    """Standard groupings.

    ``uwme8``: eight non-exchangeable members. ``ah_two_group``: control plus
    ten exchangeable perturbed members. ``ah_three_group``: control, odd and
    even perturbed members (members 1, 3, ..., 9 are the odd ones, since member
    0 is the control). ``singleton`` and ``exchangeable`` take ``n_members``.
    """
    if kind == "uwme8":
        return GroupSpec(tuple((f"m{i + 1}", (i,)) for i in range(8)))
    if kind == "ah_two_group":
        return GroupSpec((("control", (0,)), ("perturbed", tuple(range(1, 11)))))
    if kind == "ah_three_group":
        return GroupSpec(
            (
                ("control", (0,)),
                ("odd", (1, 3, 5, 7, 9)),
                ("even", (2, 4, 6, 8, 10)),
            )
        )
    if kind in ("singleton", "exchangeable"):
        if not n_members or n_members < 1:
            raise ValueError(f"grouping {kind!r} needs a member count")
        if kind == "singleton":
            return GroupSpec(tuple((f"m{i + 1}", (i,)) for i in range(n_members)))
        return GroupSpec((("all", tuple(range(n_members))),))
    raise ValueError(f"unknown grouping {kind!r}; expected one of {GROUP_KINDS}")


@dataclass(frozen=True, eq=False)
class BmaModel:
    spec: GroupSpec
    weights: np.ndarray  # per-member weight of each group, shape (G,)
    A: np.ndarray  # (L, 2); L = G in full mode, 1 in parsimonious mode
    B: np.ndarray  # (L, 2, 2)
    sigma: np.ndarray
    mode: Mode = "full"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        A = np.array(self.A, dtype=float).reshape(-1, 2)
        B = np.array(self.B, dtype=float).reshape(-1, 2, 2)
        sigma = dists.check_scale(self.sigma)
        if self.mode not in ("full", "parsimonious"):
            raise ValueError(f"unknown mode {self.mode!r}")
        n_loc = self.spec.n_groups if self.mode == "full" else 1
        if w.shape != (self.spec.n_groups,):
            raise ValueError(f"expected {self.spec.n_groups} group weights, got {w.shape[0]}")
        if A.shape[0] != n_loc or B.shape[0] != n_loc:
            raise ValueError(f"{self.mode} mode needs {n_loc} location maps")
        if np.any(w < 0) or not np.isclose(w @ self.spec.sizes, 1.0, atol=1e-9):
            raise ValueError("weights must be nonnegative with total mixture mass 1")
        for name, arr in (("weights", w), ("A", A), ("B", B), ("sigma", sigma)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_members(self) -> int:
        return self.spec.n_members

    def member_weights(self) -> np.ndarray:
        return self.weights[self.spec.member_group()]

    def member_loc_index(self) -> np.ndarray:
        if self.mode == "parsimonious":
            return np.zeros(self.n_members, dtype=int)
        return self.spec.member_group()

    def locations(self, f) -> np.ndarray:
        """Component locations ``A_k + B_k f_k`` for one forecast, shape (M, 2)."""
        f = _check_forecast(self, f)
        idx = self.member_loc_index()
        return self.A[idx] + np.einsum("mij,mj->mi", self.B[idx], f)

    def components(self, f) -> list[dists.TruncBivNormal]:
        return [dists.TruncBivNormal(mu, self.sigma) for mu in self.locations(f)]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "groups": self.spec.to_list(),
            "weights": self.weights.tolist(),
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "sigma": self.sigma.tolist(),
            "training_window": self.meta.get("training_window"),
            "ensemble": self.meta.get("ensemble", ""),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "BmaModel":
        meta = {"training_window": d.get("training_window"), "ensemble": d.get("ensemble", "")}
        return cls(
            spec=GroupSpec.from_list(d["groups"]),
            weights=d["weights"],
            A=d["A"],
            B=d["B"],
            sigma=d["sigma"],
            mode=d["mode"],
            meta=meta,
        )

    @classmethod
    def from_json(cls, text: str) -> "BmaModel":
        return cls.from_dict(json.loads(text))


def _check_forecast(model: BmaModel, f) -> np.ndarray:
    f = np.asarray(f, dtype=float).reshape(-1, 2)
    if f.shape[0] != model.n_members:
        raise ValueError(f"forecast has {f.shape[0]} members, model expects {model.n_members}")
    return f


def predictive_logpdf(model: BmaModel, f, x):
    mu = model.locations(f)
    x = np.asarray(x, dtype=float)
    logg = dists.trunc_logpdf(x[..., None, :], mu, model.sigma)
    with np.errstate(divide="ignore"):
        logw = np.log(model.member_weights())
    return logsumexp(logg + logw, axis=-1)


def predictive_pdf(model: BmaModel, f, x):
    """Mixture density at ``x`` (a 2-vector or ``(n, 2)`` array of points)."""
    out = np.exp(predictive_logpdf(model, f, x))
    return float(out) if np.ndim(out) == 0 else out


def predictive_sample(model: BmaModel, f, n: int, rng: np.random.Generator) -> np.ndarray:
    mu = model.locations(f)
    w = model.member_weights()
    comp = rng.choice(len(w), size=n, p=w / w.sum())
    return dists.sample_rows(mu[comp], model.sigma, rng)


def predictive_mean(model: BmaModel, f) -> np.ndarray:
    """Exact mixture mean from the component truncated means."""
    means = dists.trunc_mean_rows(model.locations(f), model.sigma)
    return model.member_weights() @ means


def predictive_median(
    model: BmaModel, f, rng: np.random.Generator, n_sample: int = 10000
) -> np.ndarray:
    """Geometric median of an ``n_sample`` draw from the predictive mixture."""
    if n_sample < 1000:
        raise ValueError("predictive_median needs n_sample >= 1000")
    return geometric_median(predictive_sample(model, f, n_sample, rng))


@dataclass(frozen=True, eq=False)
class BmaForecast:
    """A fitted model bound to one ensemble forecast."""

    model: BmaModel
    members: np.ndarray

    @property
    def n_members(self) -> int:
        return self.model.n_members

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return predictive_sample(self.model, self.members, n, rng)

    def mean(self) -> np.ndarray:
        return predictive_mean(self.model, self.members)

    def pdf(self, x):
        return predictive_pdf(self.model, self.members, x)
