"""Forecast-case files and rolling training windows.

CSV layout (header required)::

    station_id,date,obs_wind,obs_temp,m1_wind,m1_temp,...,mM_wind,mM_temp

with ISO dates, wind in m/s and temperature in K. A JSON sidecar
``<stem>.manifest.json`` describes the ensemble.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

UNITS = {"wind": "m/s", "temp": "K"}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ForecastCase:
    station_id: str
    date: dt.date
    members: np.ndarray  # (M, 2)
    obs: np.ndarray  # (2,)

    @property
    def key(self) -> tuple[str, dt.date]:
        return (self.station_id, self.date)


@dataclass
class DatasetManifest:
    ensemble_name: str
    M: int
    member_labels: list[str]
    grouping: str
    variables: dict = field(default_factory=lambda: dict(UNITS))

    def __post_init__(self):
        if len(set(self.member_labels)) != len(self.member_labels):
            raise DatasetError("member labels must be unique")
        if len(self.member_labels) != self.M:
            raise DatasetError(f"manifest lists {len(self.member_labels)} labels for M={self.M}")

    def to_dict(self) -> dict:
        return {
            "ensemble_name": self.ensemble_name,
            "M": self.M,
            "member_labels": list(self.member_labels),
            "grouping": self.grouping,
            "variables": dict(self.variables),
        }


@dataclass
class TrainingWindow:
    cases: list[ForecastCase]
    n_days: int
    target_date: dt.date

    @property
    def N(self) -> int:
        return len(self.cases)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Observations ``(N, 2)`` and member forecasts ``(N, M, 2)``."""
        obs = np.array([c.obs for c in self.cases], dtype=float)
        members = np.array([c.members for c in self.cases], dtype=float)
        return obs, members

    @property
    def start_date(self) -> dt.date:
        return self.target_date - dt.timedelta(days=self.n_days)

    @property
    def end_date(self) -> dt.date:
        return self.target_date - dt.timedelta(days=1)


@dataclass
class Dataset:
    cases: list[ForecastCase]
    manifest: DatasetManifest
    n_dropped: int = 0


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def header_for(m: int) -> list[str]:
    cols = ["station_id", "date", "obs_wind", "obs_temp"]
    for k in range(1, m + 1):
        cols += [f"m{k}_wind", f"m{k}_temp"]
    return cols


def _parse_float(s: str) -> float:
    s = s.strip()
    if s == "" or s.lower() in ("na", "nan"):
        return math.nan
    return float(s)


def load_dataset(path) -> Dataset:
    """Read a forecast CSV and its manifest sidecar.

    Rows with a missing or non-finite value are dropped and counted. A negative
    wind observation is an error, not a missing value.
    """
    path = Path(path)
    mpath = manifest_path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: missing header") from None
        if len(header) < 6 or (len(header) - 4) % 2:
            raise DatasetError(f"{path}: malformed header {header}")
        m = (len(header) - 4) // 2
        if header != header_for(m):
            raise DatasetError(f"{path}: header does not match the expected columns for M={m}")

        if mpath.exists():
            md = json.loads(mpath.read_text(encoding="utf-8"))
            variables = md.get("variables", dict(UNITS))
            if variables != UNITS:
                raise DatasetError(f"{mpath}: unit mismatch, expected {UNITS}, got {variables}")
            manifest = DatasetManifest(
                ensemble_name=md["ensemble_name"],
                M=int(md["M"]),
                member_labels=list(md["member_labels"]),
                grouping=md["grouping"],
                variables=variables,
            )
            if manifest.M != m:
                raise DatasetError(f"{mpath}: manifest M={manifest.M} but file has {m} members")
        else:
            manifest = DatasetManifest(
                ensemble_name=path.stem,
                M=m,
                member_labels=[f"m{k}" for k in range(1, m + 1)],
                grouping="singleton",
            )

        cases: list[ForecastCase] = []
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                dropped += 1
                continue
            try:
                date = dt.date.fromisoformat(row[1].strip())
                vals = np.array([_parse_float(c) for c in row[2:]])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            if not row[0].strip() or not np.all(np.isfinite(vals)):
                dropped += 1
                continue
            if vals[0] < 0.0:
                raise DatasetError(f"{path}:{lineno}: negative wind observation {vals[0]}")
            cases.append(
                ForecastCase(
                    station_id=row[0].strip(),
                    date=date,
                    members=vals[2:].reshape(m, 2),
                    obs=vals[:2],
                )
            )
    return Dataset(cases=cases, manifest=manifest, n_dropped=dropped)


def write_dataset(path, cases: Sequence[ForecastCase], manifest: DatasetManifest) -> None:
    """Write cases and the manifest sidecar. Floats use the shortest repr that
    round-trips exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header_for(manifest.M))
        for c in cases:
            vals = [c.obs[0], c.obs[1]] + [float(v) for v in np.asarray(c.members).reshape(-1)]
            w.writerow([c.station_id, c.date.isoformat()] + [repr(float(v)) for v in vals])
    manifest_path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")


def rolling_windows(
    cases: Sequence[ForecastCase], n_days: int
) -> Iterator[tuple[dt.date, TrainingWindow, list[ForecastCase]]]:
    """Yield ``(target_date, window, target_cases)`` in date order.

    The window holds every station's cases dated in
    ``[target - n_days, target - 1]``. Targets start once a full ``n_days``
    span precedes them within the data; missing days simply contribute no
    cases.
    """
    if n_days < 1:
        raise ValueError("n_days must be at least 1")
    by_date: dict[dt.date, list[ForecastCase]] = {}
    for c in cases:
        by_date.setdefault(c.date, []).append(c)
    dates = sorted(by_date)
    if not dates:
        return
    first = dates[0]
    for target in dates:
        start = target - dt.timedelta(days=n_days)
        if start < first:
            continue
        window_cases = [
            c for d in dates if start <= d < target for c in by_date[d]
        ]
        if not window_cases:
            continue
        yield target, TrainingWindow(window_cases, n_days, target), list(by_date[target])
