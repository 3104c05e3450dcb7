"""Command-line workflows: generate, calibrate, verify, compare.

Output layout of ``calibrate`` / ``verify`` under ``--output``::

    models/DATE.json         fitted model (BMA or copula) with EM diagnostics
    predictions/DATE.csv     per-case verification inputs
    run.json                 method, flags and the index of processed dates
    report.json              aggregate scores (written by verify)
    rankhist_<method>.csv    multivariate rank histogram (written by verify)
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bma, copula, data, em, synth, verify
from .dists import InvalidDistributionError

log = logging.getLogger("bivar_calib")

METHODS = ("bma_full", "bma_pars", "copula", "raw")
THREADS_ENV = "BIVAR_CALIB_THREADS"
PRED_COLUMNS = [
    "station_id", "date", "mean_wind", "mean_temp", "median_wind", "median_temp",
    "es", "ds", "rank", "rank_wind", "rank_temp", "n_members",
]
TABLE_COLUMNS = [
    ("es", "ES"), ("delta", "Delta"), ("ds", "DS"), ("ee_median", "EE median"),
    ("ee_mean", "EE mean"), ("corr_median", "rho median"), ("corr_mean", "rho mean"),
]
# EM failures on one window skip that date instead of aborting the run
FIT_ERRORS = (
    em.EMDivergenceError,
    em.DegenerateLikelihoodError,
    em.RankDeficiencyError,
    InvalidDistributionError,
)


@dataclass
class RunConfig:
    dataset: Path
    method: str
    output: Path
    grouping: str | None = None
    training_days: int = 40
    mc_samples: int = 10000
    corr_period: tuple[dt.date, dt.date] | None = None
    eval_start: dt.date | None = None
    eval_end: dt.date | None = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.training_days < 1:
            raise ValueError("training_days must be at least 1")
        if self.mc_samples < 100:
            raise ValueError("mc_samples must be at least 100")

    def flags(self) -> dict:
        return {
            "dataset": str(self.dataset),
            "method": self.method,
            "grouping": self.grouping,
            "training_days": self.training_days,
            "mc_samples": self.mc_samples,
            "corr_period": [d.isoformat() for d in self.corr_period] if self.corr_period else None,
            "eval_start": self.eval_start.isoformat() if self.eval_start else None,
            "eval_end": self.eval_end.isoformat() if self.eval_end else None,
            "seed": self.seed,
        }


def date_rng(seed: int, date: dt.date) -> np.random.Generator:
    """Independent stream per date, so results do not depend on scheduling."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(date.toordinal(),)))


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _fmt(v) -> str:
    return repr(float(v))


def predictions_csv(cases: Sequence[data.ForecastCase], scores: Sequence[verify.CaseScore]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PRED_COLUMNS)
    for c, s in zip(cases, scores):
        w.writerow(
            [c.station_id, c.date.isoformat()]
            + [_fmt(v) for v in (*s.mean, *s.median, s.es, s.ds)]
            + [s.rank, s.rank_wind, s.rank_temp, s.n_members]
        )
    return buf.getvalue()


def _resolve_threads(requested: int | None) -> int:
    cap = os.environ.get(THREADS_ENV)
    n = requested if requested else (int(cap) if cap else 1)
    if cap:
        n = min(n, int(cap))
    return max(n, 1)


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ------------------------------------------------------------------ commands


def cmd_generate(cfg: synth.SynthConfig, output: Path) -> Path:
    cases = synth.generate(cfg)
    data.write_dataset(output, cases, synth.manifest_for(cfg))
    log.info("wrote %d cases to %s", len(cases), output)
    return output


def _in_range(d: dt.date, start: dt.date | None, end: dt.date | None) -> bool:
    return (start is None or d >= start) and (end is None or d <= end)


def _fit_margins(window, spec):
    return (
        copula.fit_margin(window, "wind", spec),
        copula.fit_margin(window, "temp", spec),
    )


def cmd_calibrate(cfg: RunConfig) -> dict:
    """Fit the chosen method on every rolling window and write per-date model
    files and prediction summaries. Returns the run index."""
    ds = data.load_dataset(cfg.dataset)
    grouping = cfg.grouping or ds.manifest.grouping
    spec = bma.make_group_model(grouping, ds.manifest.M)
    if spec.n_members != ds.manifest.M:
        raise ValueError(f"grouping {grouping!r} has {spec.n_members} members, data has {ds.manifest.M}")
    windows = list(data.rolling_windows(ds.cases, cfg.training_days))
    targets = [w for w in windows if _in_range(w[0], cfg.eval_start, cfg.eval_end)]
    out = cfg.output
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    if cfg.method != "raw":
        (out / "models").mkdir(parents=True, exist_ok=True)
    threads = _resolve_threads(cfg.threads)

    latent_corr = None
    corr_window = None
    if cfg.method == "copula":
        if cfg.corr_period:
            corr_targets = [w for w in windows if _in_range(w[0], *cfg.corr_period)]
        else:
            log.warning("no --corr-period given; estimating the latent correlation in sample")
            corr_targets = targets
        if not corr_targets:
            raise ValueError("correlation period contains no fittable dates")

        def corr_one(item):
            date, window, cases = item
            try:
                margins = _fit_margins(window, spec)
            except FIT_ERRORS as exc:
                log.warning("%s: margin fit failed in correlation period (%s); skipped", date, exc)
                return []
            return [(c, margins) for c in cases]

        history = [h for hs in _map(corr_one, corr_targets, threads) for h in hs]
        latent_corr = copula.estimate_latent_corr(history)
        corr_window = {
            "start": corr_targets[0][0].isoformat(),
            "end": corr_targets[-1][0].isoformat(),
        }
        log.info("latent correlation %.4f from %d cases", latent_corr, len(history))

    def one(item):
        date, window, cases = item
        rng = date_rng(cfg.seed, date)
        model_doc = None
        try:
            if cfg.method == "raw":
                forecasts = [c.members for c in cases]
            elif cfg.method in ("bma_full", "bma_pars"):
                mode = "full" if cfg.method == "bma_full" else "parsimonious"
                model, diag = em.fit(window, spec, mode)
                model.meta["ensemble"] = ds.manifest.ensemble_name
                model_doc = model.to_dict()
                model_doc["diagnostics"] = diag.to_dict()
                forecasts = [bma.BmaForecast(model, c.members) for c in cases]
            else:
                wm, tm = _fit_margins(window, spec)
                cm = copula.CopulaModel(wm, tm, latent_corr, {"corr_window": corr_window})
                model_doc = cm.to_dict()
                model_doc["training_window"] = {
                    "start_date": window.start_date.isoformat(),
                    "end_date": window.end_date.isoformat(),
                }
                forecasts = [copula.CopulaForecast(cm, c.members) for c in cases]
            scores = [verify.score_case(f, c.obs, rng, cfg.mc_samples) for f, c in zip(forecasts, cases)]
        except FIT_ERRORS as exc:
            log.warning("%s: fit failed (%s: %s); date skipped", date, type(exc).__name__, exc)
            return date, "skipped"
        if model_doc is not None:
            _atomic_write(out / "models" / f"{date.isoformat()}.json", json.dumps(model_doc, indent=2) + "\n")
        _atomic_write(out / "predictions" / f"{date.isoformat()}.csv", predictions_csv(cases, scores))
        return date, "ok"

    results = _map(one, targets, threads)
    index = {
        "method": cfg.method,
        "flags": cfg.flags(),
        "dates": [d.isoformat() for d, s in results if s == "ok"],
        "skipped": [d.isoformat() for d, s in results if s == "skipped"],
    }
    if latent_corr is not None:
        index["latent_corr"] = latent_corr
    _atomic_write(out / "run.json", json.dumps(index, indent=2) + "\n")
    log.info("%s: %d dates fitted, %d skipped", cfg.method, len(index["dates"]), len(index["skipped"]))
    return index


def read_predictions(pred_dir: Path, dataset: data.Dataset) -> tuple[str, list[verify.CaseScore]]:
    index = json.loads((pred_dir / "run.json").read_text(encoding="utf-8"))
    obs = {c.key: c.obs for c in dataset.cases}
    scores = []
    for d in index["dates"]:
        with open(pred_dir / "predictions" / f"{d}.csv", newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                key = (row["station_id"], dt.date.fromisoformat(row["date"]))
                if key not in obs:
                    raise KeyError(f"prediction for {key} has no matching case in the dataset")
                scores.append(
                    verify.CaseScore(
                        obs=obs[key],
                        mean=np.array([float(row["mean_wind"]), float(row["mean_temp"])]),
                        median=np.array([float(row["median_wind"]), float(row["median_temp"])]),
                        es=float(row["es"]),
                        ds=float(row["ds"]),
                        rank=int(row["rank"]),
                        rank_wind=int(row["rank_wind"]),
                        rank_temp=int(row["rank_temp"]),
                        n_members=int(row["n_members"]),
                    )
                )
    return index["method"], scores


def cmd_verify(pred_dir: Path, dataset_path: Path, output: Path | None = None) -> verify.VerificationReport:
    ds = data.load_dataset(dataset_path)
    method, scores = read_predictions(pred_dir, ds)
    report = verify.aggregate(scores, method)
    out = output or pred_dir
    _atomic_write(out / "report.json", report.to_json())
    for name, hist in verify.histograms(scores).items():
        suffix = "" if name == "multivariate" else f"_{name}"
        _atomic_write(out / f"rankhist_{method}{suffix}.csv", hist.to_csv())
    return report


def compare_table(reports: Sequence[verify.VerificationReport]) -> tuple[str, str]:
    """Render reports side by side; returns ``(text, csv)``."""
    if not reports:
        raise ValueError("no reports to compare")
    rows = sorted(reports, key=lambda r: r.method)
    heads = ["method"] + [h for _, h in TABLE_COLUMNS]
    cells = [[r.method] + [f"{getattr(r, k):.4f}" for k, _ in TABLE_COLUMNS] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(heads, *cells)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(heads, widths)))]
    for c in cells:
        lines.append("  ".join(x.ljust(w) if i == 0 else x.rjust(w) for i, (x, w) in enumerate(zip(c, widths))))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + [k for k, _ in TABLE_COLUMNS])
    for r in rows:
        w.writerow([r.method] + [_fmt(getattr(r, k)) for k, _ in TABLE_COLUMNS])
    return "\n".join(lines) + "\n", buf.getvalue()


def cmd_compare(paths: Sequence[Path], csv_out: Path | None = None) -> str:
    reports = [verify.VerificationReport.from_dict(json.loads(Path(p).read_text())) for p in paths]
    text, table_csv = compare_table(reports)
    if csv_out:
        _atomic_write(Path(csv_out), table_csv)
    return text


# ---------------------------------------------------------------- arguments


def _date(s: str) -> dt.date:
    return dt.date.fromisoformat(s)


def _period(s: str) -> tuple[dt.date, dt.date]:
    try:
        a, b = s.split(":")
        return _date(a), _date(b)
    except ValueError:
        raise argparse.ArgumentTypeError("expected START:END with ISO dates") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bivar-calib", description="Joint wind/temperature ensemble calibration.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--stations", type=int, default=10)
    g.add_argument("--days", type=int, default=400)
    g.add_argument("--members", type=int, default=8)
    g.add_argument("--dispersion", type=float, default=0.4)
    g.add_argument("--truth-corr", type=float, default=0.12)
    g.add_argument("--bias", type=float, nargs=2, default=(0.8, -1.2), metavar=("WIND", "TEMP"))
    g.add_argument("--grouping", default=None, help="default: uwme8 for 8 members, else singleton")
    g.add_argument("--start-date", type=_date, default=dt.date(2008, 1, 1))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--output", type=Path, required=True, help="CSV path; manifest is written alongside")

    c = sub.add_parser("calibrate", help="fit a method on rolling windows")
    c.add_argument("--dataset", type=Path, required=True)
    c.add_argument("--method", choices=METHODS, required=True)
    c.add_argument("--grouping", default=None, help="override the manifest grouping")
    c.add_argument("--training-days", type=int, default=40)
    c.add_argument("--mc-samples", type=int, default=10000)
    c.add_argument("--corr-period", type=_period, default=None, help="START:END (copula only)")
    c.add_argument("--eval-start", type=_date, default=None)
    c.add_argument("--eval-end", type=_date, default=None)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--threads", type=int, default=None, help=f"worker threads (capped by ${THREADS_ENV})")
    c.add_argument("--output", type=Path, required=True)

    v = sub.add_parser("verify", help="aggregate predictions into a report")
    v.add_argument("--predictions", type=Path, required=True, help="output directory of calibrate")
    v.add_argument("--dataset", type=Path, required=True)
    v.add_argument("--output", type=Path, default=None)

    k = sub.add_parser("compare", help="side-by-side table of reports")
    k.add_argument("reports", type=Path, nargs="+")
    k.add_argument("--csv", type=Path, default=None)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "generate":
            grouping = args.grouping or ("uwme8" if args.members == 8 else "singleton")
            cfg = synth.SynthConfig(
                n_stations=args.stations,
                n_days=args.days,
                M=args.members,
                truth_corr=args.truth_corr,
                member_bias=tuple(args.bias),
                dispersion_factor=args.dispersion,
                grouping=grouping,
                seed=args.seed,
                start_date=args.start_date,
            )
            cmd_generate(cfg, args.output)
        elif args.command == "calibrate":
            cmd_calibrate(
                RunConfig(
                    dataset=args.dataset,
                    method=args.method,
                    output=args.output,
                    grouping=args.grouping,
                    training_days=args.training_days,
                    mc_samples=args.mc_samples,
                    corr_period=args.corr_period,
                    eval_start=args.eval_start,
                    eval_end=args.eval_end,
                    seed=args.seed,
                    threads=args.threads,
                )
            )
        elif args.command == "verify":
            report = cmd_verify(args.predictions, args.dataset, args.output)
            print(report.to_json(), end="")
        elif args.command == "compare":
            print(cmd_compare(args.reports, args.csv), end="")
    except Exception as exc:  # noqa: BLE001 - reported as a CLI error
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
