"""Volume/EF error statistics, Bland-Altman agreement and age-stratified
reports.

Standard deviations are population SDs (divide by n).  EF is a fraction
internally and is written as percent in report files.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError

QUANTITIES = ("EDV", "ESV", "EF")
BA_Z = 1.96
# Age bins: <10, 10-20, ..., 60-70, >70 (lower edge inclusive).
AGE_EDGES = (10, 20, 30, 40, 50, 60, 70)
REPORT_COLUMNS = ("quantity", "group", "n", "rmse", "aesd", "r", "ba_mean", "ba_lo", "ba_hi")


def _pair(preds, truths, min_len=1):
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(truths, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ShapeError(f"predictions ({p.size}) and truths ({t.size}) differ in length")
    if p.size < min_len:
        raise ShapeError(f"need at least {min_len} values, got {p.size}")
    return p, t


def ef(edv, esv):
    """(EDV - ESV) / EDV as a fraction; works elementwise on arrays."""
    edv = np.asarray(edv, dtype=np.float64)
    if np.any(edv <= 0):
        raise ConfigError("EDV must be positive to compute EF")
    out = (edv - np.asarray(esv, dtype=np.float64)) / edv
    return float(out) if out.ndim == 0 else out


def rmse(preds, truths) -> float:
    p, t = _pair(preds, truths)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mrmse(rmse_edv: float, rmse_esv: float) -> float:
    if rmse_edv < 0 or rmse_esv < 0:
        raise ConfigError("RMSE values must be non-negative")
    return (rmse_edv + rmse_esv) / 2.0


def ae_and_aesd(preds, truths) -> tuple[np.ndarray, float]:
    p, t = _pair(preds, truths)
    ae = np.abs(p - t)
    return ae, float(ae.std())


def correlation(preds, truths) -> float:
    p, t = _pair(preds, truths, min_len=2)
    dp, dt = p - p.mean(), t - t.mean()
    sp, st = np.sqrt(np.sum(dp * dp)), np.sqrt(np.sum(dt * dt))
    if sp == 0 or st == 0:
        raise ConfigError("correlation is undefined for zero-variance input")
    return float(np.clip(np.sum(dp * dt) / (sp * st), -1.0, 1.0))


def bland_altman(preds, truths) -> tuple[float, float, float]:
    """(mean difference, lower limit, upper limit) with differences pred - truth."""
    p, t = _pair(preds, truths, min_len=2)
    d = p - t
    m, sd = float(d.mean()), float(d.std())
    return m, m - BA_Z * sd, m + BA_Z * sd


def pooled_correlation(pred_edv, true_edv, pred_esv, true_esv) -> float:
    """One correlation over EDV and ESV values taken together."""
    return correlation(np.concatenate([np.ravel(pred_edv), np.ravel(pred_esv)]),
                       np.concatenate([np.ravel(true_edv), np.ravel(true_esv)]))


# ---------------------------------------------------------------- records

@dataclass(frozen=True)
class PredictionRecord:
    study_id: str
    pred_edv: float
    pred_esv: float
    true_edv: float
    true_esv: float
    age: float | None = None

    def __post_init__(self):
        if min(self.pred_edv, self.true_edv) <= 0 or min(self.pred_esv, self.true_esv) < 0:
            raise ConfigError(f"record {self.study_id}: volumes must be positive")

    @property
    def pred_ef(self) -> float:
        return ef(self.pred_edv, self.pred_esv)

    @property
    def true_ef(self) -> float:
        return ef(self.true_edv, self.true_esv)

    def values(self, quantity: str) -> tuple[float, float]:
        q = quantity.upper()
        if q == "EDV":
            return self.pred_edv, self.true_edv
        if q == "ESV":
            return self.pred_esv, self.true_esv
        if q == "EF":
            return self.pred_ef, self.true_ef
        raise ConfigError(f"unknown quantity {quantity!r}")


@dataclass
class QuantityStats:
    n: int
    rmse: float | None = None
    aesd: float | None = None
    r: float | None = None  # None when undefined (n < 2 or zero variance)
    ba_mean: float | None = None
    ba_lo: float | None = None
    ba_hi: float | None = None

    @property
    def r_undefined(self) -> bool:
        return self.r is None


@dataclass
class EvalReport:
    records: list
    overall: dict  # quantity -> QuantityStats
    groups: dict = field(default_factory=dict)  # group label -> {quantity: QuantityStats}
    pooled_r: float | None = None

    def rows(self):
        yield from _rows("all", self.overall)
        for label, stats in self.groups.items():
            yield from _rows(label, stats)


def _rows(group, stats):
    for q in QUANTITIES:
        s = stats[q]
        yield q, group, s


def age_group(age, edges=AGE_EDGES) -> str | None:
    if age is None or (isinstance(age, float) and math.isnan(age)):
        return None
    if age < edges[0]:
        return f"<{edges[0]}"
    for lo, hi in zip(edges[:-1], edges[1:]):
        if lo <= age < hi:
            return f"{lo}-{hi}"
    return f">{edges[-1]}"


def age_labels(edges=AGE_EDGES) -> list[str]:
    return [f"<{edges[0]}"] + [f"{lo}-{hi}" for lo, hi in zip(edges[:-1], edges[1:])] + [f">{edges[-1]}"]


def quantity_stats(records, quantity: str, full: bool = True) -> QuantityStats:
    pairs = np.array([r.values(quantity) for r in records], dtype=np.float64).reshape(-1, 2)
    n = len(pairs)
    if not full or n == 0:
        return QuantityStats(n)
    p, t = pairs[:, 0], pairs[:, 1]
    _, aesd = ae_and_aesd(p, t)
    out = QuantityStats(n, rmse(p, t), aesd)
    if n >= 2:
        out.ba_mean, out.ba_lo, out.ba_hi = bland_altman(p, t)
        try:
            out.r = correlation(p, t)
        except ConfigError:
            out.r = None
    return out


def build_report(records, age_bins=AGE_EDGES) -> EvalReport:
    """Overall and per-age-group statistics.  Groups with fewer than two
    records carry counts only."""
    records = list(records)
    if not records:
        raise ConfigError("cannot build a report from zero records")
    overall = {q: quantity_stats(records, q) for q in QUANTITIES}
    groups = {}
    if age_bins and any(r.age is not None for r in records):
        for label in age_labels(age_bins):
            sub = [r for r in records if age_group(r.age, age_bins) == label]
            if sub:
                groups[label] = {q: quantity_stats(sub, q, full=len(sub) >= 2) for q in QUANTITIES}
    pooled = None
    if len(records) >= 2:
        try:
            pooled = pooled_correlation(
                [r.pred_edv for r in records], [r.true_edv for r in records],
                [r.pred_esv for r in records], [r.true_esv for r in records],
            )
        except ConfigError:
            pooled = None
    return EvalReport(records, overall, groups, pooled)


# ---------------------------------------------------------------- files

def _fmt(x, scale=1.0):
    return "" if x is None else f"{x * scale:.6f}"


def write_report(report: EvalReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for q, group, s in report.rows():
            k = 100.0 if q == "EF" else 1.0  # EF in percent
            w.writerow([q, group, s.n, _fmt(s.rmse, k), _fmt(s.aesd, k), _fmt(s.r), _fmt(s.ba_mean, k), _fmt(s.ba_lo, k), _fmt(s.ba_hi, k)])
        if report.pooled_r is not None:
            w.writerow(["EDV+ESV", "all", 2 * len(report.records), "", "", _fmt(report.pooled_r), "", "", ""])
    return path


def write_plot_data(report: EvalReport, out_dir) -> list[Path]:
    """Per quantity: ``<q>_scatter.csv`` (truth, pred) and
    ``<q>_bland_altman.csv`` (mean of pair, pred - truth)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for q in QUANTITIES:
        k = 100.0 if q == "EF" else 1.0
        sc = out_dir / f"{q.lower()}_scatter.csv"
        ba = out_dir / f"{q.lower()}_bland_altman.csv"
        with sc.open("w", newline="") as f1, ba.open("w", newline="") as f2:
            w1 = csv.writer(f1, lineterminator="\n")
            w2 = csv.writer(f2, lineterminator="\n")
            w1.writerow(["study_id", "truth", "pred"])
            w2.writerow(["study_id", "mean", "diff"])
            for r in report.records:
                p, t = (v * k for v in r.values(q))
                w1.writerow([r.study_id, f"{t:.6f}", f"{p:.6f}"])
                w2.writerow([r.study_id, f"{(p + t) / 2:.6f}", f"{p - t:.6f}"])
        written += [sc, ba]
    return written


def read_volumes(path) -> dict:
    """``study_id,edv_ml,esv_ml`` (extra columns such as ``age_years`` are kept)."""
    out = {}
    with Path(path).open(newline="") as fh:
        rows = csv.DictReader(fh)
        missing = {"study_id", "edv_ml", "esv_ml"} - set(rows.fieldnames or ())
        if missing:
            raise ConfigError(f"{path}: missing columns {sorted(missing)}")
        for row in rows:
            age = row.get("age_years")
            out[row["study_id"]] = (float(row["edv_ml"]), float(row["esv_ml"]), float(age) if age not in (None, "") else None)
    return out


def write_volumes(rows, path) -> Path:
    """rows: iterable of (study_id, edv_ml, esv_ml)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["study_id", "edv_ml", "esv_ml"])
        for sid, edv, esv in rows:
            w.writerow([sid, f"{edv:.6f}", f"{esv:.6f}"])
    return path


def records_from_files(pred_path, truth_path) -> list[PredictionRecord]:
    preds = read_volumes(pred_path)
    truths = read_volumes(truth_path)
    missing = sorted(set(preds) - set(truths))
    if missing:
        raise ConfigError(f"no truth for studies {missing[:5]}")
    return [
        PredictionRecord(sid, p[0], p[1], truths[sid][0], truths[sid][1], truths[sid][2] if truths[sid][2] is not None else p[2])
        for sid, p in sorted(preds.items())
    ]
