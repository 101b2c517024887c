"""Evaluation statistics for segmentation experiments.

Dice uses the empty-mask conventions (both empty -> 1, exactly one empty
-> 0). Confidence intervals are percentile-bootstrap with per-resample
derived seeds so serial and parallel evaluation agree bit for bit. The
paired t-test evaluates the Student-t CDF through a continued-fraction
regularized incomplete beta, so the package needs no stats dependency.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InputError, UndefinedStatisticError
from .imaging import binary_view


@dataclass
class DiceRecord:
    sample_id: str
    class_name: str
    organ: str
    category: str
    dice: float

    def __post_init__(self):
        if not 0.0 <= self.dice <= 1.0:
            raise InputError(f"dice {self.dice} outside [0, 1]")


@dataclass
class CIResult:
    mean: float
    lower: float
    upper: float
    resamples: int
    seed: int


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); both empty -> 1.0, exactly one empty -> 0.0."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = int(pred.sum())
    g = int(gt.sum())
    if p == 0 and g == 0:
        return 1.0
    if p == 0 or g == 0:
        return 0.0
    inter = int((pred & gt).sum())
    return 2.0 * inter / (p + g)


def multiclass_dice(pred: np.ndarray, gt: np.ndarray, classes) -> tuple[dict[int, float], float]:
    """Per-class Dice of binary views plus the mean over the requested classes."""
    per_class = {int(c): dice(binary_view(pred, c), binary_view(gt, c)) for c in classes}
    return per_class, float(np.mean(list(per_class.values())))


def bootstrap_ci(values, b: int = 10_000, level: float = 0.95, seed: int = 0) -> CIResult:
    """Percentile bootstrap interval for the mean; deterministic under seed."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise InputError("bootstrap needs at least one value")
    n = values.size
    means = np.empty(b)
    for i in range(b):
        rng = np.random.default_rng((seed, i))
        means[i] = values[rng.integers(0, n, n)].mean()
    alpha = (1.0 - level) / 2.0
    lower, upper = np.quantile(means, [alpha, 1.0 - alpha])
    return CIResult(mean=float(values.mean()), lower=float(lower), upper=float(upper),
                    resamples=b, seed=seed)


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log(1.0 - x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(ln_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(ln_front) * _betacf(b, a, 1.0 - x) / b


def _stars(p: float) -> str:
    if p < 1e-3:
        return "***"
    if p < 1e-2:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass
class TTestResult:
    t: float
    p: float
    stars: str
    zero_variance: bool = False


def paired_ttest(a, b) -> TTestResult:
    """Two-sided paired Student t-test on elementwise differences."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise InputError("paired test needs two equal-length vectors of >= 2 values")
    d = a - b
    n = d.size
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            raise UndefinedStatisticError("all differences identical and zero")
        t = math.inf if mean > 0 else -math.inf
        return TTestResult(t=t, p=0.0, stars=_stars(0.0), zero_variance=True)
    t = mean / (sd / math.sqrt(n))
    nu = n - 1
    p = betainc_reg(nu / 2.0, 0.5, nu / (nu + t * t))
    return TTestResult(t=float(t), p=float(p), stars=_stars(p))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Pearson correlation of average ranks (ties get mean rank)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise InputError("spearman needs two equal-length vectors of >= 2 values")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedStatisticError("constant input vector")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx * ry).sum() / math.sqrt((rx * rx).sum() * (ry * ry).sum()))


def aggregate(records: list[DiceRecord], key: str, b: int = 10_000,
              seed: int = 0) -> list[dict]:
    """Group Dice records by organ or category; mean + bootstrap CI per group."""
    if key not in ("organ", "category"):
        raise InputError(f"unknown aggregation key {key!r}")
    groups: dict[str, list[float]] = {}
    for r in records:
        groups.setdefault(getattr(r, key), []).append(r.dice)
    out = []
    for name in sorted(groups):
        ci = bootstrap_ci(groups[name], b=b, seed=seed)
        out.append({"group": name, "n": len(groups[name]), "mean": ci.mean,
                    "ci_lower": ci.lower, "ci_upper": ci.upper})
    return out


CSV_HEADER = ["sample_id", "class", "organ", "category", "dice"]


def write_records_csv(path, records: list[DiceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.sample_id, r.class_name, r.organ, r.category,
                             f"{r.dice:.10g}"])


def read_records_csv(path) -> list[DiceRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            records.append(DiceRecord(sample_id=row["sample_id"], class_name=row["class"],
                                      organ=row["organ"], category=row["category"],
                                      dice=float(row["dice"])))
    return records
