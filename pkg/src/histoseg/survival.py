"""Clinical layer: tumor-interaction biomarker and survival statistics.

The biomarker is the fraction of patch-level tumor area confirmed by the
pixel-level tumor mask. Risk models (linear and one-hidden-layer) are fit
by minimizing the negative log Cox partial likelihood with Breslow tie
handling, using the package's own autograd kernels. Concordance, the
product-limit curve, the log-rank test, and median stratification complete
the survival toolkit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import FitError, InputError, NumericError, UndefinedStatisticError
from .imaging import BBox


@dataclass
class SurvivalRecord:
    patient_id: str
    time: float  # months
    event: int  # 1 = death, 0 = censored
    tis: float
    risk: float | None = None

    def __post_init__(self):
        if not (self.time > 0 and math.isfinite(self.time)):
            raise InputError(f"time must be positive and finite, got {self.time}")
        if self.event not in (0, 1):
            raise InputError(f"event flag must be 0 or 1, got {self.event}")


@dataclass
class TISInput:
    """Patch-level tumor regions plus the pixel-level tumor mask."""

    patches: list[BBox]
    tumor_mask: np.ndarray


def tis(inp: TISInput) -> float:
    """Sum |P_i ∩ S| / sum |P_i| over the tumor patches."""
    mask = np.asarray(inp.tumor_mask).astype(bool)
    h, w = mask.shape
    total = 0
    hit = 0
    for b in inp.patches:
        x0, y0 = max(b.x_min, 0), max(b.y_min, 0)
        x1, y1 = min(b.x_max, w - 1), min(b.y_max, h - 1)
        if x1 < x0 or y1 < y0:
            continue
        total += (x1 - x0 + 1) * (y1 - y0 + 1)
        hit += int(mask[y0:y1 + 1, x0:x1 + 1].sum())
    if total == 0:
        raise UndefinedStatisticError("no tumor patch area")
    return hit / total


def cox_nll(times: np.ndarray, events: np.ndarray, risks: np.ndarray) -> float:
    """Negative log partial likelihood (Breslow ties) for given log-risks."""
    nll = 0.0
    for i in np.nonzero(events == 1)[0]:
        at_risk = risks[times >= times[i]]
        m = at_risk.max()
        nll -= risks[i] - (m + math.log(np.exp(at_risk - m).sum()))
    return float(nll)


@dataclass
class CoxModel:
    kind: str  # "linear" | "mlp"
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def predict_risk(self, tis_values) -> np.ndarray:
        t = np.asarray(tis_values, dtype=float).reshape(-1, 1)
        if self.kind == "linear":
            return (t * self.params["beta"][0, 0]).ravel()
        h = np.tanh(t @ self.params["w1"] + self.params["b1"])
        return (h @ self.params["w2"] + self.params["b2"]).ravel()


def _init_cox_params(kind: str, hidden: int, seed: int) -> dict[str, ag.Tensor]:
    rng = np.random.default_rng(seed)
    if kind == "linear":
        return {"beta": ag.Tensor(np.zeros((1, 1)), requires_grad=True)}
    if kind != "mlp":
        raise InputError(f"unknown risk model kind {kind!r}")
    return {
        "w1": ag.Tensor(rng.normal(0.0, 1.0, size=(1, hidden)), requires_grad=True),
        "b1": ag.Tensor(np.zeros(hidden), requires_grad=True),
        "w2": ag.Tensor(rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, 1)),
                        requires_grad=True),
        "b2": ag.Tensor(np.zeros(1), requires_grad=True),
    }


def _risk_graph(params: dict[str, ag.Tensor], kind: str, t_in: ag.Tensor) -> ag.Tensor:
    if kind == "linear":
        return ag.matmul(t_in, params["beta"])
    h = ag.tanh(ag.add(ag.matmul(t_in, params["w1"]), params["b1"]))
    return ag.add(ag.matmul(h, params["w2"]), params["b2"])


def cox_fit(cohort: list[SurvivalRecord], kind: str = "linear", seed: int = 0,
            hidden: int = 8, lr: float = 0.05, max_iter: int = 500) -> CoxModel:
    """Minimize the Breslow partial likelihood over the risk-model parameters.

    Risk sets are encoded as constant indicator matrices, so the whole
    objective is one differentiable graph; optimization is Adam without
    weight decay, deterministic under the seed.
    """
    if sum(r.event for r in cohort) < 2:
        raise FitError("need at least two events to fit a risk model")
    order = sorted(range(len(cohort)), key=lambda i: (cohort[i].time, cohort[i].patient_id))
    times = np.array([cohort[i].time for i in order])
    events = np.array([cohort[i].event for i in order])
    tis_values = np.array([cohort[i].tis for i in order])

    event_idx = np.nonzero(events == 1)[0]
    risk_sets = (times[None, :] >= times[event_idx, None]).astype(float)  # (E, n)
    select = np.zeros((len(event_idx), len(cohort)))
    select[np.arange(len(event_idx)), event_idx] = 1.0
    m_risk = ag.Tensor(risk_sets)
    m_sel = ag.Tensor(select)
    t_in = ag.Tensor(tis_values.reshape(-1, 1))

    params = _init_cox_params(kind, hidden, seed)
    state = ag.AdamWState(lr=lr, weight_decay=0.0)
    prev = math.inf
    for _ in range(max_iter):
        r = _risk_graph(params, kind, t_in)
        # -sum_e [ r_e - log sum_{j in R_e} exp(r_j) ]
        denom = ag.log(ag.matmul(m_risk, ag.exp(r)))
        nll = ag.scale(ag.add(ag.tsum(ag.matmul(m_sel, r)), ag.scale(ag.tsum(denom), -1.0)), -1.0)
        if not math.isfinite(nll.item()):
            raise NumericError("non-finite partial likelihood")
        for p in params.values():
            p.zero_grad()
        nll.backward()
        grads = {k: p.grad for k, p in params.items()}
        new_values = ag.adamw_step({k: p.data for k, p in params.items()}, grads, state)
        for k, p in params.items():
            p.data = new_values[k]
        if abs(prev - nll.item()) < 1e-10:
            break
        prev = nll.item()
    return CoxModel(kind=kind, params={k: p.data.copy() for k, p in params.items()})


def c_index(cohort: list[SurvivalRecord]) -> float:
    """Harrell's concordance over comparable pairs; risk ties count 0.5."""
    risks = [r.risk for r in cohort]
    if any(v is None for v in risks):
        raise InputError("all records need a predicted risk")
    num = 0.0
    pairs = 0
    for i, a in enumerate(cohort):
        if a.event != 1:
            continue
        for j, b in enumerate(cohort):
            if i == j or b.time <= a.time:
                continue
            pairs += 1
            if a.risk > b.risk:
                num += 1.0
            elif a.risk == b.risk:
                num += 0.5
    if pairs == 0:
        raise UndefinedStatisticError("no comparable pairs")
    return num / pairs


def km_curve(group: list[SurvivalRecord]) -> list[tuple[float, float]]:
    """Product-limit estimator: (event time, survival probability) steps."""
    if not group:
        raise InputError("empty group")
    times = np.array([r.time for r in group])
    events = np.array([r.event for r in group])
    steps = []
    s = 1.0
    for t in sorted(set(times[events == 1])):
        n_at_risk = int((times >= t).sum())
        d = int(((times == t) & (events == 1)).sum())
        s *= 1.0 - d / n_at_risk
        steps.append((float(t), float(s)))
    return steps


def logrank(group_a: list[SurvivalRecord], group_b: list[SurvivalRecord]) -> tuple[float, float]:
    """Two-group log-rank test: chi-square statistic and its 1-df p-value."""
    if not group_a or not group_b:
        raise InputError("both groups must be non-empty")
    ta = np.array([r.time for r in group_a])
    ea = np.array([r.event for r in group_a])
    tb = np.array([r.time for r in group_b])
    eb = np.array([r.event for r in group_b])
    event_times = sorted(set(ta[ea == 1]) | set(tb[eb == 1]))
    if not event_times:
        raise InputError("need at least one event")
    o_a = 0.0
    e_a = 0.0
    var = 0.0
    for t in event_times:
        na = int((ta >= t).sum())
        nb = int((tb >= t).sum())
        n = na + nb
        d = int(((ta == t) & (ea == 1)).sum() + ((tb == t) & (eb == 1)).sum())
        da = int(((ta == t) & (ea == 1)).sum())
        o_a += da
        e_a += d * na / n
        if n > 1:
            var += d * (na / n) * (1.0 - na / n) * (n - d) / (n - 1)
    if var == 0.0:
        raise UndefinedStatisticError("log-rank variance is zero")
    chi2 = (o_a - e_a) ** 2 / var
    p = math.erfc(math.sqrt(chi2 / 2.0))  # 1-df chi-square upper tail
    return float(chi2), float(p)


def stratify_median(cohort: list[SurvivalRecord], by: str = "tis"
                    ) -> tuple[list[SurvivalRecord], list[SurvivalRecord]]:
    """Median split; values equal to the median go to the low group."""
    if len(cohort) < 2:
        raise InputError("need at least two patients to stratify")
    if by == "tis":
        values = [r.tis for r in cohort]
    elif by == "risk":
        values = [r.risk for r in cohort]
        if any(v is None for v in values):
            raise InputError("all records need a predicted risk")
    else:
        raise InputError(f"unknown stratification key {by!r}")
    med = float(np.median(values))
    low = [r for r, v in zip(cohort, values) if v <= med]
    high = [r for r, v in zip(cohort, values) if v > med]
    return low, high


# ---------------------------------------------------------------------------
# File formats

def read_cohort_csv(path) -> list[SurvivalRecord]:
    """CSV with header patient_id,time_months,event,tis."""
    cohort = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cohort.append(SurvivalRecord(patient_id=row["patient_id"],
                                         time=float(row["time_months"]),
                                         event=int(row["event"]),
                                         tis=float(row["tis"])))
    return cohort


def write_km_csv(path, steps: list[tuple[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_months", "survival"])
        for t, s in steps:
            writer.writerow([f"{t:.10g}", f"{s:.10g}"])


def write_results_json(path, results: dict) -> None:
    with open(path, "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
