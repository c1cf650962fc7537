"""Study orchestration: replicate fan-out, aggregation and theory references."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..core import (
    JointStratumMargin,
    JointStratumStratum,
    ObsStratum,
    UnobsMargin,
    UnobsStratum,
)
from ..scenarios import ScenarioView
from ..theory import UndefinedConditional, classify_regime, strpb_variance, tau_cr_sq, tau_sq
from .engine import Metric, ProcedureSpec, run_batch

log = logging.getLogger(__name__)

UNOBSERVED = (UnobsMargin, UnobsStratum, JointStratumMargin, JointStratumStratum)


@dataclass
class StudyConfig:
    view: ScenarioView
    procedures: Sequence[ProcedureSpec]
    n: int
    replicates: int
    seed: int
    metrics: Sequence[Metric]
    label: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("need at least one replicate")
        if self.n < 1:
            raise ValueError("need at least one patient")
        schema = self.view.schema
        for metric in self.metrics:
            metric.scope.validate(schema)
        for spec in self.procedures:
            if any(not 1 <= mt.arm <= spec.m for mt in self.metrics):
                raise ValueError(f"{spec.label}: metric arm outside 1..{spec.m}")
            if spec.kind == "car" and len(spec.weights.margins) != schema.p:
                raise ValueError(
                    f"{spec.label}: {len(spec.weights.margins)} margin weights for {schema.p} observed covariates"
                )


@dataclass
class SummaryRow:
    scenario: str
    procedure: str
    metric: str
    group: int
    mean: float
    sd: float | None
    se_mean: float | None
    se_sd: float | None
    theory_ref: str | None = None
    theory_value: float | None = None


@dataclass
class StudySummary:
    label: str
    n: int
    replicates: int
    seed: int
    rows: list[SummaryRow]
    samples: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def row(self, procedure: str, metric: str | Metric, group: int | None = None) -> SummaryRow:
        if isinstance(metric, Metric):
            metric, group = metric.id, metric.arm
        for r in self.rows:
            if r.procedure == procedure and r.metric == metric and r.group == group:
                return r
        raise KeyError((procedure, metric, group))

    def to_records(self) -> list[dict]:
        return [asdict(r) for r in self.rows]


CSV_COLUMNS = ["scenario", "procedure", "metric", "group", "mean", "sd", "se_mean", "se_sd",
               "theory_ref", "theory_value"]


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return x


def write_summary_csv(summaries: Sequence[StudySummary], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for summ in summaries:
            for rec in summ.to_records():
                w.writerow([_fmt(rec[c]) for c in CSV_COLUMNS])


def write_summary_json(summaries: Sequence[StudySummary], path) -> None:
    payload = [
        {"label": s.label, "n": s.n, "replicates": s.replicates, "seed": s.seed, "rows": s.to_records()}
        for s in summaries
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def summarize(samples) -> tuple[float, float | None, float | None, float | None]:
    """(mean, sd, se_mean, se_sd) with divisor R - 1; spread is None for R = 1."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("cannot summarise an empty sample")
    mean = float(np.mean(x))
    if x.size < 2:
        return mean, None, None, None
    sd = float(np.std(x, ddof=1))
    R = x.size
    return mean, sd, sd / math.sqrt(R), sd / math.sqrt(2 * (R - 1))


def theory_reference(view: ScenarioView, spec: ProcedureSpec, metric: Metric, n: int):
    """(label, sd of n^{-1/2} D) where a closed form applies, else (None, None)."""
    try:
        pmf = view.pmf()
    except ValueError:
        return None, None
    rho = spec.ratios[metric.arm - 1]
    scope = metric.scope
    try:
        if spec.kind == "cr":
            return "tau_cr", math.sqrt(tau_cr_sq(pmf, rho, scope))
        if spec.kind == "str_pb":
            if not isinstance(scope, UNOBSERVED + (ObsStratum,)):
                return None, None
            blocks = np.array([spec.block_size(s) for s in view.schema.observed_strata()], dtype=float)
            regime = classify_regime(n, pmf.p_s, blocks)
            if regime == "mixed":
                return None, None
            v = strpb_variance(pmf, rho, scope, regime, n, blocks)
            return f"strpb_{regime}", math.sqrt(max(v.value, 0.0) / n)
        if spec.kind == "car" and spec.weights.stratum > 0 and isinstance(scope, UNOBSERVED):
            return "tau", math.sqrt(tau_sq(pmf, rho, scope))
    except UndefinedConditional:
        return None, None
    return None, None


def _batches(R: int, size: int) -> list[range]:
    return [range(a, min(a + size, R)) for a in range(0, R, size)]


def simulate(view: ScenarioView, spec: ProcedureSpec, n: int, metrics: Sequence[Metric], R: int,
             seed: int, threads: int = 1, batch_size: int | None = None) -> np.ndarray:
    """``(R, len(metrics))`` samples in replicate order."""
    if batch_size is None:
        strata = view.schema.n_obs_strata if spec.uses_strata else 1
        batch_size = int(max(64, min(2000, 4e7 // max(1, n * min(strata, n) * spec.m))))
    chunks = _batches(R, batch_size)

    def work(idx: range) -> np.ndarray:
        try:
            return run_batch(view, spec, n, metrics, seed, idx)
        except Exception as exc:
            raise RuntimeError(f"replicates {idx.start}..{idx.stop - 1} of {spec.label} failed: {exc}") from exc

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    return np.concatenate(parts, axis=0)


def run_study(config: StudyConfig, threads: int = 1) -> StudySummary:
    rows = []
    samples = {}
    for spec in config.procedures:
        log.info("%s: %s, n=%d, R=%d", config.label, spec.label, config.n, config.replicates)
        values = simulate(config.view, spec, config.n, config.metrics, config.replicates, config.seed, threads)
        samples[spec.label] = values
        for c, metric in enumerate(config.metrics):
            mean, sd, se_mean, se_sd = summarize(values[:, c])
            ref, val = theory_reference(config.view, spec, metric, config.n)
            rows.append(SummaryRow(config.label, spec.label, metric.id, metric.arm,
                                   mean, sd, se_mean, se_sd, ref, val))
    return StudySummary(config.label, config.n, config.replicates, config.seed, rows, samples)


@dataclass
class GammaEstimate:
    n_grid: tuple[int, ...]
    variances: tuple[float, ...]
    se: tuple[float, ...]
    plateau: float
    trend: str  # "decaying" | "plateau" | "undetermined"


def estimate_gamma(view: ScenarioView, spec: ProcedureSpec, n_grid: Sequence[int], R: int, seed: int,
                   stratum: Sequence[int] | None = None, arm: int = 1, threads: int = 1) -> GammaEstimate:
    """Empirical Var[n^{-1/2} D_{n,g}(s)] along a grid of trial sizes.

    The trend is ``decaying`` when the last variance is below 25% of the
    first with every step decreasing, ``plateau`` when the last is within
    20% of the middle grid point.
    """
    n_grid = tuple(int(n) for n in n_grid)
    if len(n_grid) < 2:
        raise ValueError("need at least two grid points")
    s = tuple(stratum) if stratum is not None else (1,) * view.schema.p
    metric = Metric(ObsStratum(s), arm)
    variances, ses = [], []
    for k, n in enumerate(n_grid):
        x = simulate(view, spec, n, [metric], R, seed + k, threads)[:, 0]
        var = float(np.var(x, ddof=1))
        variances.append(var)
        ses.append(var * math.sqrt(2.0 / (R - 1)))
    first, mid, last = variances[0], variances[len(variances) // 2], variances[-1]
    monotone = all(b < a for a, b in zip(variances, variances[1:]))
    if monotone and last < 0.25 * first:
        trend = "decaying"
    elif mid > 0 and abs(last / mid - 1) <= 0.2:
        trend = "plateau"
    else:
        trend = "undetermined"
    return GammaEstimate(n_grid, tuple(variances), tuple(ses), last, trend)
