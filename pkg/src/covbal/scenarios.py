"""Population models: exact probability oracles plus samplers.

Three variants back the studies: a tabular joint pmf (the perturbed 2x2x2x2
model), a Gaussian threshold model over ten fair coins, and an empirical
cohort loaded from CSV with categorical recoding. A model knows all of its
covariates; :meth:`PopulationModel.view` chooses which are observed.
"""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import Covariate, CovariateSchema, PatientProfile, RatioLike, SchemaError, to_fraction
from .theory import JointPmf


class CohortError(ValueError):
    pass


def normal_cdf(z: float) -> float:
    """Standard normal CDF via the complementary error function.

    ``erfc`` keeps full relative precision in the tails; absolute error is
    below 1e-15 on the whole real line.
    """
    z = float(z)
    if math.isnan(z):
        raise ValueError("normal_cdf of NaN")
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


class PopulationModel:
    covariates: tuple[Covariate, ...]
    default_observed: tuple[str, ...]
    default_unobserved: tuple[str, ...]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    def sample_levels(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``(n, n_covariates)`` array of 1-based levels."""
        raise NotImplementedError

    def full_table(self) -> np.ndarray | None:
        """Exact probability of every covariate cell, axes in ``names`` order."""
        raise NotImplementedError

    def view(self, observed: Sequence[str] | None = None, unobserved: Sequence[str] | None = None) -> "ScenarioView":
        return ScenarioView(
            self,
            tuple(observed) if observed is not None else self.default_observed,
            tuple(unobserved) if unobserved is not None else self.default_unobserved,
        )


class TabularJoint(PopulationModel):
    def __init__(
        self,
        covariates: Sequence[Covariate],
        table,
        observed: Sequence[str],
        unobserved: Sequence[str],
        exact: np.ndarray | None = None,
    ):
        self.covariates = tuple(covariates)
        self.table = np.asarray(table, dtype=float)
        if self.table.shape != tuple(c.levels for c in self.covariates):
            raise ValueError("table shape does not match covariate levels")
        if (self.table < 0).any() or abs(self.table.sum() - 1) > 1e-12:
            raise ValueError("tabular joint is not a valid pmf")
        self.exact = exact
        self.default_observed = tuple(observed)
        self.default_unobserved = tuple(unobserved)
        self._cdf = np.cumsum(self.table.ravel())

    def sample_levels(self, rng, n):
        u = rng.random(n)
        cell = np.minimum(np.searchsorted(self._cdf, u, side="right"), self._cdf.size - 1)
        return np.stack(np.unravel_index(cell, self.table.shape), axis=1) + 1

    def full_table(self):
        return self.table


def delta_model(delta: RatioLike) -> TabularJoint:
    """Two binary observed and two binary unobserved covariates.

    The four cells with (U1, U2) = (X1, X2) get 1/16 + delta, the twelve
    others 1/16 - delta/3. Level 1 encodes value 0 and level 2 value 1.
    """
    d = to_fraction(delta)
    if not 0 <= d <= Fraction(3, 16):
        raise ValueError(f"delta must lie in [0, 3/16] to keep masses non-negative, got {d}")
    exact = np.empty((2, 2, 2, 2), dtype=object)
    for x1 in range(2):
        for x2 in range(2):
            for u1 in range(2):
                for u2 in range(2):
                    hit = (u1, u2) == (x1, x2)
                    exact[x1, x2, u1, u2] = Fraction(1, 16) + d if hit else Fraction(1, 16) - d / 3
    covs = [Covariate(n, 2) for n in ("X1", "X2", "U1", "U2")]
    return TabularJoint(covs, exact.astype(float), ("X1", "X2"), ("U1", "U2"), exact=exact)


class ThresholdNoise(PopulationModel):
    """Ten fair coins X1..X10 and two thresholded noisy sums.

    U1 = 1{sum X + N(0, sigma1^2) > 6}, U2 = 1{X1 + X2 + X3 + N(0, sigma2^2) > 2}.
    """

    def __init__(self, sigma1: float, sigma2: float = 1.0, n_coins: int = 10,
                 threshold1: int = 6, threshold2: int = 2, u2_inputs: int = 3):
        if not sigma1 > 0 or not sigma2 > 0:
            raise ValueError("noise standard deviations must be positive")
        self.sigma1 = float(sigma1)
        self.sigma2 = float(sigma2)
        self.n_coins = n_coins
        self.threshold1 = threshold1
        self.threshold2 = threshold2
        self.u2_inputs = u2_inputs
        xs = tuple(f"X{i}" for i in range(1, n_coins + 1))
        self.covariates = tuple(Covariate(n, 2) for n in xs + ("U1", "U2"))
        self.default_observed = xs
        self.default_unobserved = ("U1", "U2")
        self._table = None

    def p_u1(self, coin_sum: int) -> float:
        return normal_cdf((coin_sum - self.threshold1) / self.sigma1)

    def p_u2(self, first_sum: int) -> float:
        return normal_cdf((first_sum - self.threshold2) / self.sigma2)

    def sample_levels(self, rng, n):
        coins = (rng.random((n, self.n_coins)) < 0.5).astype(np.int64)
        eps = rng.standard_normal((n, 2))
        u1 = coins.sum(axis=1) + self.sigma1 * eps[:, 0] > self.threshold1
        u2 = coins[:, : self.u2_inputs].sum(axis=1) + self.sigma2 * eps[:, 1] > self.threshold2
        return np.column_stack([coins, u1, u2]).astype(np.int64) + 1

    def full_table(self):
        if self._table is None:
            k = self.n_coins
            grid = np.indices((2,) * k).reshape(k, -1).T
            total = grid.sum(axis=1)
            first = grid[:, : self.u2_inputs].sum(axis=1)
            a = np.array([self.p_u1(t) for t in total])
            b = np.array([self.p_u2(t) for t in first])
            cells = np.empty((grid.shape[0], 2, 2))
            base = 0.5 ** k
            cells[:, 1, 1] = base * a * b
            cells[:, 1, 0] = base * a * (1 - b)
            cells[:, 0, 1] = base * (1 - a) * b
            cells[:, 0, 0] = base * (1 - a) * (1 - b)
            self._table = cells.reshape((2,) * k + (2, 2))
        return self._table


def threshold_model(sigma1: float, sigma2: float = 1.0) -> ThresholdNoise:
    return ThresholdNoise(sigma1, sigma2)


class EmpiricalCohort(PopulationModel):
    """A fixed cohort; each replicate walks a fresh random permutation of it."""

    def __init__(self, covariates: Sequence[Covariate], rows, observed=None, unobserved=None,
                 replace: bool = False, raw_frequencies: Mapping | None = None):
        self.covariates = tuple(covariates)
        self.rows = np.asarray(rows, dtype=np.int64)
        if self.rows.ndim != 2 or self.rows.shape[1] != len(self.covariates):
            raise CohortError("cohort rows do not match the covariate list")
        if len(self.rows) == 0:
            raise CohortError("empty cohort")
        for k, cov in enumerate(self.covariates):
            col = self.rows[:, k]
            if col.min() < 1 or col.max() > cov.levels:
                raise CohortError(f"column {cov.name!r} has levels outside 1..{cov.levels}")
        names = tuple(c.name for c in self.covariates)
        self.default_observed = tuple(observed) if observed is not None else names[:-2]
        self.default_unobserved = tuple(unobserved) if unobserved is not None else names[-2:]
        self.replace = replace
        self.raw_frequencies = dict(raw_frequencies or {})

    def __len__(self) -> int:
        return len(self.rows)

    def with_replacement(self, replace: bool = True) -> "EmpiricalCohort":
        return EmpiricalCohort(self.covariates, self.rows, self.default_observed,
                               self.default_unobserved, replace, self.raw_frequencies)

    def sample_levels(self, rng, n):
        N = len(self.rows)
        if self.replace:
            idx = rng.integers(0, N, size=n)
        else:
            if n > N:
                raise CohortError(f"cohort of {N} exhausted: requested {n} patients")
            idx = rng.permutation(N)[:n]
        return self.rows[idx]

    def full_table(self):
        shape = tuple(c.levels for c in self.covariates)
        counts = np.zeros(shape)
        np.add.at(counts, tuple((self.rows - 1).T), 1)
        return counts / len(self.rows)

    def level_frequencies(self) -> dict[str, dict[int, int]]:
        return {
            cov.name: dict(sorted(Counter(self.rows[:, k].tolist()).items()))
            for k, cov in enumerate(self.covariates)
        }

    def to_csv(self, path) -> None:
        """Write level-coded rows (round-trips through an identity recode map)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.names)
            w.writerows(self.rows.tolist())

    def identity_recode_map(self) -> dict[str, dict[str, int]]:
        return {c.name: {str(v): v for v in range(1, c.levels + 1)} for c in self.covariates}


@dataclass(frozen=True)
class ScenarioView:
    """A model plus the observed/unobserved split that procedures and metrics use."""

    model: PopulationModel
    observed: tuple[str, ...]
    unobserved: tuple[str, ...]

    def __post_init__(self):
        names = self.model.names
        overlap = set(self.observed) & set(self.unobserved)
        if overlap:
            raise SchemaError(f"covariates both observed and unobserved: {sorted(overlap)}")
        for n in self.observed + self.unobserved:
            if n not in names:
                raise SchemaError(f"unknown covariate {n!r}")

    @property
    def schema(self) -> CovariateSchema:
        lv = {c.name: c for c in self.model.covariates}
        return CovariateSchema(tuple(lv[n] for n in self.observed), tuple(lv[n] for n in self.unobserved))

    def _cols(self, names):
        idx = {n: i for i, n in enumerate(self.model.names)}
        return [idx[n] for n in names]

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        levels = self.model.sample_levels(rng, n)
        return levels[:, self._cols(self.observed)], levels[:, self._cols(self.unobserved)]

    def profiles(self, rng: np.random.Generator, n: int) -> list[PatientProfile]:
        obs, unobs = self.sample(rng, n)
        return [PatientProfile(tuple(map(int, o)), tuple(map(int, u))) for o, u in zip(obs, unobs)]

    def pmf(self) -> JointPmf:
        table = self.model.full_table()
        if table is None:
            raise ValueError("model has no exact probability table")
        keep = self._cols(self.observed + self.unobserved)
        drop = tuple(i for i in range(table.ndim) if i not in keep)
        sub = table.sum(axis=drop) if drop else table
        order = sorted(keep)
        sub = np.transpose(sub, [order.index(i) for i in keep])
        return JointPmf(self.schema, sub, atol=1e-9)


def sample(model: PopulationModel | ScenarioView, rng: np.random.Generator) -> PatientProfile:
    view = model if isinstance(model, ScenarioView) else model.view()
    return view.profiles(rng, 1)[0]


# -- cohort ingestion -------------------------------------------------------


def load_recode_map(path) -> dict[str, dict[str, int]]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return {col: {str(k): int(v) for k, v in mapping.items()} for col, mapping in raw.items()}


def table4_recode_map() -> dict[str, dict[str, int]]:
    text = resources.files("covbal.data").joinpath("table4_recode.json").read_text(encoding="utf-8")
    raw = json.loads(text)
    return {col: {str(k): int(v) for k, v in m.items()} for col, m in raw.items()}


def load_cohort(csv_path, recode_map: Mapping[str, Mapping[str, int]] | str | Path,
                observed: Sequence[str] | None = None, unobserved: Sequence[str] | None = None) -> EmpiricalCohort:
    """Read a cohort CSV and recode raw categories to 1-based levels.

    Columns are taken in ``recode_map`` order. Every unmapped value is
    reported with its data-row number (1 = first row after the header).
    """
    if not isinstance(recode_map, Mapping):
        recode_map = load_recode_map(recode_map)
    columns = list(recode_map)
    levels = {}
    for col, mapping in recode_map.items():
        if not mapping:
            raise CohortError(f"recode map for {col!r} is empty")
        vals = set(mapping.values())
        if min(vals) < 1:
            raise CohortError(f"recode map for {col!r} uses a level below 1")
        levels[col] = max(vals)

    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CohortError(f"{csv_path}: empty file")
        missing = [c for c in columns if c not in reader.fieldnames]
        if missing:
            raise CohortError(f"{csv_path}: missing column(s) {missing}")
        rows, problems = [], []
        raw_counts: dict[str, Counter] = {c: Counter() for c in columns}
        for rownum, rec in enumerate(reader, start=1):
            out = []
            for col in columns:
                raw = (rec[col] or "").strip()
                level = recode_map[col].get(raw)
                if level is None:
                    problems.append(f"row {rownum}: column {col!r} has unmapped value {raw!r}")
                    continue
                raw_counts[col][raw] += 1
                out.append(level)
            if len(out) == len(columns):
                rows.append(out)
    if problems:
        shown = "; ".join(problems[:20])
        more = f" (+{len(problems) - 20} more)" if len(problems) > 20 else ""
        raise CohortError(f"{csv_path}: {shown}{more}")
    if not rows:
        raise CohortError(f"{csv_path}: no data rows")
    covs = [Covariate(c, levels[c]) for c in columns]
    return EmpiricalCohort(covs, rows, observed, unobserved,
                           raw_frequencies={c: dict(v) for c, v in raw_counts.items()})


def empirical_joint(cohort: EmpiricalCohort, observed_names: Sequence[str], unobserved_names: Sequence[str]) -> JointPmf:
    return cohort.view(observed_names, unobserved_names).pmf()


# -- synthetic cohort ---------------------------------------------------------

_RAW = {
    "Gender": ["Male", "Female"],
    "SITEID": ["76", "135", "464"],
    "Major Race": [
        ["White", "Hispanic or Latino"],
        ["African American or Black"],
        ["Asian", "Pacific Islander"],
        ["American Indian or Alaska Native"],
        ["Other"],
    ],
    "Marital Status": [
        ["Legally married", "Cohabit"],
        ["Widowed", "Separated", "Divorced"],
        ["Never married"],
    ],
    "Employment Pattern": [
        ["Full time"],
        ["Part time", "Homemaker"],
        ["Student", "Military service"],
        ["Retired", "Disabled", "Unemployed", "Controlled environment"],
    ],
    "Education Completed Years": [
        [str(y) for y in range(6, 12)],
        ["12"],
        [str(y) for y in range(13, 21)],
    ],
}


def write_synthetic_cohort(path, n: int = 281, seed: int = 2014) -> Path:
    """Write a schema-compatible synthetic demographic cohort as raw strings.

    The four demographic columns drive a latent score that shifts the
    employment and education categories, so the unobserved pair depends on
    the observed block. Raw categories use the many-to-one merges of the
    bundled recode map.
    """
    rng = np.random.default_rng(seed)
    gender = rng.choice(2, size=n, p=[0.6, 0.4])
    site = rng.choice(3, size=n, p=[0.5, 0.3, 0.2])
    race = rng.choice(5, size=n, p=[0.3, 0.3, 0.15, 0.1, 0.15])
    marital = rng.choice(3, size=n, p=[0.35, 0.3, 0.35])
    score = (
        0.4 * gender
        + 0.3 * site
        + np.array([0.0, 1.2, 0.4, 1.6, 0.8])[race]
        + np.array([0.0, 1.0, 1.8])[marital]
        + rng.normal(0, 0.8, n)
    )
    employ = np.digitize(score, [0.9, 1.7, 2.4])
    educ = np.digitize(0.6 * score + rng.normal(0, 0.9, n), [0.6, 1.4])
    cols = {
        "Gender": gender, "SITEID": site, "Major Race": race, "Marital Status": marital,
        "Employment Pattern": employ, "Education Completed Years": educ,
    }
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["PATID"] + list(cols))
        for i in range(n):
            rec = [f"P{i + 1:04d}"]
            for name, values in cols.items():
                choices = _RAW[name][values[i]]
                if isinstance(choices, list):
                    choices = choices[int(rng.integers(len(choices)))]
                rec.append(choices)
            w.writerow(rec)
    return path
