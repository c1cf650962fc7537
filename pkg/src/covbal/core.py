"""Covariate schemas, blinded patient records and the exact imbalance ledger.

All level indices and covariate indices are 1-based. Imbalances are kept as
``fractions.Fraction`` so that zero-sum and decomposition identities hold
exactly.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence, Union

Rational = Fraction
RatioLike = Union[Fraction, int, str, float]


def to_fraction(value: RatioLike) -> Fraction:
    """Parse ``"3/10"``, ``"0.3"``, ints, Fractions or floats into a Fraction.

    Floats are snapped to the nearest fraction with denominator <= 10**6 so
    that JSON numbers such as ``0.2`` or ``1/3`` written as a float behave.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TypeError("booleans are not ratios")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite value {value!r}")
        return Fraction(value).limit_denominator(10**6)
    if isinstance(value, str):
        return Fraction(value.strip())
    raise TypeError(f"cannot interpret {value!r} as a rational")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Covariate:
    name: str
    levels: int


@dataclass(frozen=True)
class CovariateSchema:
    observed: tuple[Covariate, ...]
    unobserved: tuple[Covariate, ...] = ()

    def __post_init__(self):
        if not self.observed:
            raise SchemaError("at least one observed covariate is required")
        seen = set()
        for cov in self.observed + self.unobserved:
            if cov.levels < 2:
                raise SchemaError(f"covariate {cov.name!r} needs >= 2 levels, got {cov.levels}")
            if cov.name in seen:
                raise SchemaError(f"duplicate covariate name {cov.name!r}")
            seen.add(cov.name)

    @property
    def p(self) -> int:
        return len(self.observed)

    @property
    def q(self) -> int:
        return len(self.unobserved)

    @property
    def observed_levels(self) -> tuple[int, ...]:
        return tuple(c.levels for c in self.observed)

    @property
    def unobserved_levels(self) -> tuple[int, ...]:
        return tuple(c.levels for c in self.unobserved)

    @property
    def n_obs_strata(self) -> int:
        return math.prod(self.observed_levels)

    @property
    def n_unobs_strata(self) -> int:
        return math.prod(self.unobserved_levels)

    def observed_strata(self) -> Iterable[tuple[int, ...]]:
        return itertools.product(*(range(1, l + 1) for l in self.observed_levels))

    def unobserved_strata(self) -> Iterable[tuple[int, ...]]:
        return itertools.product(*(range(1, h + 1) for h in self.unobserved_levels))


def build_schema(
    observed_spec: Sequence[tuple[str, int]],
    unobserved_spec: Sequence[tuple[str, int]] = (),
) -> CovariateSchema:
    return CovariateSchema(
        tuple(Covariate(name, int(levels)) for name, levels in observed_spec),
        tuple(Covariate(name, int(levels)) for name, levels in unobserved_spec),
    )


def _check_levels(levels: Sequence[int], counts: Sequence[int], what: str) -> tuple[int, ...]:
    levels = tuple(int(v) for v in levels)
    if len(levels) != len(counts):
        raise SchemaError(f"{what}: expected {len(counts)} levels, got {len(levels)}")
    for v, c in zip(levels, counts):
        if not 1 <= v <= c:
            raise SchemaError(f"{what}: level {v} outside 1..{c}")
    return levels


@dataclass(frozen=True)
class BlindedProfile:
    """The only view of a patient that allocation procedures may read."""

    observed_levels: tuple[int, ...]


@dataclass(frozen=True)
class PatientProfile:
    observed_levels: tuple[int, ...]
    unobserved_levels: tuple[int, ...] = ()

    @classmethod
    def create(cls, schema: CovariateSchema, observed, unobserved=()) -> "PatientProfile":
        return cls(
            _check_levels(observed, schema.observed_levels, "observed"),
            _check_levels(unobserved, schema.unobserved_levels, "unobserved"),
        )

    def blinded(self) -> BlindedProfile:
        return BlindedProfile(self.observed_levels)


# -- scopes ---------------------------------------------------------------


@dataclass(frozen=True)
class Overall:
    def contains(self, obs, unobs) -> bool:
        return True

    def validate(self, schema: CovariateSchema) -> None:
        pass


@dataclass(frozen=True)
class ObsMargin:
    k: int
    level: int

    def contains(self, obs, unobs) -> bool:
        return obs[self.k - 1] == self.level

    def validate(self, schema):
        _check_margin(self.k, self.level, schema.observed_levels, "observed margin")


@dataclass(frozen=True)
class ObsStratum:
    s: tuple[int, ...]

    def contains(self, obs, unobs) -> bool:
        return tuple(obs) == self.s

    def validate(self, schema):
        _check_levels(self.s, schema.observed_levels, "observed stratum")


@dataclass(frozen=True)
class UnobsMargin:
    j: int
    level: int

    def contains(self, obs, unobs) -> bool:
        return unobs[self.j - 1] == self.level

    def validate(self, schema):
        _check_margin(self.j, self.level, schema.unobserved_levels, "unobserved margin")


@dataclass(frozen=True)
class UnobsStratum:
    r: tuple[int, ...]

    def contains(self, obs, unobs) -> bool:
        return tuple(unobs) == self.r

    def validate(self, schema):
        _check_levels(self.r, schema.unobserved_levels, "unobserved stratum")


@dataclass(frozen=True)
class JointStratumMargin:
    s: tuple[int, ...]
    j: int
    level: int

    def contains(self, obs, unobs) -> bool:
        return tuple(obs) == self.s and unobs[self.j - 1] == self.level

    def validate(self, schema):
        _check_levels(self.s, schema.observed_levels, "observed stratum")
        _check_margin(self.j, self.level, schema.unobserved_levels, "unobserved margin")


@dataclass(frozen=True)
class JointStratumStratum:
    s: tuple[int, ...]
    r: tuple[int, ...]

    def contains(self, obs, unobs) -> bool:
        return tuple(obs) == self.s and tuple(unobs) == self.r

    def validate(self, schema):
        _check_levels(self.s, schema.observed_levels, "observed stratum")
        _check_levels(self.r, schema.unobserved_levels, "unobserved stratum")


Scope = Union[
    Overall, ObsMargin, ObsStratum, UnobsMargin, UnobsStratum, JointStratumMargin, JointStratumStratum
]
OBSERVED_SCOPES = (Overall, ObsMargin, ObsStratum)
UNOBSERVED_SCOPES = (UnobsMargin, UnobsStratum, JointStratumMargin, JointStratumStratum)


def _check_margin(index: int, level: int, counts: Sequence[int], what: str) -> None:
    if not 1 <= index <= len(counts):
        raise SchemaError(f"{what}: covariate index {index} outside 1..{len(counts)}")
    if not 1 <= level <= counts[index - 1]:
        raise SchemaError(f"{what}: level {level} outside 1..{counts[index - 1]}")


def scopes_of(obs: tuple[int, ...], unobs: tuple[int, ...] | None) -> list[Scope]:
    """Every scope containing a patient; unobserved scopes only if ``unobs`` is given."""
    out: list[Scope] = [Overall(), ObsStratum(obs)]
    out.extend(ObsMargin(k, v) for k, v in enumerate(obs, start=1))
    if unobs is not None and len(unobs):
        out.append(UnobsStratum(unobs))
        out.append(JointStratumStratum(obs, unobs))
        for j, v in enumerate(unobs, start=1):
            out.append(UnobsMargin(j, v))
            out.append(JointStratumMargin(obs, j, v))
    return out


# -- ledger ---------------------------------------------------------------


class AllocationLedger:
    """Running counts N(A), N_g(A) for every scope touched so far.

    ``auditor=False`` gives the procedure-facing ledger: it accepts blinded
    profiles and tracks observed scopes only. ``auditor=True`` requires full
    profiles and additionally tracks every unobserved and joint scope.
    """

    def __init__(self, schema: CovariateSchema, ratios: Sequence[RatioLike], auditor: bool = False):
        self.schema = schema
        self.ratios = tuple(to_fraction(r) for r in ratios)
        if sum(self.ratios) != 1 or any(r < 0 for r in self.ratios):
            raise ValueError(f"ratios must be non-negative and sum to 1, got {self.ratios}")
        self.m = len(self.ratios)
        self.auditor = auditor
        self.n = 0
        self._counts: dict[Scope, list[int]] = {}
        self.history: list[tuple[tuple[int, ...], tuple[int, ...] | None, int]] = []

    def record(self, profile: PatientProfile | BlindedProfile, arm: int) -> None:
        if not 1 <= arm <= self.m:
            raise ValueError(f"arm {arm} outside 1..{self.m}")
        if self.auditor:
            if not isinstance(profile, PatientProfile):
                raise TypeError("auditor ledger needs the full PatientProfile")
            unobs = profile.unobserved_levels
        else:
            unobs = None
        obs = profile.observed_levels
        for scope in scopes_of(obs, unobs):
            row = self._counts.get(scope)
            if row is None:
                row = self._counts[scope] = [0] * (self.m + 1)
            row[0] += 1
            row[arm] += 1
        self.n += 1
        self.history.append((obs, unobs, arm))

    def count(self, scope: Scope, arm: int | None = None) -> int:
        row = self._counts.get(scope)
        if row is None:
            return 0
        return row[0] if arm is None else row[arm]

    def imbalance(self, scope: Scope, arm: int) -> Fraction:
        if not 1 <= arm <= self.m:
            raise ValueError(f"arm {arm} outside 1..{self.m}")
        scope.validate(self.schema)
        if not self.auditor and not isinstance(scope, OBSERVED_SCOPES):
            raise TypeError("unobserved scopes are only available on an auditor ledger")
        row = self._counts.get(scope)
        if row is None:
            return Fraction(0)
        return row[arm] - self.ratios[arm - 1] * row[0]

    def imbalances(self, scope: Scope) -> list[Fraction]:
        return [self.imbalance(scope, g) for g in range(1, self.m + 1)]

    def scopes(self) -> list[Scope]:
        return list(self._counts)


def record_assignment(ledger: AllocationLedger, profile, arm: int) -> AllocationLedger:
    ledger.record(profile, arm)
    return ledger


def imbalance(ledger: AllocationLedger, scope: Scope, arm: int) -> Fraction:
    return ledger.imbalance(scope, arm)
