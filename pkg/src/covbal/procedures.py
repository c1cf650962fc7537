"""Sequential allocation procedures: CR, stratified permuted blocks and CAR.

Every procedure consumes exactly one uniform draw ``u`` in [0, 1) per patient
and maps it to an arm with the shared rule in :func:`choose_arm`. The
vectorised Monte Carlo engine uses the same rule, which is what makes the two
paths produce bit-identical arm sequences for the same stream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .core import (
    AllocationLedger,
    BlindedProfile,
    CovariateSchema,
    ObsMargin,
    ObsStratum,
    Overall,
    RatioLike,
    to_fraction,
)


class ConfigurationError(ValueError):
    """Parameters excluded by the procedure's validity conditions."""


def validate_ratios(ratios: Sequence[RatioLike], allow_zero: bool = False) -> tuple[Fraction, ...]:
    out = tuple(to_fraction(r) for r in ratios)
    if len(out) < 2:
        raise ConfigurationError("need at least two arms")
    if sum(out) != 1:
        raise ConfigurationError(f"ratios must sum to 1, got {sum(out)}")
    for r in out:
        if r < 0 or (r == 0 and not allow_zero):
            raise ConfigurationError(f"ratio {r} must be {'>= 0' if allow_zero else '> 0'}")
    return out


def period(ratios: Sequence[RatioLike]) -> int:
    """Least common multiple of the reduced ratio denominators."""
    rs = validate_ratios(ratios)
    return math.lcm(*(r.denominator for r in rs))


def choose_arm(cum, u):
    """0-based arm index for uniform ``u`` given cumulative probabilities.

    Works elementwise on ``(..., m)`` arrays; arms with zero mass are never
    selected.
    """
    cum = np.asarray(cum, dtype=float)
    idx = (cum <= np.asarray(u)[..., None]).sum(axis=-1)
    return np.minimum(idx, cum.shape[-1] - 1)


def tie_averaged_probs(keys, biased_cum0):
    """Rank-to-probability map with tie averaging.

    ``keys[..., t]`` orders arms like their potential imbalance. The arm with
    the k-th largest key receives ``biased[k]``; arms in a tied group share
    the mean of the biased values of the ranks they span. ``biased_cum0`` is
    ``[0, b1, b1+b2, ...]`` as floats.
    """
    keys = np.asarray(keys)
    gt = (keys[..., None, :] > keys[..., :, None]).sum(axis=-1)
    eq = (keys[..., None, :] == keys[..., :, None]).sum(axis=-1)
    cum0 = np.asarray(biased_cum0, dtype=float)
    return (cum0[gt + eq] - cum0[gt]) / eq


@dataclass(frozen=True)
class BiasedProbabilities:
    values: tuple[Fraction, ...]

    @classmethod
    def create(cls, values: Sequence[RatioLike], ratios: Sequence[RatioLike]) -> "BiasedProbabilities":
        vals = tuple(to_fraction(v) for v in values)
        rs = sorted(validate_ratios(ratios))
        if len(vals) != len(rs):
            raise ConfigurationError(f"need {len(rs)} biased probabilities, got {len(vals)}")
        if any(not 0 < v < 1 for v in vals):
            raise ConfigurationError("biased probabilities must lie in (0, 1)")
        if abs(float(sum(vals)) - 1.0) > 1e-12:
            raise ConfigurationError(f"biased probabilities must sum to 1, got {float(sum(vals))}")
        if list(vals) != sorted(vals):
            raise ConfigurationError("biased probabilities must be non-decreasing")
        gaps = [v - r for v, r in zip(vals, rs)]
        if any(b < a for a, b in zip(gaps, gaps[1:])):
            raise ConfigurationError("p_k - rho_k must be non-decreasing (rho sorted ascending)")
        if not gaps[0] < 0 < gaps[-1]:
            raise ConfigurationError("need p_1 - rho_1 < 0 < p_m - rho_m")
        return cls(vals)

    @property
    def cum0(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum([float(v) for v in self.values])])


@dataclass(frozen=True)
class CarWeights:
    overall: Fraction
    margins: tuple[Fraction, ...]
    stratum: Fraction

    @classmethod
    def create(cls, overall: RatioLike, margins: Sequence[RatioLike], stratum: RatioLike) -> "CarWeights":
        w = cls(to_fraction(overall), tuple(to_fraction(x) for x in margins), to_fraction(stratum))
        parts = (w.overall, *w.margins, w.stratum)
        if any(x < 0 for x in parts):
            raise ConfigurationError("CAR weights must be non-negative")
        total = sum(parts)
        if abs(float(total) - 1.0) > 1e-12:
            raise ConfigurationError(
                f"weights violate w_o + sum w_m,k + w_s = 1 (sum = {total})"
            )
        return w

    @classmethod
    def pocock_simon(cls, p: int) -> "CarWeights":
        return cls.create(0, [Fraction(1, p)] * p, 0)

    def integer_scaled(self) -> tuple[int, tuple[int, ...], int]:
        """Weights times their common denominator, for exact integer ranking."""
        parts = (self.overall, *self.margins, self.stratum)
        den = math.lcm(*(x.denominator for x in parts))
        ints = [int(x * den) for x in parts]
        return ints[0], tuple(ints[1:-1]), ints[-1]


def _require_blinded(profile) -> BlindedProfile:
    if not isinstance(profile, BlindedProfile):
        raise TypeError("procedures accept only the blinded profile view")
    return profile


def _draw(rng) -> float:
    return float(rng.random()) if hasattr(rng, "random") else float(rng)


class CompleteRandomization:
    name = "CR"

    def __init__(self, ratios: Sequence[RatioLike]):
        self.ratios = validate_ratios(ratios, allow_zero=True)
        self.m = len(self.ratios)
        self.cum = np.cumsum([float(r) for r in self.ratios])

    def assign(self, profile: BlindedProfile, rng) -> int:
        _require_blinded(profile)
        return int(choose_arm(self.cum, _draw(rng))) + 1


def assign_cr(ratios: Sequence[RatioLike], rng) -> int:
    """One multinomial(1, rho) draw; returns a 1-based arm."""
    cum = np.cumsum([float(r) for r in validate_ratios(ratios, allow_zero=True)])
    return int(choose_arm(cum, _draw(rng))) + 1


class StratifiedPermutedBlock:
    """Per-stratum permuted blocks of size ``c * Q``.

    A block is realised by drawing without replacement from the remaining
    block multiset, one uniform per patient; the sequence of pops over a
    block is a uniformly random permutation of the multiset.
    """

    name = "STR-PB"

    def __init__(
        self,
        schema: CovariateSchema,
        ratios: Sequence[RatioLike],
        block_multiple: int = 1,
        overrides: Mapping[tuple[int, ...], int] | None = None,
    ):
        self.ratios = validate_ratios(ratios)
        self.schema = schema
        self.m = len(self.ratios)
        self.Q = period(self.ratios)
        if int(block_multiple) != block_multiple or block_multiple < 1:
            raise ConfigurationError(f"block multiple must be a positive integer, got {block_multiple}")
        self.default_block = int(block_multiple) * self.Q
        self.overrides = {}
        for s, b in (overrides or {}).items():
            if b % self.Q:
                raise ConfigurationError(f"block size {b} for stratum {s} is not a multiple of Q={self.Q}")
            self.overrides[tuple(s)] = int(b)
        self.remaining: dict[tuple[int, ...], list[int]] = {}

    def block_size(self, stratum: tuple[int, ...]) -> int:
        return self.overrides.get(tuple(stratum), self.default_block)

    def block_counts(self, stratum: tuple[int, ...]) -> list[int]:
        b = self.block_size(stratum)
        return [int(b * r) for r in self.ratios]

    def assign(self, profile: BlindedProfile, rng) -> int:
        s = _require_blinded(profile).observed_levels
        rem = self.remaining.get(s)
        if rem is None or sum(rem) == 0:
            rem = self.remaining[s] = self.block_counts(s)
        total = sum(rem)
        j = min(math.floor(_draw(rng) * total), total - 1)
        arm = int(choose_arm(np.cumsum(rem), float(j)))
        rem[arm] -= 1
        return arm + 1


def new_str_pb(schema, ratios, block_multiple: int = 1) -> StratifiedPermutedBlock:
    return StratifiedPermutedBlock(schema, ratios, block_multiple)


def assign_str_pb(state: StratifiedPermutedBlock, blinded_profile: BlindedProfile, rng) -> int:
    return state.assign(blinded_profile, rng)


class CovariateAdaptive:
    """Weighted overall/margin/stratum minimisation with biased probabilities."""

    name = "CAR"

    def __init__(
        self,
        schema: CovariateSchema,
        ratios: Sequence[RatioLike],
        weights: CarWeights,
        biased: BiasedProbabilities | Sequence[RatioLike],
    ):
        self.ratios = validate_ratios(ratios)
        self.schema = schema
        self.m = len(self.ratios)
        if len(weights.margins) != schema.p:
            raise ConfigurationError(
                f"need {schema.p} margin weights, got {len(weights.margins)}"
            )
        self.weights = weights
        if not isinstance(biased, BiasedProbabilities):
            biased = BiasedProbabilities.create(biased, self.ratios)
        elif len(biased.values) != self.m:
            raise ConfigurationError("biased probability count does not match arm count")
        self.biased = biased
        self.ledger = AllocationLedger(schema, self.ratios)

    def potential_imbalance_exact(self, profile: BlindedProfile, t: int) -> Fraction:
        if not 1 <= t <= self.m:
            raise ValueError(f"arm {t} outside 1..{self.m}")
        s = _require_blinded(profile).observed_levels
        w = self.weights
        terms = [(w.overall, Overall()), (w.stratum, ObsStratum(s))]
        terms.extend((wk, ObsMargin(k, v)) for k, (wk, v) in enumerate(zip(w.margins, s), start=1))
        total = Fraction(0)
        for weight, scope in terms:
            if weight == 0:
                continue
            acc = Fraction(0)
            for g, rho in enumerate(self.ratios, start=1):
                d = self.ledger.imbalance(scope, g) + (g == t) - rho
                acc += d * d
            total += weight * acc
        return total

    def potential_imbalance(self, profile: BlindedProfile, t: int) -> float:
        return float(self.potential_imbalance_exact(profile, t))

    def allocation_probs(self, profile: BlindedProfile) -> np.ndarray:
        if self.ledger.n == 0:
            return np.array([float(r) for r in self.ratios])
        imbs = [self.potential_imbalance_exact(profile, t) for t in range(1, self.m + 1)]
        return car_allocation_probs(imbs, self.biased)

    def assign(self, profile: BlindedProfile, rng) -> int:
        probs = self.allocation_probs(_require_blinded(profile))
        arm = int(choose_arm(np.cumsum(probs), _draw(rng))) + 1
        self.ledger.record(profile, arm)
        return arm


def potential_imbalance(state: CovariateAdaptive, ledger, blinded_profile, t: int) -> float:
    if ledger is not None and ledger is not state.ledger:
        raise ValueError("ledger does not belong to this CAR state")
    return state.potential_imbalance(blinded_profile, t)


def car_allocation_probs(imb_values: Sequence, biased: BiasedProbabilities | Sequence[float]) -> np.ndarray:
    values = biased.values if isinstance(biased, BiasedProbabilities) else tuple(biased)
    if len(imb_values) != len(values):
        raise ValueError("imbalance and biased-probability vectors differ in length")
    for x in imb_values:
        if isinstance(x, float) and math.isnan(x):
            raise ValueError("NaN in potential imbalances")
    cum0 = np.concatenate([[0.0], np.cumsum([float(v) for v in values])])
    keys = np.array(list(imb_values), dtype=object)
    return tie_averaged_probs(keys, cum0)


def assign_car(state: CovariateAdaptive, blinded_profile: BlindedProfile, rng) -> int:
    return state.assign(blinded_profile, rng)
