"""Procedure specs, metric evaluation and the two replicate runners.

``run_replicate`` is the reference path: one trial at a time through the
procedure objects and an exact auditor ledger. ``run_batch`` allocates a
whole batch of replicates at once with integer count arrays; it applies the
same decision rules to the same streams and must reproduce the reference
arm sequences exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from ..core import (
    AllocationLedger,
    JointStratumMargin,
    JointStratumStratum,
    ObsMargin,
    ObsStratum,
    Overall,
    PatientProfile,
    UnobsMargin,
    UnobsStratum,
    CovariateSchema,
)
from ..procedures import (
    BiasedProbabilities,
    CarWeights,
    CompleteRandomization,
    ConfigurationError,
    CovariateAdaptive,
    StratifiedPermutedBlock,
    choose_arm,
    period,
    tie_averaged_probs,
    validate_ratios,
)
from ..scenarios import ScenarioView
from .streams import replicate_streams


@dataclass(frozen=True)
class ProcedureSpec:
    """Everything needed to build a fresh procedure state for one trial."""

    kind: str  # "cr" | "str_pb" | "car"
    ratios: tuple[Fraction, ...]
    label: str = ""
    block_multiple: int = 1
    block_overrides: tuple[tuple[tuple[int, ...], int], ...] = ()
    weights: CarWeights | None = None
    biased: BiasedProbabilities | None = None

    def __post_init__(self):
        if self.kind not in ("cr", "str_pb", "car"):
            raise ConfigurationError(f"unknown procedure kind {self.kind!r}")
        object.__setattr__(self, "ratios", validate_ratios(self.ratios, allow_zero=self.kind == "cr"))
        if not self.label:
            object.__setattr__(self, "label", {"cr": "CR", "str_pb": "STR-PB", "car": "CAR"}[self.kind])
        if self.kind == "str_pb":
            if int(self.block_multiple) != self.block_multiple or self.block_multiple < 1:
                raise ConfigurationError(f"block multiple must be a positive integer, got {self.block_multiple}")
            Q = period(self.ratios)
            for s, b in self.block_overrides:
                if b % Q:
                    raise ConfigurationError(f"block size {b} for stratum {s} is not a multiple of Q={Q}")
        if self.kind == "car":
            if self.weights is None or self.biased is None:
                raise ConfigurationError("CAR needs weights and biased probabilities")
            if len(self.biased.values) != len(self.ratios):
                raise ConfigurationError("biased probability count does not match arm count")
            BiasedProbabilities.create(self.biased.values, self.ratios)

    @property
    def m(self) -> int:
        return len(self.ratios)

    @property
    def uses_strata(self) -> bool:
        return self.kind == "str_pb" or (self.kind == "car" and self.weights.stratum > 0)

    def build(self, schema: CovariateSchema):
        if self.kind == "cr":
            return CompleteRandomization(self.ratios)
        if self.kind == "str_pb":
            return StratifiedPermutedBlock(schema, self.ratios, self.block_multiple, dict(self.block_overrides))
        return CovariateAdaptive(schema, self.ratios, self.weights, self.biased)

    def block_size(self, stratum) -> int:
        return dict(self.block_overrides).get(tuple(stratum), self.block_multiple * period(self.ratios))


@dataclass(frozen=True)
class Metric:
    scope: object
    arm: int  # 1-based

    @property
    def id(self) -> str:
        return scope_id(self.scope)


def scope_id(scope) -> str:
    def tup(t):
        return "(" + ",".join(map(str, t)) + ")"

    if isinstance(scope, Overall):
        return "overall"
    if isinstance(scope, ObsMargin):
        return f"obs_margin[{scope.k};{scope.level}]"
    if isinstance(scope, ObsStratum):
        return f"obs_stratum{tup(scope.s)}"
    if isinstance(scope, UnobsMargin):
        return f"unobs_margin[{scope.j};{scope.level}]"
    if isinstance(scope, UnobsStratum):
        return f"unobs_stratum{tup(scope.r)}"
    if isinstance(scope, JointStratumMargin):
        return f"joint{tup(scope.s)}[{scope.j};{scope.level}]"
    if isinstance(scope, JointStratumStratum):
        return f"joint{tup(scope.s)}{tup(scope.r)}"
    raise TypeError(f"unknown scope {scope!r}")


def scope_mask(scope, obs: np.ndarray, unobs: np.ndarray) -> np.ndarray:
    """Boolean ``(..., n)`` membership of each patient in ``scope``."""
    if isinstance(scope, Overall):
        return np.ones(obs.shape[:-1], dtype=bool)
    if isinstance(scope, ObsMargin):
        return obs[..., scope.k - 1] == scope.level
    if isinstance(scope, ObsStratum):
        return (obs == np.asarray(scope.s)).all(axis=-1)
    if isinstance(scope, UnobsMargin):
        return unobs[..., scope.j - 1] == scope.level
    if isinstance(scope, UnobsStratum):
        return (unobs == np.asarray(scope.r)).all(axis=-1)
    if isinstance(scope, JointStratumMargin):
        return (obs == np.asarray(scope.s)).all(axis=-1) & (unobs[..., scope.j - 1] == scope.level)
    if isinstance(scope, JointStratumStratum):
        return (obs == np.asarray(scope.s)).all(axis=-1) & (unobs == np.asarray(scope.r)).all(axis=-1)
    raise TypeError(f"unknown scope {scope!r}")


def normalized_imbalances(arms: np.ndarray, obs, unobs, ratios, metrics: Sequence[Metric]) -> np.ndarray:
    """n^{-1/2} D for each metric; ``arms`` are 0-based, shape ``(R, n)``."""
    ratios = tuple(Fraction(r) for r in ratios)
    Q = math.lcm(*(r.denominator for r in ratios))
    n = arms.shape[-1]
    root = math.sqrt(n)
    out = np.empty(arms.shape[:-1] + (len(metrics),))
    for c, metric in enumerate(metrics):
        mask = scope_mask(metric.scope, obs, unobs)
        total = mask.sum(axis=-1)
        hits = (mask & (arms == metric.arm - 1)).sum(axis=-1)
        rg = int(ratios[metric.arm - 1] * Q)
        out[..., c] = (Q * hits - rg * total).astype(float) / Q / root
    return out


# -- reference path ---------------------------------------------------------


def run_replicate_detail(view: ScenarioView, spec: ProcedureSpec, n: int, master_seed: int, index: int):
    """(obs, unobs, arms 1-based, auditor ledger) for one trial."""
    cov_rng, alloc_rng = replicate_streams(master_seed, index)
    obs, unobs = view.sample(cov_rng, n)
    schema = view.schema
    state = spec.build(schema)
    auditor = AllocationLedger(schema, spec.ratios, auditor=True)
    arms = np.empty(n, dtype=np.int64)
    for i in range(n):
        profile = PatientProfile(tuple(int(v) for v in obs[i]), tuple(int(v) for v in unobs[i]))
        arm = state.assign(profile.blinded(), alloc_rng)
        auditor.record(profile, arm)
        arms[i] = arm
    return obs, unobs, arms, auditor


def run_replicate(view: ScenarioView, spec: ProcedureSpec, n: int, metrics: Sequence[Metric],
                  master_seed: int, index: int) -> np.ndarray:
    _, _, _, auditor = run_replicate_detail(view, spec, n, master_seed, index)
    root = math.sqrt(n)
    return np.array([float(auditor.imbalance(m.scope, m.arm)) / root for m in metrics])


# -- vectorised path --------------------------------------------------------


def draw_batch(view: ScenarioView, n: int, master_seed: int, indices: Sequence[int]):
    p, q = view.schema.p, view.schema.q
    R = len(indices)
    obs = np.empty((R, n, p), dtype=np.int64)
    unobs = np.empty((R, n, q), dtype=np.int64)
    u = np.empty((R, n))
    for row, idx in enumerate(indices):
        cov_rng, alloc_rng = replicate_streams(master_seed, idx)
        obs[row], unobs[row] = view.sample(cov_rng, n)
        u[row] = alloc_rng.random(n)
    return obs, unobs, u


def _stratum_ids(obs: np.ndarray, levels: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray, int]:
    """Global stratum ids and per-replicate compact ids with their table size."""
    gid = np.ravel_multi_index(tuple(np.moveaxis(obs - 1, -1, 0)), levels)
    L = math.prod(levels)
    n = obs.shape[1]
    if L <= max(n, 64):
        return gid, gid, L
    local = np.empty_like(gid)
    for row in range(gid.shape[0]):
        _, local[row] = np.unique(gid[row], return_inverse=True)
    return gid, local, n


def allocate_batch(spec: ProcedureSpec, schema: CovariateSchema, obs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """0-based arms ``(R, n)`` for a batch of trials."""
    R, n = u.shape
    m = spec.m
    if spec.kind == "cr":
        cum = np.cumsum([float(r) for r in spec.ratios])
        return choose_arm(cum, u)

    rows = np.arange(R)
    arms = np.empty((R, n), dtype=np.int64)
    Q = period(spec.ratios)
    Rv = np.array([int(r * Q) for r in spec.ratios], dtype=np.int64)

    if spec.kind == "str_pb":
        gid, sid, Lc = _stratum_ids(obs, schema.observed_levels)
        blocks = np.array(
            [[int(spec.block_size(s) * r) for r in spec.ratios] for s in schema.observed_strata()],
            dtype=np.int64,
        ) if spec.block_overrides else None
        default = np.array([int(spec.block_size(()) * r) for r in spec.ratios], dtype=np.int64)
        rem = np.zeros((R, Lc, m), dtype=np.int64)
        for i in range(n):
            s = sid[:, i]
            cur = rem[rows, s]
            tot = cur.sum(axis=1)
            empty = tot == 0
            if empty.any():
                cur[empty] = default if blocks is None else blocks[gid[empty, i]]
                tot = cur.sum(axis=1)
            j = np.minimum(np.floor(u[:, i] * tot), tot - 1)
            arm = choose_arm(np.cumsum(cur, axis=1), j)
            cur[rows, arm] -= 1
            rem[rows, s] = cur
            arms[:, i] = arm
        return arms

    # CAR: rank arms by sum_A w_A (Q D_t(A) - R_t), an exact integer that
    # orders Imb^(t) identically (Imb^(t) is affine in it with positive slope).
    wo, wm, ws = spec.weights.integer_scaled()
    wm = np.array(wm, dtype=np.int64)
    cum0 = spec.biased.cum0
    rho_cum = np.cumsum([float(r) for r in spec.ratios])
    offsets = np.concatenate([[0], np.cumsum(schema.observed_levels)[:-1]])
    midx = obs - 1 + offsets  # (R, n, p)
    over = np.zeros((R, m), dtype=np.int64)
    marg = np.zeros((R, int(sum(schema.observed_levels)), m), dtype=np.int64)
    active = wm > 0
    if ws > 0:
        _, sid, Lc = _stratum_ids(obs, schema.observed_levels)
        strat = np.zeros((R, Lc, m), dtype=np.int64)
    for i in range(n):
        if i == 0:
            arm = choose_arm(rho_cum, u[:, 0])
        else:
            key = wo * (Q * over - Rv * i - Rv)
            if active.any():
                mi = midx[:, i, active]
                g = marg[rows[:, None], mi]  # (R, p', m)
                tot = g.sum(axis=2, keepdims=True)
                key = key + (wm[active][None, :, None] * (Q * g - Rv * tot - Rv)).sum(axis=1)
            if ws > 0:
                g = strat[rows, sid[:, i]]
                tot = g.sum(axis=1, keepdims=True)
                key = key + ws * (Q * g - Rv * tot - Rv)
            probs = tie_averaged_probs(key, cum0)
            arm = choose_arm(np.cumsum(probs, axis=1), u[:, i])
        over[rows, arm] += 1
        mi = midx[:, i, :]
        marg[rows[:, None], mi, arm[:, None]] += 1
        if ws > 0:
            strat[rows, sid[:, i], arm] += 1
        arms[:, i] = arm
    return arms


def run_batch(view: ScenarioView, spec: ProcedureSpec, n: int, metrics: Sequence[Metric],
              master_seed: int, indices: Sequence[int]) -> np.ndarray:
    """``(len(indices), len(metrics))`` normalised imbalances."""
    obs, unobs, u = draw_batch(view, n, master_seed, indices)
    arms = allocate_batch(spec, view.schema, obs, u)
    return normalized_imbalances(arms, obs, unobs, spec.ratios, metrics)
