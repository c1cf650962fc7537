"""Closed-form variances and entropy diagnostics for a joint covariate pmf.

Entropies are in nats with 0 log 0 = 0. Observed strata with zero mass are
left out of every conditional sum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .core import (
    CovariateSchema,
    JointStratumMargin,
    JointStratumStratum,
    ObsMargin,
    ObsStratum,
    Overall,
    RatioLike,
    UnobsMargin,
    UnobsStratum,
    to_fraction,
)


class UndefinedConditional(ValueError):
    """A conditional probability given a zero-mass stratum was requested."""


class InfeasibleBounds(ValueError):
    pass


class JointPmf:
    """Probabilities over (observed stratum, unobserved stratum) cells.

    ``table`` has shape ``observed_levels + unobserved_levels``; index
    ``level - 1`` along each axis.
    """

    def __init__(self, schema: CovariateSchema, table, atol: float = 1e-12):
        table = np.asarray(table, dtype=float)
        shape = schema.observed_levels + schema.unobserved_levels
        if table.shape != shape:
            raise ValueError(f"table shape {table.shape} does not match schema {shape}")
        if (table < 0).any():
            raise ValueError("negative probability in joint table")
        if abs(table.sum() - 1.0) > atol:
            raise ValueError(f"joint table sums to {table.sum()!r}, not 1")
        self.schema = schema
        self.table = table
        self.matrix = table.reshape(schema.n_obs_strata, schema.n_unobs_strata)

    # -- marginals and conditionals ---------------------------------------

    @property
    def p_s(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    @property
    def p_r(self) -> np.ndarray:
        return self.matrix.sum(axis=0)

    def s_index(self, s: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(v - 1 for v in s), self.schema.observed_levels))

    def r_index(self, r: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(v - 1 for v in r), self.schema.unobserved_levels))

    def joint_with(self, targets: Sequence[int] | None) -> np.ndarray:
        """``(L_obs, |support|)`` joint of the observed stratum and selected U's."""
        q = self.schema.q
        targets = list(range(1, q + 1)) if targets is None else list(targets)
        p = self.schema.p
        drop = tuple(p + j - 1 for j in range(1, q + 1) if j not in targets)
        sub = self.table.sum(axis=drop) if drop else self.table
        keep = [p + j - 1 for j in targets]
        sub = np.moveaxis(sub, [sorted(keep).index(a) + p for a in keep], range(p, p + len(keep)))
        return sub.reshape(self.schema.n_obs_strata, -1)

    def conditional(self, targets: Sequence[int] | None) -> tuple[np.ndarray, np.ndarray]:
        """(p_s, p(target | s)) restricted to strata with positive mass."""
        joint = self.joint_with(targets)
        ps = joint.sum(axis=1)
        keep = ps > 0
        return ps[keep], joint[keep] / ps[keep, None]

    def event_probability(self, scope) -> float:
        m = self.matrix
        if isinstance(scope, Overall):
            return 1.0
        if isinstance(scope, ObsStratum):
            return float(m[self.s_index(scope.s)].sum())
        if isinstance(scope, ObsMargin):
            axes = tuple(a for a in range(self.table.ndim) if a != scope.k - 1)
            return float(self.table.sum(axis=axes)[scope.level - 1])
        if isinstance(scope, UnobsMargin):
            return float(self.joint_with([scope.j]).sum(axis=0)[scope.level - 1])
        if isinstance(scope, UnobsStratum):
            return float(m[:, self.r_index(scope.r)].sum())
        if isinstance(scope, JointStratumMargin):
            return float(self.joint_with([scope.j])[self.s_index(scope.s), scope.level - 1])
        if isinstance(scope, JointStratumStratum):
            return float(m[self.s_index(scope.s), self.r_index(scope.r)])
        raise TypeError(f"unknown scope {scope!r}")


def _rho(rho_g: RatioLike) -> float:
    return float(to_fraction(rho_g))


def _scope_column(pmf: JointPmf, scope) -> tuple[np.ndarray, np.ndarray]:
    """(p_s, p(event | s)) over all strata for an unobserved scope's event."""
    if isinstance(scope, (UnobsMargin, JointStratumMargin)):
        joint = pmf.joint_with([scope.j])[:, scope.level - 1]
    elif isinstance(scope, (UnobsStratum, JointStratumStratum)):
        joint = pmf.matrix[:, pmf.r_index(scope.r)]
    else:
        raise TypeError(f"{type(scope).__name__} is not an unobserved scope")
    ps = pmf.p_s
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(ps > 0, joint / np.where(ps > 0, ps, 1.0), np.nan)
    return ps, cond


def _single_stratum(pmf: JointPmf, scope) -> int | None:
    if isinstance(scope, (JointStratumMargin, JointStratumStratum)):
        return pmf.s_index(scope.s)
    return None


def tau_sq(pmf: JointPmf, rho_g: RatioLike, scope) -> float:
    """Asymptotic variance floor of the normalised unobserved imbalance."""
    rho = _rho(rho_g)
    ps, cond = _scope_column(pmf, scope)
    idx = _single_stratum(pmf, scope)
    if idx is not None:
        if ps[idx] <= 0:
            raise UndefinedConditional(f"stratum {scope.s} has zero probability")
        c = cond[idx]
        return rho * (1 - rho) * ps[idx] * c * (1 - c)
    keep = ps > 0
    terms = rho * (1 - rho) * ps[keep] * cond[keep] * (1 - cond[keep])
    return float(math.fsum(terms))


def tau_cr_sq(pmf: JointPmf, rho_g: RatioLike, scope) -> float:
    """Complete-randomisation variance of n^{-1/2} D for any scope."""
    rho = _rho(rho_g)
    return rho * (1 - rho) * pmf.event_probability(scope)


def lambda1_sq(rho_g: RatioLike, block_size: int) -> float:
    rho = _rho(rho_g)
    return rho * (1 - rho) * (block_size + 1) / 6


def lambda2_sq(rho_g: RatioLike, n: int, p_s: float, block_size: int) -> float:
    rho = _rho(rho_g)
    return rho * (1 - rho) * n * p_s * (1 - p_s * (n - 1) / block_size)


@dataclass(frozen=True)
class StrPbVariance:
    value: float
    regime: str
    observed_regime: str
    mismatch: bool


def classify_regime(n: int, p_s: np.ndarray, block_sizes: np.ndarray) -> str:
    """'large' if n p_s >= B_s for every stratum, 'small' if n p_s <= B_s for every one."""
    keep = p_s > 0
    load = n * p_s[keep]
    b = block_sizes[keep]
    if (load >= b).all():
        return "large"
    if (load <= b).all():
        return "small"
    return "mixed"


def _block_array(pmf: JointPmf, block_sizes) -> np.ndarray:
    L = pmf.schema.n_obs_strata
    if isinstance(block_sizes, Mapping):
        out = np.empty(L)
        for s in pmf.schema.observed_strata():
            out[pmf.s_index(s)] = block_sizes[tuple(s)]
        return out
    arr = np.asarray(block_sizes, dtype=float)
    return np.full(L, float(arr)) if arr.ndim == 0 else arr.reshape(L)


def strpb_variance(
    pmf: JointPmf,
    rho_g: RatioLike,
    scope,
    regime: str,
    n: int,
    block_sizes: Union[int, Sequence[int], Mapping],
) -> StrPbVariance:
    """Var[D_{n,g}(scope)] under stratified permuted blocks.

    ``regime`` is ``"large"`` (n p_s large relative to B_s) or ``"small"``.
    The returned ``mismatch`` flag is set when the strata loads contradict the
    requested regime; the value is still computed.
    """
    regime = {"largen": "large", "smalln": "small"}.get(regime.lower(), regime.lower())
    if regime not in ("large", "small"):
        raise ValueError(f"unknown regime {regime!r}")
    ps = pmf.p_s
    blocks = _block_array(pmf, block_sizes)
    if regime == "large":
        lam = np.array([lambda1_sq(rho_g, b) for b in blocks])
    else:
        lam = np.array([lambda2_sq(rho_g, n, p, b) for p, b in zip(ps, blocks)])
    observed = classify_regime(n, ps, blocks)
    mismatch = observed != regime

    if isinstance(scope, ObsStratum):
        value = float(lam[pmf.s_index(scope.s)])
    else:
        _, cond = _scope_column(pmf, scope)
        idx = _single_stratum(pmf, scope)
        if idx is not None:
            if ps[idx] <= 0:
                raise UndefinedConditional(f"stratum {scope.s} has zero probability")
            value = cond[idx] ** 2 * lam[idx] + n * tau_sq(pmf, rho_g, scope)
        else:
            keep = ps > 0
            value = float(math.fsum(cond[keep] ** 2 * lam[keep])) + n * tau_sq(pmf, rho_g, scope)
    return StrPbVariance(float(value), regime, observed, mismatch)


# -- entropy ----------------------------------------------------------------


def entropy(pmf) -> float:
    p = np.asarray(pmf, dtype=float).ravel()
    p = p[p > 0]
    return float(-math.fsum(p * np.log(p)))


def conditional_entropy_table(joint2d) -> float:
    """H(Y | X) for a 2-D table P[x, y]."""
    P = np.asarray(joint2d, dtype=float)
    px = P.sum(axis=1)
    terms = []
    for row, mass in zip(P, px):
        if mass <= 0:
            continue
        c = row[row > 0] / mass
        terms.append(-mass * math.fsum(c * np.log(c)))
    return float(math.fsum(terms))


def _targets(target) -> list[int] | None:
    if target is None or target == "all":
        return None
    if isinstance(target, int):
        return [target]
    return list(target)


def conditional_entropy(joint: JointPmf, target=None) -> float:
    """H(U_j | X) for ``target=j`` (1-based), or H(U | X) for ``target=None``."""
    return conditional_entropy_table(joint.joint_with(_targets(target)))


def observed_entropy(joint: JointPmf) -> float:
    return entropy(joint.p_s)


def unobserved_entropy(joint: JointPmf, target=None) -> float:
    return entropy(joint.joint_with(_targets(target)).sum(axis=0))


def mutual_information(joint: JointPmf, target=None) -> float:
    """I(U; X) = H(U) - H(U | X), clipped at 0 against rounding."""
    return max(0.0, unobserved_entropy(joint, target) - conditional_entropy(joint, target))


def weighted_cond_entropy(joint: JointPmf, rho_g: RatioLike, target=None) -> float:
    rho = _rho(rho_g)
    return rho * (1 - rho) * conditional_entropy(joint, target)


def sum_of_variances_unweighted(joint: JointPmf, target=None) -> float:
    """sum over target cells r and strata s of p_s p(r|s)(1 - p(r|s))."""
    ps, cond = joint.conditional(_targets(target))
    return float(math.fsum((ps[:, None] * cond * (1 - cond)).ravel()))


def sum_of_variances(joint: JointPmf, rho_g: RatioLike, target=None) -> float:
    rho = _rho(rho_g)
    return rho * (1 - rho) * sum_of_variances_unweighted(joint, target)


def entropy_sandwich(H_U: float, H_X: float, H_W: float) -> tuple[float, float]:
    """Bounds max(0, H(U) - H(X)) <= H(U | X) <= H(W) - H(X)."""
    if H_U < 0 or H_X < 0:
        raise ValueError("entropies must be non-negative")
    if H_X > H_W:
        raise InfeasibleBounds(f"H(X)={H_X} exceeds H(W)={H_W}")
    lower = max(0.0, H_U - H_X)
    upper = H_W - H_X
    if lower > upper:
        raise InfeasibleBounds(
            f"lower bound {lower} exceeds upper bound {upper}: H(U)={H_U} > H(W)={H_W}"
        )
    return lower, upper
