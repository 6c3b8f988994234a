r"""Dual-branch action guidance.

For discrete actions the branches are mixed in log-probability space,

.. math:: \log p(a) = (1 - \omega) \log p_u(a) + \omega \log p_c(a) + C,

i.e. the geometric mixture :math:`p_u^{1-\omega} p_c^{\omega} / Z`, which is
the same as reweighting the vision-only prior by the language likelihood
raised to :math:`\omega`. Continuous action vectors are mixed linearly,
:math:`a_u + \omega (a_c - a_u)`.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np

from .policy import LikelihoodTable, PolicyParams, log_softmax, normalize_exp


class MixingSpace(str, Enum):
    LogitSpace = "LogitSpace"
    ActionVectorSpace = "ActionVectorSpace"


class Wiring(str, Enum):
    Baseline = "Baseline"
    TF = "TF"
    VA = "VA"
    DropoutShared = "DropoutShared"


class ConfigInconsistency(ValueError):
    pass


class ZeroProbabilityInstruction(ValueError):
    pass


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 1.5
    space: MixingSpace = MixingSpace.LogitSpace
    wiring: Wiring = Wiring.Baseline
    cond_params: Optional[PolicyParams] = None
    uncond_params: Optional[PolicyParams] = None

    def __post_init__(self):
        object.__setattr__(self, "space", MixingSpace(self.space))
        object.__setattr__(self, "wiring", Wiring(self.wiring))
        if self.wiring in (Wiring.TF, Wiring.DropoutShared) and self.uncond_params is None:
            object.__setattr__(self, "uncond_params", self.cond_params)

    def validate(self) -> "GuidanceConfig":
        if not self.omega >= 0:
            raise ConfigInconsistency(f"omega must be >= 0, got {self.omega}")
        if self.cond_params is None:
            raise ConfigInconsistency("cond_params missing")
        if self.wiring in (Wiring.TF, Wiring.DropoutShared) and self.uncond_params is not self.cond_params:
            raise ConfigInconsistency(f"{self.wiring.value} wiring uses one policy for both branches")
        if self.wiring is Wiring.VA:
            if self.uncond_params is None:
                raise ConfigInconsistency("VA wiring needs unconditional params")
            if self.uncond_params.conditioned:
                raise ConfigInconsistency("VA wiring needs an unconditioned (conditioned=False) policy")
        return self

    @property
    def dual(self) -> bool:
        return self.wiring is not Wiring.Baseline

    def provenance(self) -> dict:
        return {"wiring": self.wiring.value, "omega": self.omega, "space": self.space.value}


@dataclass
class MixedDistribution:
    probs: np.ndarray
    logp: np.ndarray  # unnormalized mixed log-space vector used for argmax
    omega: float
    space: MixingSpace
    logits_cond: Optional[np.ndarray] = None
    logits_uncond: Optional[np.ndarray] = None


def mix_log_probs(logp_cond: np.ndarray, logp_uncond: np.ndarray, omega: float) -> np.ndarray:
    # affine form keeps both endpoints exact: 0 * x == 0 for finite x
    return (1.0 - omega) * logp_uncond + omega * logp_cond


def cag_mix_logits(logits_cond, logits_uncond, omega: float) -> MixedDistribution:
    """Geometric mixture of the two branch distributions (works row-wise on batches)."""
    lc = np.asarray(logits_cond, dtype=np.float64)
    lu = np.asarray(logits_uncond, dtype=np.float64)
    if lc.shape != lu.shape:
        raise ValueError(f"branch shapes differ: {lc.shape} vs {lu.shape}")
    mixed = mix_log_probs(log_softmax(lc), log_softmax(lu), omega)
    return MixedDistribution(normalize_exp(mixed), mixed, omega, MixingSpace.LogitSpace, lc, lu)


def single_branch(logits) -> MixedDistribution:
    """Distribution of one policy, routed through the same path as the mixture."""
    lc = np.asarray(logits, dtype=np.float64)
    lp = log_softmax(lc)
    return MixedDistribution(normalize_exp(lp), lp, 1.0, MixingSpace.LogitSpace, lc, None)


def cag_mix_action_vectors(a_cond, a_uncond, omega: float) -> np.ndarray:
    """Linear extrapolation ``a_u + omega * (a_c - a_u)``; no renormalization."""
    a_c = np.asarray(a_cond, dtype=np.float64)
    a_u = np.asarray(a_uncond, dtype=np.float64)
    if a_c.shape != a_u.shape:
        raise ValueError(f"action vectors differ in shape: {a_c.shape} vs {a_u.shape}")
    return a_u + omega * (a_c - a_u)


def mix_probability_vectors(logits_cond, logits_uncond, omega: float) -> MixedDistribution:
    """Linear mixing of the branch probability vectors, clipped and renormalized.

    Used when a discrete policy is driven in ``ActionVectorSpace``; for
    ``omega > 1`` the raw mixture can go negative, hence the clip.
    """
    lc = np.asarray(logits_cond, dtype=np.float64)
    lu = np.asarray(logits_uncond, dtype=np.float64)
    raw = cag_mix_action_vectors(normalize_exp(log_softmax(lc)), normalize_exp(log_softmax(lu)), omega)
    clipped = np.clip(raw, 0.0, None)
    total = clipped.sum(axis=-1, keepdims=True)
    probs = np.where(total > 0, clipped / np.where(total > 0, total, 1.0), 1.0 / raw.shape[-1])
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    return MixedDistribution(probs, logp, omega, MixingSpace.ActionVectorSpace, lc, lu)


def mix(logits_cond, logits_uncond, omega: float, space: MixingSpace = MixingSpace.LogitSpace) -> MixedDistribution:
    if MixingSpace(space) is MixingSpace.LogitSpace:
        return cag_mix_logits(logits_cond, logits_uncond, omega)
    return mix_probability_vectors(logits_cond, logits_uncond, omega)


def bayesian_oracle(table: LikelihoodTable, instruction: int, omega: float) -> np.ndarray:
    """``P(a|o) * P(l|a,o)**omega``, normalized, by direct marginalization of the table."""
    if table.instruction_marginal()[instruction] <= 0:
        raise ZeroProbabilityInstruction(f"instruction {instruction} has zero probability")
    w = table.prior() * table.likelihood(instruction) ** omega
    return w / w.sum()


class Sample:
    """Selection mode that draws from the mixed distribution."""

    def __init__(self, seed: Union[int, np.random.Generator]):
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def draw(self, probs: np.ndarray) -> int:
        c = np.cumsum(probs)
        return int(min(np.searchsorted(c, self.rng.random() * c[-1], side="right"), len(probs) - 1))


ARGMAX = "argmax"


def select_action(dist: MixedDistribution, mode: Union[str, Sample] = ARGMAX) -> int:
    """Argmax (lowest index wins ties) or a draw from ``Sample``."""
    if isinstance(mode, Sample):
        return mode.draw(dist.probs)
    if mode != ARGMAX:
        raise ValueError(f"unknown selection mode {mode!r}")
    return int(np.argmax(dist.logp))
