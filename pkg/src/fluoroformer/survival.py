"""Discrete-time survival: bins, hazards, survival curves, likelihood, risk."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

LOG_FLOOR = 1e-12


class ConfigurationError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class BinSpec:
    cutoffs: tuple[float, ...]

    def __post_init__(self):
        c = np.asarray(self.cutoffs, dtype=np.float64)
        if len(c) < 1:
            raise ConfigurationError("need at least one cutoff (two bins)")
        if not np.isfinite(c).all():
            raise ConfigurationError("bin cutoffs must be finite")
        if np.any(np.diff(c) <= 0):
            raise ConfigurationError(f"bin cutoffs must be strictly ascending, got {list(c)}")

    @property
    def n_bins(self) -> int:
        return len(self.cutoffs) + 1

    def assign(self, time: float) -> int:
        """Bin index = number of cutoffs strictly below ``time``."""
        return int(np.sum(np.asarray(self.cutoffs) < time))


@dataclass(frozen=True)
class SurvivalTarget:
    time: float
    censored: int  # 1 = censored, 0 = event observed
    bin: int

    def __post_init__(self):
        if self.time < 0:
            raise ValueError(f"negative survival time {self.time}")
        if self.censored not in (0, 1):
            raise ValueError(f"censor flag must be 0 or 1, got {self.censored}")
        if self.bin < 0:
            raise ValueError(f"negative bin index {self.bin}")


@dataclass
class SurvivalOutput:
    hazards: Tensor
    survival: Tensor
    risk: float
    loss: Tensor | None = None


def make_bins(times: Sequence[float], censored: Sequence[int], n_bins: int = 4) -> BinSpec:
    """Quantile cutoffs of the uncensored event times.

    With the default four bins these are the 25th/50th/75th percentiles
    (linear interpolation).  Call this on training data only.
    """
    if n_bins < 2:
        raise ConfigurationError("n_bins must be >= 2")
    times = np.asarray(times, dtype=np.float64)
    censored = np.asarray(censored)
    events = times[censored == 0]
    if len(np.unique(events)) < n_bins:
        raise ConfigurationError(f"need at least {n_bins} distinct event times, got {len(np.unique(events))}")
    qs = 100.0 * np.arange(1, n_bins) / n_bins
    return BinSpec(tuple(float(v) for v in np.percentile(events, qs, method="linear")))


def make_target(time: float, censored: int, bins: BinSpec) -> SurvivalTarget:
    return SurvivalTarget(float(time), int(censored), bins.assign(time))


def hazards_from_logits(logits: Tensor) -> Tensor:
    return nx.sigm(logits)


def survival_curve(hazards: Tensor) -> Tensor:
    """``S_j = prod_{s<=j} (1 - h_s)``."""
    h = hazards.data
    if np.any(h < 0) or np.any(h > 1):
        raise DomainError("hazards must lie in [0, 1]")
    return nx.cumprod(nx.sub(1.0, hazards))


def nll_loss(hazards: Tensor, target: SurvivalTarget, survival: Tensor | None = None) -> Tensor:
    """Negative log-likelihood of one discrete-time observation.

    Censored samples contribute ``-log S(t)``; events contribute
    ``-log S(t-1) - log h(t)`` with ``S(-1) = 1``.  Log arguments are
    clamped at ``LOG_FLOOR``.
    """
    n = hazards.shape[-1]
    t = target.bin
    if not 0 <= t < n:
        raise ValueError(f"target bin {t} outside [0, {n})")
    S = survival_curve(hazards) if survival is None else survival
    if target.censored:
        return nx.scale(nx.log(S[t], LOG_FLOOR), -1.0)
    loss = nx.scale(nx.log(hazards[t], LOG_FLOOR), -1.0)
    if t > 0:
        loss = nx.sub(loss, nx.log(S[t - 1], LOG_FLOOR))
    return loss


def risk_score(survival) -> float:
    """Sum of the survival curve; larger means longer predicted survival."""
    data = survival.data if isinstance(survival, Tensor) else np.asarray(survival)
    return float(np.sum(data, axis=-1))


def survival_output(logits: Tensor, target: SurvivalTarget | None = None) -> SurvivalOutput:
    hazards = hazards_from_logits(logits)
    S = survival_curve(hazards)
    loss = nll_loss(hazards, target, S) if target is not None else None
    return SurvivalOutput(hazards, S, risk_score(S), loss)
