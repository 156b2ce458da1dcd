"""Difficulty-driven configuration mining.

A per-cell score table tracks how hard each physical configuration has been
to attack; scores update with a momentum rule and drive softmax sampling so
historically difficult cells are revisited more often. Sampling by the
softmax of instantaneous losses is exactly stochastic gradient descent on
the log-sum-exp (smooth max) of the per-cell losses, which is why the
procedure suppresses worst-case loss peaks; the bound helpers below check
the max <= LSE <= max + tau*log(M) sandwich that justifies it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .rng import RngState

DEFAULT_INIT_SCORE = 10.0
DEFAULT_MU = 0.5
DEFAULT_TAU = 1.0


@dataclass
class GlobalDifficultyTable:
    scores: np.ndarray
    mu: float
    tau: float
    init_value: float

    @property
    def q(self) -> int:
        return len(self.scores)


def init_table(
    q: int,
    init_value: float = DEFAULT_INIT_SCORE,
    mu: float = DEFAULT_MU,
    tau: float = DEFAULT_TAU,
) -> GlobalDifficultyTable:
    """Fresh table; the high initial score drives early exploration because
    unsampled cells keep it until they are drawn."""
    if q < 1:
        raise ValidationError("difficulty table needs q >= 1 cells")
    if not 0.0 <= mu < 1.0:
        raise ValidationError(f"momentum mu={mu} outside [0, 1)")
    if not tau > 0.0:
        raise ValidationError(f"temperature tau={tau} must be > 0")
    if not np.isfinite(init_value):
        raise ValidationError("init_value must be finite")
    return GlobalDifficultyTable(
        scores=np.full(q, float(init_value)), mu=float(mu), tau=float(tau),
        init_value=float(init_value),
    )


def update_score(table: GlobalDifficultyTable, i: int, loss_curr: float) -> None:
    """Momentum update s_i <- mu*s_i + (1-mu)*loss; only entry i changes."""
    if not 0 <= i < table.q:
        raise ValidationError(f"cell index {i} outside [0, {table.q})")
    if not np.isfinite(loss_curr):
        raise ValidationError("update_score: non-finite loss")
    table.scores[i] = table.mu * table.scores[i] + (1.0 - table.mu) * loss_curr


def softmax(values: np.ndarray, tau: float) -> np.ndarray:
    """Overflow-safe softmax of values/tau."""
    v = np.asarray(values, dtype=np.float64) / tau
    v = v - v.max()
    e = np.exp(v)
    return e / e.sum()


def sampling_probs(table: GlobalDifficultyTable) -> np.ndarray:
    """P(i) proportional to exp(s_i / tau); sums to 1."""
    return softmax(table.scores, table.tau)


def sample_index(probs: np.ndarray, rng: RngState) -> tuple[int, RngState]:
    """Inverse-CDF draw over an explicit probability vector."""
    u, rng = rng.uniform()
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(idx, len(probs) - 1), rng


def sample_config(table: GlobalDifficultyTable, rng: RngState) -> tuple[int, RngState]:
    """Difficulty-aware draw of one cell index; pure in (table, rng)."""
    return sample_index(sampling_probs(table), rng)


def lse_objective(losses, tau: float) -> float:
    """Smooth upper bound of the maximum: tau * log sum exp(L_i / tau)."""
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("lse_objective: empty loss vector")
    if not tau > 0.0:
        raise ValidationError("lse_objective: tau must be > 0")
    m = arr.max()
    return float(m + tau * np.log(np.sum(np.exp((arr - m) / tau))))


def lse_gradient_weights(losses, tau: float) -> np.ndarray:
    """Softmax weights of the LSE gradient.

    These are exactly the sampling probabilities of a table whose scores
    equal the instantaneous losses, which is the equivalence that makes
    difficulty-aware sampling an unbiased SGD on the LSE objective.
    """
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("lse_gradient_weights: empty loss vector")
    return softmax(arr, tau)


def check_bounds(losses, tau: float) -> tuple[float, float, float]:
    """(max, lse, max + tau*log M); asserts the sandwich max <= lse <= upper."""
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("check_bounds: empty loss vector")
    mx = float(arr.max())
    lse = lse_objective(arr, tau)
    upper = mx + tau * np.log(arr.size)
    if not (mx <= lse + 1e-12 and lse <= upper + 1e-12):
        raise ValidationError("log-sum-exp sandwich bound violated")
    return mx, lse, upper
