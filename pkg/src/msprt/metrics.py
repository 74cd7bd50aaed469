"""Streaming per-arm statistics and contrast estimators for m-arm tests.

Every metric reduces the experiment to the (m-1)-vector of contrasts of
each arm against arm 1 plus a plug-in estimate of its sampling
covariance.  For the parametric metrics the covariance has the shared
structure ``cov[i][j] = v_1`` off the diagonal and ``v_1 + v_{j+1}`` on
it, where ``v_j`` is the per-arm variance term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

#: Aggregate families an :class:`ArmStats` can maintain.
BINARY = "binary"
NUMERIC = "numeric"
VALUES = "values"

_KINDS = (BINARY, NUMERIC, VALUES)

_EMPTY = np.empty(0, dtype=float)


class InsufficientDataError(Exception):
    """The stream does not yet carry enough information for an estimate.

    This is a deferral signal, not a failure: the engine skips the
    evaluation and keeps ingesting.  Early-stream degeneracy (no
    successes yet, zero variance) is routine.
    """


class ArmStats:
    """Streaming sufficient statistics for an m-arm experiment.

    ``kind`` selects the aggregates: ``binary`` keeps success counts,
    ``numeric`` keeps sums and sums of squares, ``values`` additionally
    retains the full per-arm value multiset (needed by the rank-based
    metric).  Arms are numbered 1..m with arm 1 the baseline.
    """

    __slots__ = ("kind", "m", "n", "counts", "successes", "sums", "sumsqs",
                 "_values", "_sorted", "_n_sorted")

    def __init__(self, m: int, kind: str):
        if m < 2:
            raise ValueError(f"need at least 2 arms, got {m}")
        if kind not in _KINDS:
            raise ValueError(f"unknown aggregate kind {kind!r}; expected one of {_KINDS}")
        self.kind = kind
        self.m = m
        self.n = 0
        self.counts = [0] * m
        self.successes = [0] * m
        self.sums = [0.0] * m
        self.sumsqs = [0.0] * m
        if kind == VALUES:
            self._values = [[] for _ in range(m)]
            self._sorted = [_EMPTY] * m
            self._n_sorted = [0] * m
        else:
            self._values = None
            self._sorted = None
            self._n_sorted = None

    def update(self, arm: int, value: float) -> None:
        """Record one observation of ``value`` on ``arm`` (1-based).

        O(1); the ordered view of a ``values`` multiset is materialized
        lazily at evaluation time.
        """
        if not 1 <= arm <= self.m:
            raise ValueError(f"arm index {arm} out of range 1..{self.m}")
        i = arm - 1
        kind = self.kind
        if kind == BINARY:
            if value != 0 and value != 1:
                raise ValueError(
                    f"binary metric requires values in {{0, 1}}, got {value!r}"
                )
            if value:
                self.successes[i] += 1
        else:
            value = float(value)
            if not math.isfinite(value):
                raise ValueError(f"non-finite value {value!r} for arm {arm}")
            self.sums[i] += value
            self.sumsqs[i] += value * value
            if kind == VALUES:
                self._values[i].append(value)
        self.counts[i] += 1
        self.n += 1

    def would_accept(self, arm: int, value) -> bool:
        """Whether :meth:`update` would accept this event, without mutating."""
        if not 1 <= arm <= self.m:
            return False
        if self.kind == BINARY:
            return value == 0 or value == 1
        try:
            return math.isfinite(float(value))
        except (TypeError, ValueError):
            return False

    def sorted_values(self, arm: int) -> np.ndarray:
        """Sorted value multiset of ``arm`` as a float array.

        The sorted view is cached and extended by merging only the new
        tail, so repeated calls between batches cost O(n) rather than
        O(n log n).
        """
        if self.kind != VALUES:
            raise ValueError(f"{self.kind!r} statistics do not retain raw values")
        i = arm - 1
        vals = self._values[i]
        if self._n_sorted[i] != len(vals):
            tail = np.sort(np.asarray(vals[self._n_sorted[i]:], dtype=float))
            if self._n_sorted[i]:
                # stable sort exploits the presorted leading run
                merged = np.sort(
                    np.concatenate([self._sorted[i], tail]), kind="stable"
                )
            else:
                merged = tail
            self._sorted[i] = merged
            self._n_sorted[i] = len(vals)
        return self._sorted[i]

    @classmethod
    def from_binary_counts(cls, counts, successes) -> "ArmStats":
        """Build binary statistics directly from per-arm totals."""
        counts = [int(c) for c in counts]
        successes = [int(s) for s in successes]
        if len(counts) != len(successes):
            raise ValueError("counts and successes must have equal length")
        stats = cls(len(counts), BINARY)
        for i, (c, s) in enumerate(zip(counts, successes)):
            if c < 0 or not 0 <= s <= c:
                raise ValueError(f"arm {i + 1}: invalid totals n={c}, successes={s}")
            stats.counts[i] = c
            stats.successes[i] = s
        stats.n = sum(counts)
        return stats

    @classmethod
    def from_samples(cls, samples, kind: str) -> "ArmStats":
        """Build statistics from complete per-arm samples in one pass."""
        stats = cls(len(samples), kind)
        for i, sample in enumerate(samples):
            arr = np.asarray(sample, dtype=float)
            if arr.ndim != 1:
                raise ValueError(f"arm {i + 1}: sample must be one-dimensional")
            stats.counts[i] = arr.shape[0]
            if kind == BINARY:
                if not np.all((arr == 0) | (arr == 1)):
                    raise ValueError(f"arm {i + 1}: binary sample must contain only 0/1")
                stats.successes[i] = int(arr.sum())
            else:
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"arm {i + 1}: sample contains non-finite values")
                stats.sums[i] = float(arr.sum())
                stats.sumsqs[i] = float((arr * arr).sum())
                if kind == VALUES:
                    stats._values[i] = arr.tolist()
        stats.n = sum(stats.counts)
        return stats


@dataclass(frozen=True)
class ContrastEstimate:
    """Contrasts versus baseline with their estimated covariance.

    ``sigma_scale`` carries the baseline dispersion estimate for metrics
    whose priors live on the effect-size scale; ``None`` when the metric
    is scale-free or the estimate is degenerate.
    """

    beta_hat: np.ndarray
    cov: np.ndarray
    null_value: np.ndarray
    sigma_scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta_hat", np.asarray(self.beta_hat, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "null_value", np.asarray(self.null_value, dtype=float))


def contrast_covariance(v) -> np.ndarray:
    """Covariance of baseline contrasts from per-arm variance terms.

    Given ``v = [v_1, ..., v_m]``, the contrast of arm ``j+1`` versus
    arm 1 has variance ``v_1 + v_{j+1}`` and every pair of contrasts
    shares covariance ``v_1`` (the baseline term).
    """
    v = [float(x) for x in v]
    d = len(v) - 1
    cov = np.full((d, d), v[0])
    for j in range(d):
        cov[j, j] = v[0] + v[j + 1]
    return cov


def _require_kind(stats: ArmStats, kind: str, metric: str) -> None:
    if stats.kind != kind:
        raise ValueError(f"{metric} requires {kind!r} statistics, got {stats.kind!r}")


def _proportions(stats: ArmStats, metric: str, need_successes: bool,
                 need_failures: bool) -> list[float]:
    p = []
    for i in range(stats.m):
        c = stats.counts[i]
        s = stats.successes[i]
        if c < 1:
            raise InsufficientDataError(f"{metric}: arm {i + 1} has no observations")
        if need_successes and s < 1:
            raise InsufficientDataError(f"{metric}: arm {i + 1} has no successes yet")
        if need_failures and s >= c:
            raise InsufficientDataError(f"{metric}: arm {i + 1} has no failures yet")
        p.append(s / c)
    return p


def risk_ratio_contrast(stats: ArmStats) -> ContrastEstimate:
    """Log risk ratio of each arm versus baseline.

    ``beta[i] = ln p_{i+2} - ln p_1`` with delta-method variance terms
    ``v_j = (1 - p_j) / (p_j n_j)``.
    """
    _require_kind(stats, BINARY, "risk_ratio")
    p = _proportions(stats, "risk_ratio", need_successes=True, need_failures=False)
    v = [(1.0 - pj) / (pj * cj) for pj, cj in zip(p, stats.counts)]
    logp = [math.log(pj) for pj in p]
    beta = [logp[j] - logp[0] for j in range(1, stats.m)]
    return ContrastEstimate(beta, contrast_covariance(v), np.zeros(stats.m - 1))


def odds_ratio_contrast(stats: ArmStats) -> ContrastEstimate:
    """Log odds ratio of each arm versus baseline.

    ``beta[i] = logit(p_{i+2}) - logit(p_1)`` with variance terms
    ``v_j = 1/(n_j p_j) + 1/(n_j (1 - p_j))``.
    """
    _require_kind(stats, BINARY, "odds_ratio")
    p = _proportions(stats, "odds_ratio", need_successes=True, need_failures=True)
    v = [
        1.0 / (cj * pj) + 1.0 / (cj * (1.0 - pj))
        for pj, cj in zip(p, stats.counts)
    ]
    logit = [math.log(pj / (1.0 - pj)) for pj in p]
    beta = [logit[j] - logit[0] for j in range(1, stats.m)]
    return ContrastEstimate(beta, contrast_covariance(v), np.zeros(stats.m - 1))


def prop_diff_contrast(stats: ArmStats) -> ContrastEstimate:
    """Difference in proportions of each arm versus baseline.

    ``v_j = p_j (1 - p_j) / n_j``.  The default dispersion estimate for
    effect-size priors is the baseline binomial standard deviation
    ``sqrt(p_1 (1 - p_1))``; it is reported as absent while degenerate.
    """
    _require_kind(stats, BINARY, "prop_diff")
    p = _proportions(stats, "prop_diff", need_successes=False, need_failures=False)
    v = [pj * (1.0 - pj) / cj for pj, cj in zip(p, stats.counts)]
    beta = [p[j] - p[0] for j in range(1, stats.m)]
    baseline_var = p[0] * (1.0 - p[0])
    sigma_scale = math.sqrt(baseline_var) if baseline_var > 0.0 else None
    return ContrastEstimate(
        beta, contrast_covariance(v), np.zeros(stats.m - 1), sigma_scale=sigma_scale
    )


def _sample_variances(stats: ArmStats, metric: str) -> list[float]:
    variances = []
    for i in range(stats.m):
        c = stats.counts[i]
        if c < 2:
            raise InsufficientDataError(
                f"{metric}: arm {i + 1} needs at least 2 observations"
            )
        # clamp tiny negative residuals from cancellation on constant data
        ss = stats.sumsqs[i] - stats.sums[i] * stats.sums[i] / c
        variances.append(max(ss, 0.0) / (c - 1))
    return variances


def mean_diff_contrast(stats: ArmStats) -> ContrastEstimate:
    """Difference in means of each arm versus baseline.

    ``v_j = s2_j / n_j`` with ``s2_j`` the (n-1)-denominator sample
    variance.  The default dispersion estimate for effect-size priors is
    the baseline sample standard deviation.
    """
    if stats.kind == BINARY:
        raise ValueError("mean_diff requires 'numeric' or 'values' statistics, got 'binary'")
    variances = _sample_variances(stats, "mean_diff")
    if all(s2 == 0.0 for s2 in variances):
        raise InsufficientDataError("mean_diff: all arms have zero sample variance")
    means = [stats.sums[i] / stats.counts[i] for i in range(stats.m)]
    v = [s2 / c for s2, c in zip(variances, stats.counts)]
    beta = [means[j] - means[0] for j in range(1, stats.m)]
    sigma_scale = math.sqrt(variances[0]) if variances[0] > 0.0 else None
    return ContrastEstimate(
        beta, contrast_covariance(v), np.zeros(stats.m - 1), sigma_scale=sigma_scale
    )


def _pair_mid_rank_p(x1: np.ndarray, xi: np.ndarray) -> tuple:
    """Mid-rank superiority estimate of sorted ``xi`` over sorted ``x1``.

    Returns ``(p_hat, lo1, hi1)`` where the searchsorted bounds of the
    arm-i values within the baseline are reused by the caller.
    """
    n1 = x1.shape[0]
    ni = xi.shape[0]
    lo1 = np.searchsorted(x1, xi, side="left")
    hi1 = np.searchsorted(x1, xi, side="right")
    # mean mid-rank of arm i within the pooled (arm 1, arm i) sample;
    # the own-sample mid-ranks average to exactly (ni+1)/2, leaving
    # only the cross terms to compute
    rank_mean = float((lo1 + hi1).mean()) * 0.5 + (ni + 1) * 0.5
    p_hat = (rank_mean - (ni + 1) * 0.5) / n1
    return p_hat, lo1, hi1


def auc_estimates(stats: ArmStats) -> np.ndarray:
    """Superiority probability of each arm versus baseline (point estimates).

    Unlike :func:`auc_contrast` this needs no variance, so it is defined
    as soon as every arm has one observation (0.5 for identical data).
    """
    _require_kind(stats, VALUES, "auc")
    for i in range(stats.m):
        if stats.counts[i] < 1:
            raise InsufficientDataError(f"auc: arm {i + 1} has no observations")
    x1 = stats.sorted_values(1)
    return np.array(
        [_pair_mid_rank_p(x1, stats.sorted_values(arm))[0] for arm in range(2, stats.m + 1)]
    )


def auc_contrast(stats: ArmStats) -> ContrastEstimate:
    """Stochastic-superiority (AUC) contrast of each arm versus baseline.

    The treatment effect of arm i is the probability that a random arm-i
    observation exceeds a random baseline observation, plus half the tie
    probability.  It is estimated from mid-ranks of the pooled pair of
    samples, and the contrast stored is ``p_hat - 1/2`` so the shared
    null value of zero applies.

    The covariance plugs in sample variances of the normalized empirical
    CDFs: with ``s2_i = var(F_i at baseline points)`` and
    ``w2_i = var(F_1 at arm-i points)``, the diagonal is
    ``s2_i / n_1 + w2_i / n_i``; off-diagonal entries are the sample
    covariance of ``F_l`` and ``F_m`` at baseline points divided by
    ``n_1``.
    """
    _require_kind(stats, VALUES, "auc")
    m = stats.m
    for i in range(m):
        if stats.counts[i] < 2:
            raise InsufficientDataError(f"auc: arm {i + 1} needs at least 2 observations")
    x1 = stats.sorted_values(1)
    n1 = x1.shape[0]
    d = m - 1
    beta = np.empty(d)
    diag = np.empty(d)
    f_at_base = np.empty((n1, d))
    for j in range(d):
        xi = stats.sorted_values(j + 2)
        ni = xi.shape[0]
        p_hat, lo1, hi1 = _pair_mid_rank_p(x1, xi)
        # normalized empirical CDFs: mean of left- and right-continuous forms
        lo = np.searchsorted(xi, x1, side="left")
        hi = np.searchsorted(xi, x1, side="right")
        fi_at_1 = (lo + hi) / (2.0 * ni)
        f1_at_i = (lo1 + hi1) / (2.0 * n1)
        s2 = float(fi_at_1.var(ddof=1))
        w2 = float(f1_at_i.var(ddof=1))
        beta[j] = p_hat - 0.5
        diag[j] = s2 / n1 + w2 / ni
        f_at_base[:, j] = fi_at_1
    if not diag.max() > 0.0:
        raise InsufficientDataError("auc: zero variance in all terms (constant data)")
    if d == 1:
        cov = np.array([[diag[0]]])
    else:
        cov = np.atleast_2d(np.cov(f_at_base, rowvar=False, ddof=1)) / n1
        np.fill_diagonal(cov, diag)
    return ContrastEstimate(beta, cov, np.zeros(d))


def sigma_scale_estimate(stats: ArmStats, mode: str) -> float:
    """Dispersion estimate used to rescale effect-size priors.

    ``baseline`` uses arm 1 alone (binomial standard deviation for
    binary aggregates, sample standard deviation otherwise); ``pooled``
    uses the square root of the mean per-arm variance.
    """
    if mode not in ("baseline", "pooled"):
        raise ValueError(f"unknown sigma mode {mode!r}; expected 'baseline' or 'pooled'")
    arms = range(1) if mode == "baseline" else range(stats.m)
    if stats.kind == BINARY:
        terms = []
        for i in arms:
            if stats.counts[i] < 1:
                raise InsufficientDataError(f"sigma_scale: arm {i + 1} has no observations")
            p = stats.successes[i] / stats.counts[i]
            terms.append(p * (1.0 - p))
        variance = sum(terms) / len(terms)
    else:
        terms = []
        for i in arms:
            c = stats.counts[i]
            if c < 2:
                raise InsufficientDataError(
                    f"sigma_scale: arm {i + 1} needs at least 2 observations"
                )
            ss = stats.sumsqs[i] - stats.sums[i] * stats.sums[i] / c
            terms.append(max(ss, 0.0) / (c - 1))
        variance = sum(terms) / len(terms)
    if not variance > 0.0:
        raise InsufficientDataError(f"sigma_scale ({mode}): dispersion estimate is zero")
    return math.sqrt(variance)


@dataclass(frozen=True)
class MetricInfo:
    """Registry entry tying a metric name to its machinery."""

    name: str
    kind: str
    contrast: Callable[[ArmStats], ContrastEstimate]
    scale_free: bool


METRICS = {
    "risk_ratio": MetricInfo("risk_ratio", BINARY, risk_ratio_contrast, True),
    "odds_ratio": MetricInfo("odds_ratio", BINARY, odds_ratio_contrast, True),
    "prop_diff": MetricInfo("prop_diff", BINARY, prop_diff_contrast, False),
    "mean_diff": MetricInfo("mean_diff", NUMERIC, mean_diff_contrast, False),
    "auc": MetricInfo("auc", VALUES, auc_contrast, True),
}
