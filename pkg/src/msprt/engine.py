"""Sequential test lifecycle: batched ingestion, stopping rule, snapshots.

A test ingests one (arm, value) event at a time and evaluates the
likelihood ratio every ``batch_interval`` events.  The running maximum
of the log ratio drives both the always-valid p-value
``min(1, 1/max_lambda)`` and the rejection rule: reject once the
maximum reaches ``ln(1/alpha)`` and at least ``burn_in`` observations
have arrived.  Rejection is absorbing; evaluations at degenerate
early-stream states are deferred rather than failed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .metrics import METRICS, ArmStats, InsufficientDataError, VALUES, sigma_scale_estimate
from .priors import (
    FactorizationError,
    GaussianSummary,
    MixtureNormalPrior,
    PriorComponent,
    msprt_log_ratio,
    scale_prior_to_effect_size,
    validate_prior,
)

SIGMA_MODES = ("baseline", "pooled", "none")

SNAPSHOT_MAGIC = b"MSPR"
SNAPSHOT_VERSION = 1

_METRIC_CODES = ("risk_ratio", "odds_ratio", "prop_diff", "mean_diff", "auc")
_DECISIONS = ("continue", "reject")
_PRIOR_SCALES = ("natural", "effect_size")


class ConfigurationError(ValueError):
    """A test configuration violates one of its invariants."""


class SnapshotError(ValueError):
    """A snapshot byte sequence is malformed or from an unknown version."""


@dataclass(frozen=True)
class TestConfig:
    """Immutable configuration of one sequential test.

    ``burn_in`` defaults to ``100 * m``; ``sigma_mode`` defaults to
    ``"none"`` for scale-free metrics (risk ratio, odds ratio, AUC) and
    ``"baseline"`` for the metrics whose priors live on the effect-size
    scale (proportion and mean differences).
    """

    __test__ = False  # not a pytest class, despite the name

    alpha: float
    metric: str
    m: int
    prior: MixtureNormalPrior
    batch_interval: int = 100
    burn_in: int | None = None
    sigma_mode: str | None = None
    record_history: bool = False

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigurationError(
                f"metric: unknown metric {self.metric!r}; expected one of "
                f"{tuple(METRICS)}"
            )
        info = METRICS[self.metric]
        if self.burn_in is None:
            object.__setattr__(self, "burn_in", 100 * int(self.m))
        if self.sigma_mode is None:
            object.__setattr__(self, "sigma_mode", "none" if info.scale_free else "baseline")
        self._validate(info)

    def _validate(self, info) -> None:
        if not isinstance(self.m, int) or self.m < 2:
            raise ConfigurationError(f"m: arm count must be an integer >= 2, got {self.m!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha: must lie in (0, 1), got {self.alpha!r}")
        if not isinstance(self.batch_interval, int) or self.batch_interval < 1:
            raise ConfigurationError(
                f"batch_interval: must be an integer >= 1, got {self.batch_interval!r}"
            )
        if not isinstance(self.burn_in, int) or self.burn_in < self.batch_interval:
            raise ConfigurationError(
                f"burn_in: must be an integer >= batch_interval "
                f"({self.batch_interval}), got {self.burn_in!r}"
            )
        if self.sigma_mode not in SIGMA_MODES:
            raise ConfigurationError(
                f"sigma_mode: unknown mode {self.sigma_mode!r}; expected one of {SIGMA_MODES}"
            )
        if info.scale_free and self.sigma_mode != "none":
            raise ConfigurationError(
                f"sigma_mode: {self.metric} is scale-free and takes sigma_mode='none', "
                f"got {self.sigma_mode!r}"
            )
        if not info.scale_free and self.sigma_mode == "none":
            raise ConfigurationError(
                f"sigma_mode: {self.metric} uses effect-size priors and needs "
                f"'baseline' or 'pooled', got 'none'"
            )
        problem = validate_prior(self.prior)
        if problem is not None:
            raise ConfigurationError(f"prior: {problem}")
        if self.prior.dimension != self.m - 1:
            raise ConfigurationError(
                f"prior: dimension {self.prior.dimension} does not match m-1 = {self.m - 1}"
            )
        expected_scale = "natural" if self.sigma_mode == "none" else "effect_size"
        if self.prior.scale != expected_scale:
            raise ConfigurationError(
                f"prior: scale {self.prior.scale!r} inconsistent with sigma_mode "
                f"{self.sigma_mode!r}; expected {expected_scale!r}"
            )


class TestState:
    """Mutable state of one running sequential test (single writer)."""

    __test__ = False  # not a pytest class, despite the name

    __slots__ = ("config", "stats", "n", "pending", "log_lambda_max",
                 "last_log_lambda", "decision", "history", "_info", "_threshold")

    def __init__(self, config: TestConfig):
        self.config = config
        self._info = METRICS[config.metric]
        self._threshold = math.log(1.0 / config.alpha)
        self.stats = ArmStats(config.m, self._info.kind)
        self.n = 0
        self.pending = 0
        self.log_lambda_max = 0.0
        self.last_log_lambda = 0.0
        self.decision = "continue"
        self.history = [] if config.record_history else None

    @property
    def p_value(self) -> float:
        """Always-valid p-value ``min(1, 1/max_lambda)``."""
        return min(1.0, math.exp(-self.log_lambda_max))

    def ingest(self, arm: int, value: float) -> dict | None:
        """Feed one event; returns the evaluation record when one fires.

        Ingestion is accepted after rejection too, but the decision is
        absorbing and never reverts.
        """
        self.stats.update(arm, value)
        self.n += 1
        self.pending += 1
        if self.pending >= self.config.batch_interval:
            self.pending = 0
            return self.evaluate()
        return None

    def evaluate(self) -> dict:
        """Evaluate the likelihood ratio at the current state.

        On insufficient data (or a factorization failure surviving the
        ridge retry) the batch is consumed and the previous ratio is
        reported unchanged.
        """
        config = self.config
        try:
            contrast = self._info.contrast(self.stats)
            prior = config.prior
            if config.sigma_mode != "none":
                scale = sigma_scale_estimate(self.stats, config.sigma_mode)
                prior = scale_prior_to_effect_size(prior, scale)
            summary = GaussianSummary(contrast.beta_hat, contrast.cov, contrast.null_value)
            log_lambda = msprt_log_ratio(summary, prior)
        except (InsufficientDataError, FactorizationError):
            return self._record()
        self.last_log_lambda = log_lambda
        if log_lambda > self.log_lambda_max:
            self.log_lambda_max = log_lambda
        if (
            self.decision == "continue"
            and self.log_lambda_max >= self._threshold
            and self.n >= config.burn_in
        ):
            self.decision = "reject"
        return self._record()

    def _record(self) -> dict:
        record = {
            "n": self.n,
            "log_lambda": self.last_log_lambda,
            "p": self.p_value,
            "decision": self.decision,
        }
        if self.history is not None:
            self.history.append((self.n, self.last_log_lambda, self.p_value))
        return record

    # -- snapshot serialization -------------------------------------------

    def snapshot(self) -> bytes:
        """Serialize to a versioned little-endian binary blob.

        Floats are stored as raw 64-bit values and value multisets in
        sorted order, so a restored test continues bit-identically.
        """
        config = self.config
        out = bytearray()
        out += SNAPSHOT_MAGIC
        out += struct.pack("<H", SNAPSHOT_VERSION)
        out += struct.pack(
            "<dBIQQBB",
            config.alpha,
            _METRIC_CODES.index(config.metric),
            config.m,
            config.batch_interval,
            config.burn_in,
            SIGMA_MODES.index(config.sigma_mode),
            1 if config.record_history else 0,
        )
        prior = config.prior
        d = prior.dimension
        out += struct.pack("<BII", _PRIOR_SCALES.index(prior.scale), len(prior.components), d)
        for comp in prior.components:
            out += struct.pack("<d", comp.weight)
            out += struct.pack(f"<{d}d", *comp.mean.tolist())
            out += struct.pack(f"<{d * d}d", *comp.cov.ravel().tolist())
        out += struct.pack(
            "<QQddB",
            self.n,
            self.pending,
            self.log_lambda_max,
            self.last_log_lambda,
            _DECISIONS.index(self.decision),
        )
        if self.history is None:
            out += struct.pack("<BQ", 0, 0)
        else:
            out += struct.pack("<BQ", 1, len(self.history))
            for n, ll, p in self.history:
                out += struct.pack("<Qdd", n, ll, p)
        stats = self.stats
        for i in range(config.m):
            if stats.kind == VALUES:
                values = stats.sorted_values(i + 1).tolist()
            else:
                values = []
            out += struct.pack(
                "<QQddQ",
                stats.counts[i],
                stats.successes[i],
                stats.sums[i],
                stats.sumsqs[i],
                len(values),
            )
            if values:
                out += struct.pack(f"<{len(values)}d", *values)
        return bytes(out)


def new_test(config: TestConfig) -> TestState:
    """Create a fresh test state for a validated configuration."""
    return TestState(config)


class _Reader:
    """Bounds-checked sequential reader over a snapshot buffer."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self._pos + size > len(self._data):
            raise SnapshotError("corrupt snapshot: truncated data")
        values = struct.unpack_from(fmt, self._data, self._pos)
        self._pos += size
        return values

    def finish(self) -> None:
        if self._pos != len(self._data):
            raise SnapshotError(
                f"corrupt snapshot: {len(self._data) - self._pos} trailing bytes"
            )


def restore(data: bytes) -> TestState:
    """Rebuild a test state from :meth:`TestState.snapshot` output."""
    reader = _Reader(bytes(data))
    (magic,) = reader.take("<4s")
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotError(f"corrupt snapshot: bad magic {magic!r}")
    (version,) = reader.take("<H")
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    alpha, metric_code, m, batch_interval, burn_in, sigma_code, record_history = reader.take(
        "<dBIQQBB"
    )
    try:
        metric = _METRIC_CODES[metric_code]
        sigma_mode = SIGMA_MODES[sigma_code]
    except IndexError as exc:
        raise SnapshotError("corrupt snapshot: unknown enum code") from exc
    scale_code, n_components, d = reader.take("<BII")
    try:
        scale = _PRIOR_SCALES[scale_code]
    except IndexError as exc:
        raise SnapshotError("corrupt snapshot: unknown prior scale") from exc
    if n_components < 1 or n_components > 10_000 or d < 1:
        raise SnapshotError("corrupt snapshot: implausible prior shape")
    components = []
    for _ in range(n_components):
        (weight,) = reader.take("<d")
        mean = np.array(reader.take(f"<{d}d"))
        cov = np.array(reader.take(f"<{d * d}d")).reshape(d, d)
        components.append(PriorComponent(weight, mean, cov))
    try:
        config = TestConfig(
            alpha=alpha,
            metric=metric,
            m=int(m),
            prior=MixtureNormalPrior(tuple(components), scale=scale),
            batch_interval=int(batch_interval),
            burn_in=int(burn_in),
            sigma_mode=sigma_mode,
            record_history=bool(record_history),
        )
    except ConfigurationError as exc:
        raise SnapshotError(f"corrupt snapshot: embedded config invalid ({exc})") from exc
    n, pending, log_lambda_max, last_log_lambda, decision_code = reader.take("<QQddB")
    try:
        decision = _DECISIONS[decision_code]
    except IndexError as exc:
        raise SnapshotError("corrupt snapshot: unknown decision code") from exc
    history_present, history_count = reader.take("<BQ")
    history = None
    if history_present:
        history = [reader.take("<Qdd") for _ in range(history_count)]
        history = [(int(hn), hl, hp) for hn, hl, hp in history]
    state = TestState(config)
    stats = state.stats
    for i in range(config.m):
        count, successes, total, total_sq, n_values = reader.take("<QQddQ")
        stats.counts[i] = int(count)
        stats.successes[i] = int(successes)
        stats.sums[i] = total
        stats.sumsqs[i] = total_sq
        if n_values:
            if stats.kind != VALUES or n_values != count:
                raise SnapshotError("corrupt snapshot: value multiset inconsistent")
            values = list(reader.take(f"<{n_values}d"))
            stats._values[i] = values
            # snapshot stores values sorted; prime the merge cache
            stats._sorted[i] = np.asarray(values, dtype=float)
            stats._n_sorted[i] = len(values)
        elif stats.kind == VALUES and count:
            raise SnapshotError("corrupt snapshot: missing values for rank metric")
    reader.finish()
    if sum(stats.counts) != n:
        raise SnapshotError("corrupt snapshot: arm counts disagree with total")
    stats.n = int(n)
    state.n = int(n)
    state.pending = int(pending)
    state.log_lambda_max = log_lambda_max
    state.last_log_lambda = last_log_lambda
    state.decision = decision
    state.history = history
    return state


def snapshot(state: TestState) -> bytes:
    """Module-level alias of :meth:`TestState.snapshot`."""
    return state.snapshot()
