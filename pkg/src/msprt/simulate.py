"""Monte Carlo harness: synthetic streams, error rates, and diagnostics.

Every replication runs an independent synthetic event stream through a
fresh sequential test.  Replication ``r`` of a scenario with seed ``s``
uses the child seed ``splitmix64(s + (r+1) * 0x9E3779B97F4A7C15)``, so
results are reproducible and independent of how replications are
scheduled across worker processes; aggregation always happens in
replication order.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .engine import TestConfig, new_test
from .metrics import METRICS, ArmStats, contrast_covariance
from .priors import GaussianSummary, MixtureNormalPrior, msprt_log_ratio

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

#: Events generated per chunk inside a replication.  Fixed so that the
#: random stream is independent of early stopping and worker layout.
_CHUNK = 2048

GENERATOR_KINDS = ("bernoulli", "normal", "lognormal", "uniform", "ordinal")


def _mix64(x: int) -> int:
    # splitmix64 output mixer
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def child_seed(seed: int, replication: int) -> int:
    """Deterministic 64-bit child seed for one replication."""
    return _mix64((int(seed) + (int(replication) + 1) * _GOLDEN) & _MASK64)


@dataclass(frozen=True)
class GeneratorSpec:
    """Per-arm outcome distribution for synthetic streams.

    Exactly the fields matching ``kind`` must be present:

    - ``bernoulli``: ``p`` (success probability per arm)
    - ``normal`` / ``lognormal``: ``mu`` and ``sigma`` per arm
      (lognormal parameters describe the underlying normal)
    - ``uniform``: ``low`` and ``high`` per arm
    - ``ordinal``: ``probs``, one category-probability row per arm
    """

    kind: str
    p: tuple | None = None
    mu: tuple | None = None
    sigma: tuple | None = None
    low: tuple | None = None
    high: tuple | None = None
    probs: tuple | None = None

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}; expected one of {GENERATOR_KINDS}")
        for name in ("p", "mu", "sigma", "low", "high"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(float(v) for v in value))
        if self.probs is not None:
            object.__setattr__(
                self, "probs", tuple(tuple(float(v) for v in row) for row in self.probs)
            )
        self._validate()

    def _validate(self) -> None:
        required = {
            "bernoulli": ("p",),
            "normal": ("mu", "sigma"),
            "lognormal": ("mu", "sigma"),
            "uniform": ("low", "high"),
            "ordinal": ("probs",),
        }[self.kind]
        for name in ("p", "mu", "sigma", "low", "high", "probs"):
            value = getattr(self, name)
            if name in required and value is None:
                raise ValueError(f"{self.kind} generator requires {name!r}")
            if name not in required and value is not None:
                raise ValueError(f"{self.kind} generator does not take {name!r}")
        lengths = {len(getattr(self, name)) for name in required}
        if len(lengths) != 1 or 0 in lengths:
            raise ValueError(f"{self.kind} generator parameters must share one arm count")
        if self.kind == "bernoulli" and not all(0.0 <= v <= 1.0 for v in self.p):
            raise ValueError("bernoulli probabilities must lie in [0, 1]")
        if self.kind in ("normal", "lognormal") and not all(s > 0.0 for s in self.sigma):
            raise ValueError(f"{self.kind} sigma must be positive")
        if self.kind == "uniform" and not all(h > l for l, h in zip(self.low, self.high)):
            raise ValueError("uniform bounds must satisfy high > low")
        if self.kind == "ordinal":
            width = {len(row) for row in self.probs}
            if len(width) != 1 or 0 in width:
                raise ValueError("ordinal probability rows must share one category count")
            for j, row in enumerate(self.probs):
                if any(v < 0.0 for v in row) or abs(sum(row) - 1.0) > 1e-9:
                    raise ValueError(f"ordinal arm {j + 1}: probabilities must be >= 0 and sum to 1")

    @property
    def arm_count(self) -> int:
        for name in ("p", "mu", "low", "probs"):
            value = getattr(self, name)
            if value is not None:
                return len(value)
        raise AssertionError("unreachable")

    def sample(self, rng: np.random.Generator, arms0: np.ndarray) -> np.ndarray:
        """Draw one value per entry of ``arms0`` (0-based arm indices)."""
        n = arms0.shape[0]
        if self.kind == "bernoulli":
            p = np.asarray(self.p)[arms0]
            return (rng.random(n) < p).astype(float)
        if self.kind in ("normal", "lognormal"):
            mu = np.asarray(self.mu)[arms0]
            sigma = np.asarray(self.sigma)[arms0]
            draws = mu + sigma * rng.standard_normal(n)
            return np.exp(draws) if self.kind == "lognormal" else draws
        if self.kind == "uniform":
            low = np.asarray(self.low)[arms0]
            high = np.asarray(self.high)[arms0]
            return low + (high - low) * rng.random(n)
        # ordinal: invert per-arm CDF rows at uniform draws
        cdf = np.cumsum(np.asarray(self.probs), axis=1)[arms0]
        return (rng.random(n)[:, None] > cdf).sum(axis=1).astype(float)

    def to_json(self) -> dict:
        doc = {"kind": self.kind}
        for name in ("p", "mu", "sigma", "low", "high", "probs"):
            value = getattr(self, name)
            if value is not None:
                doc[name] = [list(row) for row in value] if name == "probs" else list(value)
        return doc

    @classmethod
    def from_json(cls, obj: dict) -> "GeneratorSpec":
        if not isinstance(obj, dict) or "kind" not in obj:
            raise ValueError("generator document must be an object with a 'kind' key")
        fields = {k: v for k, v in obj.items() if k != "kind"}
        return cls(kind=obj["kind"], **fields)


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulated experiment scenario.

    ``allocation`` gives the multinomial arm-assignment probabilities;
    ``max_n`` truncates each stream, so rejection rates estimate the
    probability of stopping by ``max_n``.
    """

    generator: GeneratorSpec
    allocation: tuple
    max_n: int
    replications: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "allocation", tuple(float(q) for q in self.allocation))
        if len(self.allocation) != self.generator.arm_count:
            raise ValueError(
                f"allocation has {len(self.allocation)} entries for "
                f"{self.generator.arm_count} generator arms"
            )
        if any(q <= 0.0 for q in self.allocation):
            raise ValueError("allocation probabilities must be strictly positive")
        if abs(sum(self.allocation) - 1.0) > 1e-12:
            raise ValueError(f"allocation probabilities sum to {sum(self.allocation)!r}, expected 1")
        if not isinstance(self.max_n, int) or self.max_n < 1:
            raise ValueError(f"max_n must be a positive integer, got {self.max_n!r}")
        if not isinstance(self.replications, int) or self.replications < 1:
            raise ValueError(f"replications must be >= 1, got {self.replications!r}")
        if not isinstance(self.seed, int):
            raise ValueError(f"seed must be an integer, got {self.seed!r}")

    @property
    def arm_count(self) -> int:
        return self.generator.arm_count

    def to_json(self) -> dict:
        return {
            "generator": self.generator.to_json(),
            "allocation": list(self.allocation),
            "max_n": self.max_n,
            "replications": self.replications,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioSpec":
        if not isinstance(obj, dict):
            raise ValueError("scenario document must be a JSON object")
        try:
            return cls(
                generator=GeneratorSpec.from_json(obj["generator"]),
                allocation=tuple(obj["allocation"]),
                max_n=int(obj["max_n"]),
                replications=int(obj["replications"]),
                seed=int(obj["seed"]),
            )
        except KeyError as exc:
            raise ValueError(f"scenario document missing required key {exc}") from exc

    @classmethod
    def load(cls, path) -> "ScenarioSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class SimulationReport:
    """Aggregated Monte Carlo outputs of :func:`run_scenario`.

    ``rejection_rate`` estimates the probability of stopping by
    ``max_n`` (the truncated stopping probability), with the binomial
    Monte Carlo standard error alongside.
    """

    replications: int
    max_n: int
    rejections: int
    rejection_rate: float
    rejection_se: float
    stopping_time: dict | None
    lambda_mean_at: dict | None = None
    records: tuple | None = None

    def to_json(self) -> dict:
        doc = {
            "replications": self.replications,
            "max_n": self.max_n,
            "rejections": self.rejections,
            "rejection_rate": self.rejection_rate,
            "rejection_se": self.rejection_se,
            "stopping_time": self.stopping_time,
        }
        if self.lambda_mean_at is not None:
            doc["lambda_mean_at"] = {
                str(n): {"mean": m, "se": s} for n, (m, s) in sorted(self.lambda_mean_at.items())
            }
        if self.records is not None:
            doc["records"] = [list(row) for row in self.records]
        return doc

    def format_table(self) -> str:
        rows = [
            ("replications", f"{self.replications}"),
            ("max_n", f"{self.max_n}"),
            ("rejections", f"{self.rejections}"),
            ("rejection_rate", f"{self.rejection_rate:.6f}"),
            ("rejection_se", f"{self.rejection_se:.6f}"),
        ]
        if self.stopping_time is not None:
            rows.append(("stop_mean", f"{self.stopping_time['mean']:.1f}"))
            for name, q in sorted(self.stopping_time["quantiles"].items()):
                rows.append((f"stop_{name}", f"{q:.1f}"))
        if self.lambda_mean_at:
            for n, (mean, se) in sorted(self.lambda_mean_at.items()):
                rows.append((f"lambda_mean@{n}", f"{mean:.6f} (se {se:.6f})"))
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


def _simulate_stream(
    spec: ScenarioSpec,
    config: TestConfig,
    replication: int,
    checkpoints: tuple | None,
) -> tuple:
    rng = np.random.default_rng(child_seed(spec.seed, replication))
    test = new_test(config)
    q_cum = np.cumsum(spec.allocation)
    q_cum[-1] = 1.0  # guard against rounding in the last bin
    generator = spec.generator
    max_n = spec.max_n
    checkpoint_set = set(checkpoints) if checkpoints else None
    lambdas = {} if checkpoints else None
    stop_n = 0
    produced = 0
    while produced < max_n:
        count = min(_CHUNK, max_n - produced)
        arms0 = np.searchsorted(q_cum, rng.random(count), side="right")
        values = generator.sample(rng, arms0)
        arms = arms0.tolist()
        vals = values.tolist()
        ingest = test.ingest
        stopped = False
        for arm0, value in zip(arms, vals):
            record = ingest(arm0 + 1, value)
            if record is not None:
                if checkpoint_set and record["n"] in checkpoint_set:
                    lambdas[record["n"]] = record["log_lambda"]
                if record["decision"] == "reject":
                    stop_n = record["n"]
                    stopped = True
                    break
        if stopped:
            break
        produced += count
    return (stop_n > 0, stop_n, test.n, test.log_lambda_max, lambdas)


def _simulate_range(spec, config, start, stop, checkpoints):
    return [_simulate_stream(spec, config, r, checkpoints) for r in range(start, stop)]


def run_scenario(
    spec: ScenarioSpec,
    config: TestConfig,
    jobs: int | None = None,
    lambda_checkpoints=None,
    keep_records: bool = False,
) -> SimulationReport:
    """Run the scenario through fresh engine tests, one per replication.

    ``jobs`` controls worker processes (default: CPU count); results are
    identical for any value because each replication is independently
    seeded and reduced in replication order.  ``lambda_checkpoints``
    requests the mean likelihood ratio at specific evaluation sizes
    (multiples of the batch interval), aggregated over replications
    still running at that point.
    """
    if spec.arm_count != config.m:
        raise ValueError(
            f"scenario has {spec.arm_count} arms but the test expects {config.m}"
        )
    if spec.max_n < config.burn_in:
        raise ValueError(
            f"max_n {spec.max_n} is below the test burn-in {config.burn_in}"
        )
    checkpoints = tuple(sorted(int(n) for n in lambda_checkpoints)) if lambda_checkpoints else None
    reps = spec.replications
    if jobs is None:
        jobs = os.cpu_count() or 1
    jobs = max(1, min(int(jobs), reps))
    if jobs == 1:
        rows = _simulate_range(spec, config, 0, reps, checkpoints)
    else:
        bounds = np.linspace(0, reps, jobs * 4 + 1).astype(int)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_simulate_range, spec, config, int(lo), int(hi), checkpoints)
                for lo, hi in zip(bounds[:-1], bounds[1:])
                if hi > lo
            ]
            rows = []
            for future in futures:  # submit order == replication order
                rows.extend(future.result())
    return _aggregate(spec, rows, checkpoints, keep_records)


def _aggregate(spec, rows, checkpoints, keep_records) -> SimulationReport:
    reps = spec.replications
    rejections = sum(1 for row in rows if row[0])
    rate = rejections / reps
    se = math.sqrt(rate * (1.0 - rate) / reps)
    stopping = None
    if rejections:
        stops = np.array([row[1] for row in rows if row[0]], dtype=float)
        qs = np.quantile(stops, [0.10, 0.25, 0.50, 0.75, 0.90])
        stopping = {
            "count": int(rejections),
            "mean": float(stops.mean()),
            "quantiles": {
                "p10": float(qs[0]),
                "p25": float(qs[1]),
                "p50": float(qs[2]),
                "p75": float(qs[3]),
                "p90": float(qs[4]),
            },
        }
    lambda_mean_at = None
    if checkpoints:
        lambda_mean_at = {}
        for n in checkpoints:
            logs = [row[4][n] for row in rows if row[4] is not None and n in row[4]]
            if not logs:
                continue
            lams = np.exp(np.array(logs))
            mean = float(lams.mean())
            se_n = float(lams.std(ddof=1) / math.sqrt(len(lams))) if len(lams) > 1 else 0.0
            lambda_mean_at[n] = (mean, se_n)
    records = None
    if keep_records:
        records = tuple((bool(r), int(s), int(n), float(ll)) for r, s, n, ll, _ in rows)
    return SimulationReport(
        replications=reps,
        max_n=spec.max_n,
        rejections=rejections,
        rejection_rate=rate,
        rejection_se=se,
        stopping_time=stopping,
        lambda_mean_at=lambda_mean_at,
        records=records,
    )


def martingale_diagnostic(
    spec: ScenarioSpec,
    prior: MixtureNormalPrior,
    checkpoints,
) -> dict:
    """Mean likelihood ratio at fixed sample sizes with known variances.

    This is the exact-case harness: the generator must be ``normal``
    with identical means across arms (a true null), and the per-arm
    variances are wired straight into the contrast covariance instead of
    being estimated.  Conditional on the arm assignments the contrast is
    then exactly normal with known covariance, so the ratio has mean 1
    at every fixed n.  Replications in which some arm is still empty at
    a checkpoint are excluded at that checkpoint (exactness is
    conditional on all contrasts being defined).

    Returns a map ``n -> (mean, standard error)``.
    """
    generator = spec.generator
    if generator.kind != "normal":
        raise ValueError("martingale diagnostic requires a normal generator")
    if len(set(generator.mu)) != 1:
        raise ValueError("martingale diagnostic requires a null scenario (equal means)")
    checkpoints = sorted(int(n) for n in checkpoints)
    if not checkpoints or checkpoints[0] < 1 or checkpoints[-1] > spec.max_n:
        raise ValueError("checkpoints must lie in 1..max_n")
    m = spec.arm_count
    if prior.dimension != m - 1:
        raise ValueError(f"prior dimension {prior.dimension} does not match m-1 = {m - 1}")
    horizon = checkpoints[-1]
    q_cum = np.cumsum(spec.allocation)
    q_cum[-1] = 1.0
    known_var = np.asarray(generator.sigma) ** 2
    zeros = np.zeros(m - 1)
    lams = np.full((spec.replications, len(checkpoints)), np.nan)
    for rep in range(spec.replications):
        rng = np.random.default_rng(child_seed(spec.seed, rep))
        arms0 = np.searchsorted(q_cum, rng.random(horizon), side="right")
        values = generator.sample(rng, arms0)
        for ci, n in enumerate(checkpoints):
            counts = np.bincount(arms0[:n], minlength=m)
            if counts.min() == 0:
                continue
            sums = np.bincount(arms0[:n], weights=values[:n], minlength=m)
            means = sums / counts
            beta = means[1:] - means[0]
            v = known_var / counts
            summary = GaussianSummary(beta, contrast_covariance(v), zeros)
            lams[rep, ci] = math.exp(msprt_log_ratio(summary, prior))
    result = {}
    for ci, n in enumerate(checkpoints):
        column = lams[:, ci]
        valid = column[~np.isnan(column)]
        if valid.size == 0:
            raise ValueError(f"no replication had all arms populated at n={n}")
        mean = float(valid.mean())
        se = float(valid.std(ddof=1) / math.sqrt(valid.size)) if valid.size > 1 else 0.0
        result[n] = (mean, se)
    return result


@dataclass(frozen=True)
class CovarianceDiagnostic:
    """Empirical vs plug-in covariance of a contrast estimator."""

    metric: str
    n_per_arm: int
    replications: int
    empirical: np.ndarray
    plugin_mean: np.ndarray
    relative_error: np.ndarray

    @property
    def max_relative_error(self) -> float:
        return float(self.relative_error.max())

    def format_table(self) -> str:
        lines = [
            f"metric={self.metric} n_per_arm={self.n_per_arm} replications={self.replications}"
        ]
        d = self.empirical.shape[0]
        for i in range(d):
            for j in range(d):
                lines.append(
                    f"  [{i}][{j}] empirical={self.empirical[i, j]:.6e} "
                    f"plugin={self.plugin_mean[i, j]:.6e} "
                    f"rel_err={self.relative_error[i, j]:.4f}"
                )
        return "\n".join(lines)


def covariance_diagnostic(
    spec: ScenarioSpec, metric: str, n_per_arm: int
) -> CovarianceDiagnostic:
    """Compare Monte Carlo covariance of the contrast with its plug-in.

    Draws ``n_per_arm`` observations per arm per replication (fixed-size
    samples, no streaming), computes the metric contrast, and reports
    the entrywise relative error between the empirical covariance of the
    contrasts and the mean plug-in covariance.  Requires a null scenario
    (identical generator parameters across arms).
    """
    info = METRICS[metric]
    generator = spec.generator
    m = spec.arm_count
    params = [
        getattr(generator, name)
        for name in ("p", "mu", "sigma", "low", "high", "probs")
        if getattr(generator, name) is not None
    ]
    if any(len(set(values)) != 1 for values in params):
        raise ValueError("covariance diagnostic requires a null scenario (identical arms)")
    d = m - 1
    reps = spec.replications
    betas = np.empty((reps, d))
    plugin_sum = np.zeros((d, d))
    arm_index = [np.full(n_per_arm, j) for j in range(m)]
    for rep in range(reps):
        rng = np.random.default_rng(child_seed(spec.seed, rep))
        samples = [generator.sample(rng, arm_index[j]) for j in range(m)]
        stats = ArmStats.from_samples(samples, info.kind)
        contrast = info.contrast(stats)
        betas[rep] = contrast.beta_hat
        plugin_sum += contrast.cov
    empirical = np.atleast_2d(np.cov(betas, rowvar=False, ddof=1))
    plugin_mean = plugin_sum / reps
    relative_error = np.abs(empirical - plugin_mean) / np.abs(plugin_mean)
    return CovarianceDiagnostic(
        metric=metric,
        n_per_arm=int(n_per_arm),
        replications=reps,
        empirical=empirical,
        plugin_mean=plugin_mean,
        relative_error=relative_error,
    )
