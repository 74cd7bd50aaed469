"""Mixture-normal priors and the closed-form sequential likelihood ratio.

Against a mixture-normal prior, the marginal likelihood of a normally
distributed estimate has a closed form: each component contributes a
normal density with the component covariance added to the sampling
covariance, so no numeric integration is needed.  All arithmetic is
carried out in log space because the ratio spans hundreds of orders of
magnitude over a long stream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

LOG_2PI = math.log(2.0 * math.pi)

#: Recognized values for the scale a prior is expressed on.  A prior on the
#: ``effect_size`` scale describes the contrast divided by a dispersion
#: estimate and is mapped onto the natural parameter scale with
#: :func:`scale_prior_to_effect_size` before each evaluation.
PRIOR_SCALES = ("natural", "effect_size")


class FactorizationError(ValueError):
    """A covariance matrix could not be factorized (not positive definite)."""


class PriorFormatError(ValueError):
    """A prior specification violates the schema or a mixture invariant."""


def _readonly_vector(values) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True, ndmin=1)
    arr.setflags(write=False)
    return arr


def _readonly_matrix(values) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True, ndmin=2)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PriorComponent:
    """One weighted normal component of a mixture prior.

    Parameters
    ----------
    weight : float
        Selection probability of the component; strictly positive.
    mean : array_like, shape (d,)
        Component mean.
    cov : array_like, shape (d, d)
        Component covariance.  May be singular (a zero matrix gives a
        point mass, recovering the simple-alternative likelihood ratio).
    """

    weight: float
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "mean", _readonly_vector(self.mean))
        object.__setattr__(self, "cov", _readonly_matrix(self.cov))

    @property
    def dimension(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class MixtureNormalPrior:
    """Weighted mixture of multivariate normal components.

    ``scale`` records whether the prior is expressed on the natural
    parameter scale or on the dimensionless effect-size scale; the math
    below never reads it, but the test engine uses it to decide whether
    :func:`scale_prior_to_effect_size` must be applied per evaluation.
    """

    components: tuple[PriorComponent, ...]
    scale: str = "natural"

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def dimension(self) -> int:
        return self.components[0].dimension

    @classmethod
    def single(cls, mean, cov, scale: str = "natural") -> "MixtureNormalPrior":
        """Convenience constructor for a one-component prior."""
        return cls((PriorComponent(1.0, mean, cov),), scale)


@dataclass(frozen=True)
class GaussianSummary:
    """An estimate, its sampling covariance, and the null value tested.

    The covariance is the estimated covariance of ``theta_hat`` itself
    (sample-size factors already folded in).
    """

    theta_hat: np.ndarray
    cov: np.ndarray
    theta0: np.ndarray

    def __post_init__(self):
        theta_hat = _readonly_vector(self.theta_hat)
        cov = _readonly_matrix(self.cov)
        theta0 = _readonly_vector(self.theta0)
        d = theta_hat.shape[0]
        if cov.shape != (d, d) or theta0.shape != (d,):
            raise ValueError(
                f"inconsistent summary dimensions: theta_hat {theta_hat.shape}, "
                f"cov {cov.shape}, theta0 {theta0.shape}"
            )
        object.__setattr__(self, "theta_hat", theta_hat)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "theta0", theta0)

    @property
    def dimension(self) -> int:
        return self.theta_hat.shape[0]


def validate_prior(prior: MixtureNormalPrior) -> str | None:
    """Check all mixture invariants; return the first violation found.

    Returns ``None`` when the prior is valid, otherwise a diagnostic
    string naming the offending component.  Checked invariants: at least
    one component, consistent dimensions, strictly positive weights
    summing to 1 within 1e-12, finite entries, symmetric covariances,
    and eigenvalues bounded below by ``-1e-10 * trace``.
    """
    if not prior.components:
        return "prior has no components"
    if prior.scale not in PRIOR_SCALES:
        return f"unknown prior scale {prior.scale!r}; expected one of {PRIOR_SCALES}"
    d = prior.components[0].dimension
    weight_sum = 0.0
    for i, comp in enumerate(prior.components):
        if not math.isfinite(comp.weight) or comp.weight <= 0.0:
            return f"component {i}: weight {comp.weight!r} is not strictly positive"
        weight_sum += comp.weight
        if comp.mean.shape != (d,):
            return (
                f"component {i}: mean has dimension {comp.mean.shape[0]}, "
                f"expected {d}"
            )
        if comp.cov.shape != (d, d):
            return f"component {i}: cov has shape {comp.cov.shape}, expected ({d}, {d})"
        if not np.all(np.isfinite(comp.mean)) or not np.all(np.isfinite(comp.cov)):
            return f"component {i}: mean or cov contains non-finite entries"
        asym = float(np.abs(comp.cov - comp.cov.T).max()) if d > 1 else 0.0
        if asym > 1e-12 * max(1.0, float(np.abs(comp.cov).max())):
            return f"component {i}: cov is not symmetric (max asymmetry {asym:.3g})"
        min_eig = float(np.linalg.eigvalsh(comp.cov).min())
        if min_eig < -1e-10 * float(np.trace(comp.cov)):
            return (
                f"component {i}: cov is not positive semi-definite "
                f"(smallest eigenvalue {min_eig:.3g})"
            )
    if abs(weight_sum - 1.0) > 1e-12:
        return f"component weights sum to {weight_sum!r}, expected 1 within 1e-12"
    return None


def log_mvn_pdf(x, mean, cov) -> float:
    """Log density of a multivariate normal at ``x``.

    Computed as ``-0.5 * (d*ln(2*pi) + ln det(cov) + quad)`` where the
    quadratic form and determinant come from a Cholesky factorization;
    the covariance is never inverted explicitly.

    Raises
    ------
    FactorizationError
        If ``cov`` is not (numerically) positive definite.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = x.shape[0]
    if mean.shape != (d,) or cov.shape != (d, d):
        raise ValueError(
            f"inconsistent dimensions: x {x.shape}, mean {mean.shape}, cov {cov.shape}"
        )
    if d == 1:
        return _log_normal_1d(float(x[0]), float(mean[0]), float(cov[0, 0]))
    if not np.all(np.isfinite(cov)):
        raise FactorizationError(f"covariance contains non-finite entries: {cov!r}")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"covariance is not positive definite: {cov!r}"
        ) from exc
    z = scipy.linalg.solve_triangular(chol, x - mean, lower=True)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (d * LOG_2PI + log_det + float(z @ z))


def _log_normal_1d(x: float, mean: float, var: float) -> float:
    # Scalar fast path shared with the mixture ratio; var>0 check also
    # rejects NaN.
    if not var > 0.0:
        raise FactorizationError(f"covariance is not positive definite: [[{var}]]")
    diff = x - mean
    return -0.5 * (LOG_2PI + math.log(var) + diff * diff / var)


def _logsumexp(values: list[float]) -> float:
    top = max(values)
    if len(values) == 1:
        return values[0]
    return top + math.log(math.fsum(math.exp(v - top) for v in values))


def _mixture_log_ratio(
    theta_hat: np.ndarray,
    cov: np.ndarray,
    theta0: np.ndarray,
    prior: MixtureNormalPrior,
) -> float:
    if theta_hat.shape[0] == 1:
        th = float(theta_hat[0])
        t0 = float(theta0[0])
        var = float(cov[0, 0])
        log_den = _log_normal_1d(th, t0, var)
        logs = [
            math.log(c.weight) + _log_normal_1d(th, float(c.mean[0]), var + float(c.cov[0, 0]))
            for c in prior.components
        ]
    else:
        log_den = log_mvn_pdf(theta_hat, theta0, cov)
        logs = [
            math.log(c.weight) + log_mvn_pdf(theta_hat, c.mean, cov + c.cov)
            for c in prior.components
        ]
    return float(_logsumexp(logs) - log_den)


def msprt_log_ratio(summary: GaussianSummary, prior: MixtureNormalPrior) -> float:
    """Log of the mixture likelihood ratio for a normally distributed estimate.

    The numerator sums ``w_i * phi(theta_hat | mu_i, cov + cov_i)`` over
    the prior components (as a log-sum-exp); the denominator is
    ``phi(theta_hat | theta0, cov)``.  If a factorization fails, a ridge
    of ``1e-12 * trace(cov)/d`` is added to the diagonal once and the
    computation retried before failing hard; near-singular covariances
    are routine at low sample sizes.

    Raises
    ------
    ValueError
        If the prior and summary dimensions disagree.
    FactorizationError
        If a covariance is not positive definite even after the ridge.
    """
    d = summary.dimension
    if prior.dimension != d:
        raise ValueError(
            f"prior dimension {prior.dimension} does not match summary dimension {d}"
        )
    try:
        return _mixture_log_ratio(summary.theta_hat, summary.cov, summary.theta0, prior)
    except FactorizationError:
        ridge = 1e-12 * float(np.trace(summary.cov)) / d
        ridged = summary.cov + ridge * np.eye(d)
        return _mixture_log_ratio(summary.theta_hat, ridged, summary.theta0, prior)


def scale_prior_to_effect_size(
    prior: MixtureNormalPrior, sigma_scale: float
) -> MixtureNormalPrior:
    """Map an effect-size prior onto the natural contrast scale.

    If the effect size has prior component ``N(mu, cov)`` then the
    contrast ``sigma_scale * effect`` has component
    ``N(sigma_scale * mu, sigma_scale**2 * cov)``.
    """
    sigma_scale = float(sigma_scale)
    if not math.isfinite(sigma_scale) or sigma_scale <= 0.0:
        raise ValueError(f"sigma_scale must be positive and finite, got {sigma_scale!r}")
    s2 = sigma_scale * sigma_scale
    components = tuple(
        PriorComponent(c.weight, c.mean * sigma_scale, c.cov * s2)
        for c in prior.components
    )
    return MixtureNormalPrior(components, scale="natural")


def prior_from_json(obj) -> MixtureNormalPrior:
    """Build a prior from the JSON document schema.

    Expected shape::

        {"dimension": d, "scale": "natural" | "effect_size",
         "components": [{"weight": w, "mean": [...], "cov": [[...]]}, ...]}

    Raises :class:`PriorFormatError` with the :func:`validate_prior`
    diagnostic on any invariant violation.
    """
    if not isinstance(obj, dict):
        raise PriorFormatError(f"prior document must be a JSON object, got {type(obj).__name__}")
    try:
        dimension = int(obj["dimension"])
        scale = obj.get("scale", "natural")
        raw_components = obj["components"]
    except KeyError as exc:
        raise PriorFormatError(f"prior document missing required key {exc}") from exc
    if not isinstance(raw_components, list) or not raw_components:
        raise PriorFormatError("prior document needs a non-empty 'components' list")
    components = []
    for i, raw in enumerate(raw_components):
        try:
            components.append(
                PriorComponent(float(raw["weight"]), raw["mean"], raw["cov"])
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PriorFormatError(f"component {i}: malformed entry ({exc})") from exc
    prior = MixtureNormalPrior(tuple(components), scale=scale)
    problem = validate_prior(prior)
    if problem is not None:
        raise PriorFormatError(problem)
    if prior.dimension != dimension:
        raise PriorFormatError(
            f"declared dimension {dimension} does not match component dimension "
            f"{prior.dimension}"
        )
    return prior


def prior_to_json(prior: MixtureNormalPrior) -> dict:
    """Inverse of :func:`prior_from_json`."""
    return {
        "dimension": prior.dimension,
        "scale": prior.scale,
        "components": [
            {
                "weight": c.weight,
                "mean": c.mean.tolist(),
                "cov": c.cov.tolist(),
            }
            for c in prior.components
        ],
    }


def load_prior_file(path) -> MixtureNormalPrior:
    """Load and validate a prior specification JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PriorFormatError(f"{path}: not valid JSON ({exc})") from exc
    return prior_from_json(obj)
