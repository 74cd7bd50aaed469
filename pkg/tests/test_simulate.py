"""Unit tests for the Monte Carlo harness and its diagnostics."""

import json

import numpy as np
import pytest

from msprt.engine import TestConfig
from msprt.priors import MixtureNormalPrior, PriorComponent
from msprt.simulate import (
    GeneratorSpec,
    ScenarioSpec,
    child_seed,
    covariance_diagnostic,
    martingale_diagnostic,
    run_scenario,
)


def _prop_diff_config(m=2, **overrides):
    base = dict(
        alpha=0.05,
        metric="prop_diff",
        m=m,
        prior=MixtureNormalPrior.single([0.0] * (m - 1), np.eye(m - 1), scale="effect_size"),
        batch_interval=100,
        burn_in=200,
    )
    base.update(overrides)
    return TestConfig(**base)


def _null_bernoulli(reps=40, max_n=1200, seed=13, p=0.3, q=(0.5, 0.5)):
    return ScenarioSpec(GeneratorSpec("bernoulli", p=(p,) * len(q)), q, max_n, reps, seed)


# -----------------------------------------------------------------------
# seeding
# -----------------------------------------------------------------------


def test_child_seed_is_deterministic_and_spread():
    assert child_seed(42, 0) == child_seed(42, 0)
    seeds = {child_seed(42, r) for r in range(1000)}
    assert len(seeds) == 1000
    assert child_seed(42, 0) != child_seed(43, 0)
    assert all(0 <= child_seed(7, r) < 2**64 for r in range(10))


# -----------------------------------------------------------------------
# generators
# -----------------------------------------------------------------------


def test_generator_validation():
    with pytest.raises(ValueError, match="kind"):
        GeneratorSpec("triangular", p=(0.5,))
    with pytest.raises(ValueError, match="requires"):
        GeneratorSpec("normal", mu=(0.0, 0.0))
    with pytest.raises(ValueError, match="does not take"):
        GeneratorSpec("bernoulli", p=(0.5, 0.5), mu=(0.0, 0.0))
    with pytest.raises(ValueError, match="arm count"):
        GeneratorSpec("normal", mu=(0.0, 0.0), sigma=(1.0,))
    with pytest.raises(ValueError, match="sum to 1"):
        GeneratorSpec("ordinal", probs=((0.5, 0.4), (0.5, 0.5)))
    with pytest.raises(ValueError, match="high > low"):
        GeneratorSpec("uniform", low=(0.0, 1.0), high=(1.0, 1.0))


def test_generator_samples_follow_arm_parameters():
    rng = np.random.default_rng(1)
    gen = GeneratorSpec("normal", mu=(0.0, 5.0), sigma=(1.0, 1.0))
    arms = np.array([0] * 4000 + [1] * 4000)
    values = gen.sample(rng, arms)
    assert abs(values[:4000].mean()) < 0.1
    assert abs(values[4000:].mean() - 5.0) < 0.1

    bern = GeneratorSpec("bernoulli", p=(0.2, 0.8))
    draws = bern.sample(np.random.default_rng(2), arms)
    assert set(np.unique(draws)) <= {0.0, 1.0}
    assert abs(draws[:4000].mean() - 0.2) < 0.05
    assert abs(draws[4000:].mean() - 0.8) < 0.05

    logn = GeneratorSpec("lognormal", mu=(0.0, 0.0), sigma=(1.0, 1.0))
    assert (logn.sample(np.random.default_rng(3), arms) > 0).all()

    unif = GeneratorSpec("uniform", low=(2.0, 0.0), high=(3.0, 1.0))
    u = unif.sample(np.random.default_rng(4), arms)
    assert ((u[:4000] >= 2.0) & (u[:4000] <= 3.0)).all()

    ordn = GeneratorSpec("ordinal", probs=((0.2, 0.5, 0.3), (0.6, 0.2, 0.2)))
    o = ordn.sample(np.random.default_rng(5), arms)
    assert set(np.unique(o)) <= {0.0, 1.0, 2.0}
    assert o[:4000].mean() > o[4000:].mean()


def test_generator_json_round_trip():
    gen = GeneratorSpec("ordinal", probs=((0.2, 0.8), (0.5, 0.5)))
    assert GeneratorSpec.from_json(gen.to_json()) == gen


# -----------------------------------------------------------------------
# scenarios
# -----------------------------------------------------------------------


def test_scenario_validation():
    gen = GeneratorSpec("bernoulli", p=(0.3, 0.3))
    with pytest.raises(ValueError, match="allocation"):
        ScenarioSpec(gen, (0.5, 0.2), 100, 10, 0)
    with pytest.raises(ValueError, match="positive"):
        ScenarioSpec(gen, (1.5, -0.5), 100, 10, 0)
    with pytest.raises(ValueError, match="replications"):
        ScenarioSpec(gen, (0.5, 0.5), 100, 0, 0)
    with pytest.raises(ValueError, match="allocation has"):
        ScenarioSpec(gen, (0.4, 0.3, 0.3), 100, 10, 0)


def test_scenario_json_round_trip(tmp_path):
    spec = _null_bernoulli()
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(spec.to_json()))
    assert ScenarioSpec.load(path) == spec


# -----------------------------------------------------------------------
# run_scenario
# -----------------------------------------------------------------------


def test_run_scenario_rejects_arm_mismatch():
    spec = ScenarioSpec(GeneratorSpec("bernoulli", p=(0.3, 0.3, 0.3)), (0.4, 0.3, 0.3), 1200, 5, 0)
    with pytest.raises(ValueError, match="arms"):
        run_scenario(spec, _prop_diff_config(m=2), jobs=1)


def test_run_scenario_rejects_horizon_below_burn_in():
    spec = _null_bernoulli(max_n=150)
    with pytest.raises(ValueError, match="burn-in"):
        run_scenario(spec, _prop_diff_config(), jobs=1)


def test_run_scenario_deterministic_and_scheduling_independent():
    spec = _null_bernoulli(reps=30, max_n=600)
    config = _prop_diff_config(burn_in=100)
    first = run_scenario(spec, config, jobs=1, keep_records=True)
    again = run_scenario(spec, config, jobs=1, keep_records=True)
    parallel = run_scenario(spec, config, jobs=2, keep_records=True)
    assert first.to_json() == again.to_json() == parallel.to_json()


def test_run_scenario_strong_alternative_always_rejects():
    spec = ScenarioSpec(GeneratorSpec("bernoulli", p=(0.1, 0.6)), (0.5, 0.5), 4000, 20, 3)
    report = run_scenario(spec, _prop_diff_config(), jobs=1)
    assert report.rejection_rate == 1.0
    assert report.stopping_time["mean"] < 4000
    assert report.stopping_time["quantiles"]["p90"] <= 4000


def test_run_scenario_null_rarely_rejects():
    report = run_scenario(_null_bernoulli(reps=60, max_n=2000), _prop_diff_config(), jobs=2)
    assert report.rejection_rate <= 0.1


def test_run_scenario_lambda_checkpoints():
    spec = _null_bernoulli(reps=25, max_n=600)
    report = run_scenario(
        spec, _prop_diff_config(burn_in=100), jobs=1, lambda_checkpoints=[200, 400]
    )
    assert set(report.lambda_mean_at) == {200, 400}
    for mean, se in report.lambda_mean_at.values():
        assert mean > 0.0 and se >= 0.0


def test_report_serialization_and_table():
    report = run_scenario(_null_bernoulli(reps=10, max_n=400), _prop_diff_config(), jobs=1)
    doc = report.to_json()
    assert json.dumps(doc)  # JSON-serializable
    assert doc["replications"] == 10
    table = report.format_table()
    assert "rejection_rate" in table


# -----------------------------------------------------------------------
# martingale diagnostic
# -----------------------------------------------------------------------


def test_martingale_diagnostic_point_mass_is_identity():
    """A point mass at the null makes the ratio identically 1."""
    spec = ScenarioSpec(
        GeneratorSpec("normal", mu=(0.0, 0.0), sigma=(1.0, 1.0)), (0.5, 0.5), 200, 50, 5
    )
    prior = MixtureNormalPrior((PriorComponent(1.0, [0.0], [[0.0]]),))
    result = martingale_diagnostic(spec, prior, [10, 100, 200])
    for mean, se in result.values():
        assert mean == 1.0
        assert se == 0.0


def test_martingale_diagnostic_mean_near_one():
    spec = ScenarioSpec(
        GeneratorSpec("normal", mu=(1.0, 1.0), sigma=(2.0, 2.0)), (0.5, 0.5), 500, 3000, 17
    )
    prior = MixtureNormalPrior.single([0.0], [[0.004]])
    result = martingale_diagnostic(spec, prior, [10, 100, 500])
    for n, (mean, se) in result.items():
        assert abs(mean - 1.0) < 4.0 * se, (n, mean, se)


def test_martingale_diagnostic_requires_null_normal():
    prior = MixtureNormalPrior.single([0.0], [[0.01]])
    shifted = ScenarioSpec(
        GeneratorSpec("normal", mu=(0.0, 1.0), sigma=(1.0, 1.0)), (0.5, 0.5), 200, 5, 0
    )
    with pytest.raises(ValueError, match="null"):
        martingale_diagnostic(shifted, prior, [100])
    bern = _null_bernoulli()
    with pytest.raises(ValueError, match="normal"):
        martingale_diagnostic(bern, prior, [100])


# -----------------------------------------------------------------------
# covariance diagnostic
# -----------------------------------------------------------------------


def test_covariance_diagnostic_prop_diff_smoke():
    spec = _null_bernoulli(reps=3000, seed=23, p=0.5)
    diag = covariance_diagnostic(spec, "prop_diff", 500)
    assert diag.empirical.shape == (1, 1)
    assert diag.max_relative_error < 0.15
    assert diag.plugin_mean[0, 0] == pytest.approx(2 * 0.25 / 500, rel=0.05)
    assert "prop_diff" in diag.format_table()


def test_covariance_diagnostic_auc_smoke():
    spec = ScenarioSpec(
        GeneratorSpec("uniform", low=(0.0, 0.0), high=(1.0, 1.0)), (0.5, 0.5), 100, 2500, 29
    )
    diag = covariance_diagnostic(spec, "auc", 400)
    assert diag.max_relative_error < 0.15


def test_covariance_diagnostic_requires_null():
    spec = ScenarioSpec(GeneratorSpec("bernoulli", p=(0.4, 0.5)), (0.5, 0.5), 100, 10, 0)
    with pytest.raises(ValueError, match="null"):
        covariance_diagnostic(spec, "prop_diff", 100)
