import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aca.dataset import bg_impact
from aca.synth import (
    OutlierSpec,
    SynthConfig,
    generate_population,
    generate_synthetic,
    generate_synthetic_with_truth,
    load_synth_spec,
    true_response,
)


def impacts(records):
    return np.array([bg_impact(r.pre_bg, r.post_bg) for r in records])


def test_same_seed_same_records():
    cfg = SynthConfig(n=50, response="linear")
    assert generate_synthetic(cfg, 7) == generate_synthetic(cfg, 7)
    assert generate_synthetic(cfg, 7) != generate_synthetic(cfg, 8)


@pytest.mark.parametrize("response", ["linear", "quadratic", "piecewise-flat-with-outliers"])
def test_noiseless_impact_is_exact(response):
    cfg = SynthConfig(n=200, response=response, noise_sd=0.0)
    recs, truth = generate_synthetic_with_truth(cfg, 3)
    np.testing.assert_array_equal(impacts(recs), truth)
    again = true_response(cfg, *[[getattr(r, f) for r in recs] for f in ("carbs", "fat", "protein", "fiber", "pre_bg")])
    np.testing.assert_array_equal(again, truth)


def test_quadratic_truth_in_carbs():
    cfg = SynthConfig(n=100, response="quadratic", noise_sd=0.0)
    recs = generate_synthetic(cfg, 0)
    c = np.array([r.carbs for r in recs])
    np.testing.assert_allclose(impacts(recs), 0.025 * (c - 50) ** 2 - 10, atol=2.0**-10)


def test_exactly_two_fiber_outliers():
    cfg = SynthConfig(n=88, response="piecewise-flat-with-outliers", outliers=OutlierSpec("fiber", 50.0, 2))
    for seed in range(5):
        fiber = np.array([r.fiber for r in generate_synthetic(cfg, seed)])
        assert np.sum(fiber == 50.0) == 2
        assert np.sort(fiber)[-3] <= 15.0


def test_meal_counts_exact():
    counts = {"breakfast": 16, "lunch": 19, "dinner": 44, "other": 9}
    recs = generate_synthetic(SynthConfig(n=88, meal_counts=counts), 1)
    for t, n in counts.items():
        assert sum(r.meal_type == t for r in recs) == n


def test_heteroscedastic_noise_grows_with_carbs():
    cfg = SynthConfig(n=4000, response="linear", noise_sd=10.0, noise_law="heteroscedastic")
    recs, truth = generate_synthetic_with_truth(cfg, 2)
    c = np.array([r.carbs for r in recs])
    resid = impacts(recs) - truth
    assert resid[c < 20].std() < 0.5 * resid[c > 80].std()
    assert abs(resid.std() / 10.0 - np.sqrt(4 / 3)) < 0.1


def test_missing_rate():
    recs = generate_synthetic(SynthConfig(n=2000, missing_rate=0.2), 0)
    frac = np.mean([r.carbs is None for r in recs])
    assert 0.15 < frac < 0.25


@given(st.integers(1, 60), st.sampled_from(["linear", "quadratic", "piecewise-flat-with-outliers"]),
       st.floats(0, 30), st.integers(0, 2**32 - 1))
def test_records_valid(n, response, noise, seed):
    for r in generate_synthetic(SynthConfig(n=n, response=response, noise_sd=noise), seed):
        assert r.pre_bg > 0 and r.post_bg > 0
        assert all(v >= 0 for v in (r.carbs, r.fat, r.protein, r.fiber))


@pytest.mark.parametrize("bad", [dict(n=0), dict(noise_sd=-1.0), dict(response="cubic"),
                                 dict(meal_counts={"lunch": 3}), dict(noise_law="wild")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SynthConfig(**{"n": 10, **bad})


def test_spec_file_and_population(tmp_path):
    spec = {"users": [{"user_id": "A", "n": 5, "response": "quadratic"},
                      {"user_id": "B", "n": 7, "outliers": {"covariate": "fiber", "value": 50.0, "count": 1},
                       "laws": {"carbs": {"low": 10.0, "high": 20.0}}}]}
    p = tmp_path / "s.json"
    p.write_text(json.dumps(spec))
    cfgs = load_synth_spec(p)
    assert [c.user_id for c in cfgs] == ["A", "B"]
    assert SynthConfig.from_dict(cfgs[1].to_dict()) == cfgs[1]
    recs = generate_population(cfgs, 4)
    assert len(recs) == 12
    assert all(10 <= r.carbs <= 20 for r in recs if r.user_id == "B")
    assert recs == generate_population(cfgs, 4)


def test_duplicate_user_ids_rejected(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"users": [{"user_id": "A", "n": 5}, {"user_id": "A", "n": 5}]}))
    with pytest.raises(ValueError):
        load_synth_spec(p)
