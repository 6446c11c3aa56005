import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aorfair.data import GroupLabeledDataset, daisee_skew_preset, generate_task_dataset, uniform_subset
from aorfair.fairmetrics import (DegenerateDistributionError, EmptyGroupError, REPORT_SCHEMA, baselines,
                                 build_report, f1_table, group_distribution_pcc,
                                 group_prediction_distributions, group_saliency_divergence,
                                 input_saliency, pearson, total_variation, uniform_subset_eval,
                                 validate_report)
from aorfair.model import SplitModelConfig, build_split_model


def test_published_vectors():
    assert pearson([0, 0, 0.77, 0.23], [0, 0, 0.57, 0.43]) == pytest.approx(0.8975, abs=1e-4)


def test_pearson_scalar_oracle(rng):
    u, v = rng.standard_normal(6), rng.standard_normal(6)
    mu, mv = sum(u) / 6, sum(v) / 6
    num = sum((a - mu) * (b - mv) for a, b in zip(u, v))
    den = np.sqrt(sum((a - mu) ** 2 for a in u) * sum((b - mv) ** 2 for b in v))
    assert pearson(u, v) == pytest.approx(num / den, abs=1e-14)


vec = arrays(np.float64, 4, elements=st.floats(-100, 100, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(vec, vec, st.floats(0.01, 100), st.floats(-100, 100))
def test_pearson_properties(u, v, a, b):
    try:
        r = pearson(u, v)
    except DegenerateDistributionError:
        return
    if min(np.ptp(u), np.ptp(v)) < 1e-6:
        return
    assert -1.0 <= r <= 1.0
    assert r == pytest.approx(pearson(v, u), abs=1e-12)
    assert r == pytest.approx(pearson(a * u + b, v), abs=1e-6)


def test_pearson_constant_vector():
    with pytest.raises(DegenerateDistributionError):
        pearson([0.25] * 4, [0.1, 0.2, 0.3, 0.4])


def test_group_distributions_and_pcc():
    pred = np.array([2, 2, 3, 2, 3, 3, 1, 2])
    g = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    d0, d1 = group_prediction_distributions(pred, g)
    np.testing.assert_allclose(d0.proportions, [0, 0, 0.75, 0.25])
    np.testing.assert_allclose(d1.proportions, [0, 0.25, 0.25, 0.5])
    assert group_distribution_pcc(pred, g) == pytest.approx(pearson(d0.proportions, d1.proportions))
    assert total_variation(d0.proportions, d1.proportions) == pytest.approx(0.5)
    with pytest.raises(EmptyGroupError):
        group_prediction_distributions(pred, np.zeros(8, dtype=int))


def test_group_blind_predictor_gives_pcc_near_one(rng):
    g = rng.integers(0, 2, 200000)
    pred = rng.choice(4, size=g.size, p=[0.05, 0.1, 0.5, 0.35])
    assert group_distribution_pcc(pred, g) > 0.999


def test_f1_table_oracle():
    true = np.array([0, 1, 2, 2, 3, 0, 2, 3])
    pred = np.array([0, 2, 2, 2, 2, 1, 2, 3])
    g = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    t = f1_table(pred, true, g)
    assert t.shape == (4, 2)
    # group 0: class 0 tp=1 -> 1.0; class 1 never predicted nor correct -> tp=0, fn=1 -> 0
    assert t[0, 0] == 1.0 and t[1, 0] == 0.0
    # group 0 class 2: tp=2, fp=1, fn=0 -> 4/5
    assert t[2, 0] == pytest.approx(0.8)
    # group 0 class 3: absent from both -> 0/0 -> 0
    assert t[3, 0] == 0.0
    perm = rng_perm = np.random.default_rng(0).permutation(8)
    np.testing.assert_array_equal(f1_table(pred[perm], true[perm], g[perm]), t)
    del rng_perm


def test_baselines():
    ds = GroupLabeledDataset(np.zeros((6, 1)), [0, 1, 0, 1, 0, 1], [2, 2, 2, 3, 1, 0])
    b = baselines(ds)
    assert b.uniform == 0.25 and b.mode == 0.5 and b.mode_level == 2


def test_uniform_subset_eval_matches_manual_mean():
    ds = generate_task_dataset(daisee_skew_preset(n=20000))
    w = np.random.default_rng(0).standard_normal(ds.n_features)

    def fn(X):
        return np.digitize(X @ w, [-1.0, 0.0, 1.0])

    res = uniform_subset_eval(fn, ds, per_cell=21, repeats=10, seed=7)
    manual = np.zeros((2, 4))
    for r in range(10):
        sub = uniform_subset(ds, 21, 7 + r)
        d0, d1 = group_prediction_distributions(fn(sub.X), sub.g)
        manual += np.stack([d0.proportions, d1.proportions])
    manual /= 10
    assert np.abs(res.dist_g0 - manual[0]).max() <= 1e-12
    assert np.abs(res.dist_g1 - manual[1]).max() <= 1e-12
    assert res.subset_size == 168


def test_uniform_subset_eval_variance_shrinks_with_repeats():
    ds = generate_task_dataset(daisee_skew_preset(n=20000))
    w = np.random.default_rng(1).standard_normal(ds.n_features)

    def fn(X):
        return np.digitize(X @ w, [-1.0, 0.0, 1.0])

    v1 = np.var([uniform_subset_eval(fn, ds, 21, 1, seed=100 * t).dist_g0[2] for t in range(100)])
    v4 = np.var([uniform_subset_eval(fn, ds, 21, 4, seed=100 * t).dist_g0[2] for t in range(100)])
    assert 0.1 < v4 / v1 < 0.5


def test_input_saliency_finite_differences(small_model, rng):
    x = rng.standard_normal((1, 6))
    s = input_saliency(small_model, x)
    c = int(np.argmax(small_model.task_logits(x)))
    h = 1e-6
    for j in range(6):
        e = np.zeros_like(x)
        e[0, j] = h
        num = (small_model.task_logits(x + e)[0, c] - small_model.task_logits(x - e)[0, c]) / (2 * h)
        assert s[0, j] == pytest.approx(num, abs=1e-6)
    assert all(not p.grad.any() for p in small_model.parameters())


def test_saliency_report(small_model, rng):
    ds = GroupLabeledDataset(rng.standard_normal((40, 6)), np.arange(40) % 2, np.arange(40) % 4)
    rep = group_saliency_divergence(small_model, ds, sample_cap=10)
    assert -1.0 <= rep.cosine_similarity <= 1.0
    assert rep.block_share(slice(0, 6)) == pytest.approx(1.0)


def test_report_schema_and_outputs(tmp_path, preset_small):
    spec, _, val, _ = preset_small
    model = build_split_model(SplitModelConfig())
    rep = build_report(model, val, per_cell=21, repeats=3, seed=0, saliency_cap=50,
                       spurious_block=spec.spurious_slice)
    doc = rep.to_dict()
    validate_report(doc)
    assert doc["baseline_uniform"] == 0.25
    assert set(doc["extensions"]) >= {"total_variation", "saliency_cosine", "saliency_spurious_share"}
    back = json.loads(rep.write_json(tmp_path / "r.json").read_text())
    assert back == json.loads(json.dumps(doc))
    lines = rep.write_f1_csv(tmp_path / "f1.csv").read_text().splitlines()
    assert lines[0] == "set,class_0,class_1,class_2,class_3" and len(lines) == 3


def test_report_per_cell_clamped_to_sparsest_cell(preset_small):
    _, _, val, _ = preset_small
    rep = build_report(build_split_model(SplitModelConfig()), val, per_cell=10_000, repeats=2)
    assert rep.uniform_subset_eval.per_cell == int(val.cell_counts().min())


def test_schema_rejects_malformed():
    with pytest.raises(jsonschema.ValidationError):
        validate_report({"dist_g0": {"group": 0, "proportions": [1, 0, 0]}})
    assert "dist_g1" in REPORT_SCHEMA["required"]
