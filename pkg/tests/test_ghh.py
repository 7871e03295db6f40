import json

import numpy as np
import pytest
from conftest import random_model

from ghhdet.ghh import (
    GhhModel,
    active_index,
    hyperplane_responses,
    load_model,
    model_from_dict,
    model_to_dict,
    save_model,
    score_map,
    score_patch,
)
from ghhdet.imagekit import DimensionError, FeatureStack


def _brute_score(model, patch):
    total = 0.0
    for n in range(model.weights.shape[0]):
        best = -np.inf
        for m in range(model.weights.shape[1]):
            acc = model.biases[n, m]
            for c, row, col in np.ndindex(patch.shape):
                acc += model.weights[n, m, c, row, col] * patch[c, row, col]
            best = max(best, acc)
        total += model.delta[n] * best
    return total


def test_degenerate_model_is_linear(rng):
    w = rng.normal(size=(1, 1, 6, 5, 5))
    model = GhhModel(w, [[0.7]], [1.0])
    x = rng.normal(size=(6, 5, 5))
    assert score_patch(model, x) == pytest.approx(float(np.sum(w[0, 0] * x)) + 0.7, rel=1e-12)


def test_zero_filters_give_constant(rng):
    b = rng.normal(size=(3, 4))
    d = np.array([1.0, -1.0, 1.0])
    model = GhhModel(np.zeros((3, 4, 6, 5, 5)), b, d)
    expect = float(np.sum(d * b.max(axis=1)))
    assert score_patch(model, rng.normal(size=(6, 5, 5))) == pytest.approx(expect, abs=1e-12)
    fs = FeatureStack(np.full((6, 12, 14), 0.3))
    smap = score_map(model, fs)
    np.testing.assert_allclose(smap.scores, expect, atol=1e-12)


def test_patch_score_against_loops(rng):
    model = random_model(rng, n=4, m=4, c=6, p=5)
    for _ in range(5):
        x = rng.normal(size=(6, 5, 5))
        assert score_patch(model, x) == pytest.approx(_brute_score(model, x), rel=1e-12, abs=1e-12)


def test_patch_dimension_mismatch(rng):
    model = random_model(rng, c=6, p=5)
    with pytest.raises(DimensionError):
        score_patch(model, np.zeros((6, 7, 7)))


def test_sliding_window_matches_patches(rng):
    for _ in range(3):
        model = random_model(rng, n=3, m=2, c=6, p=7)
        fs = FeatureStack(rng.normal(size=(6, 20, 24)))
        smap = score_map(model, fs)
        r = model.radius
        assert smap.border == r
        for y in range(r, 20 - r):
            for x in range(r, 24 - r):
                expect = score_patch(model, fs.patch(x, y, r))
                assert abs(smap.scores[y, x] - expect) <= 1e-9 * (1 + abs(expect))


def test_interior_mask(rng):
    model = random_model(rng, c=6, p=5)
    smap = score_map(model, FeatureStack(rng.normal(size=(6, 10, 12))))
    mask = smap.interior_mask()
    assert mask.sum() == (10 - 4) * (12 - 4)
    assert not mask[1, 5] and mask[2, 2]
    assert np.all(np.isfinite(smap.scores[mask]))


def test_image_smaller_than_patch(rng):
    model = random_model(rng, c=6, p=7)
    with pytest.raises(DimensionError):
        score_map(model, FeatureStack(rng.normal(size=(6, 5, 30))))


def test_row_partitioning_does_not_change_result(rng):
    model = random_model(rng, n=2, m=3, c=6, p=5)
    fs = FeatureStack(rng.normal(size=(6, 33, 21)))
    ref = score_map(model, fs, jobs=1).scores
    for jobs in (2, 3, 7):
        np.testing.assert_array_equal(score_map(model, fs, jobs=jobs).scores, ref)


def test_active_index_single_hyperplane(rng):
    model = random_model(rng, n=2, m=1, c=6, p=3)
    assert active_index(model, rng.normal(size=(6, 3, 3)), 1) == 0


def test_active_index_tie_goes_low(rng):
    w = rng.normal(size=(1, 1, 6, 3, 3))
    model = GhhModel(np.concatenate([w, w, w], axis=1), [[0.0, 0.0, 0.0]], [1.0])
    assert active_index(model, rng.normal(size=(6, 3, 3)), 0) == 0


def test_active_index_brute_force(rng):
    model = random_model(rng, n=3, m=5, c=6, p=3)
    for _ in range(10):
        x = rng.normal(size=(6, 3, 3))
        for n in range(3):
            vals = [np.sum(model.weights[n, m] * x) + model.biases[n, m] for m in range(5)]
            assert active_index(model, x, n) == int(np.argmax(vals))


def test_component_convexity(rng):
    model = random_model(rng, n=3, m=4, c=6, p=3)
    for _ in range(50):
        x, y = rng.normal(size=(2, 6, 3, 3))
        fx = hyperplane_responses(model, x).max(axis=1)
        fy = hyperplane_responses(model, y).max(axis=1)
        fm = hyperplane_responses(model, 0.5 * (x + y)).max(axis=1)
        assert np.all(fm <= 0.5 * (fx + fy) + 1e-9)


def test_invalid_models():
    with pytest.raises(ValueError):
        GhhModel(np.zeros((1, 1, 6, 3, 3)), [[0.0]], [0.5])
    with pytest.raises(DimensionError):
        GhhModel(np.zeros((1, 1, 6, 4, 4)), [[0.0]], [1.0])
    with pytest.raises(ValueError):
        GhhModel(np.full((1, 1, 6, 3, 3), np.nan), [[0.0]], [1.0])
    with pytest.raises(DimensionError):
        GhhModel(np.zeros((1, 2, 6, 3, 3)), [[0.0]], [1.0])


def test_model_is_immutable(rng):
    model = random_model(rng, c=6, p=3)
    with pytest.raises(ValueError):
        model.weights[0, 0, 0, 0, 0] = 1.0


def test_serialization_round_trip(tmp_path, rng):
    model = random_model(rng, n=4, m=4, c=6, p=5)
    norm = np.column_stack([rng.normal(size=6), rng.uniform(0.5, 2, size=6)])
    model = GhhModel(model.weights, model.biases, model.delta, norm)
    path = tmp_path / "model.json"
    save_model(model, path, extra={"config": {"seed": 3}})
    back = load_model(path)
    np.testing.assert_array_equal(back.weights, model.weights)
    np.testing.assert_array_equal(back.biases, model.biases)
    np.testing.assert_array_equal(back.normalization, model.normalization)
    assert back.fingerprint() == model.fingerprint()
    for _ in range(5):
        x = rng.normal(size=(6, 5, 5))
        assert score_patch(back, x) == score_patch(model, x)
    doc = json.loads(path.read_text())
    assert doc["version"] == 1 and doc["config"] == {"seed": 3}


def test_schema_rejects_bad_documents(rng):
    import jsonschema

    doc = model_to_dict(random_model(rng, c=6, p=3))
    del doc["delta"]
    with pytest.raises(jsonschema.ValidationError):
        model_from_dict(doc)
    doc = model_to_dict(random_model(rng, c=6, p=3))
    doc["filters"][0][0]["channels"][0] = doc["filters"][0][0]["channels"][0][:-1]
    with pytest.raises((DimensionError, jsonschema.ValidationError)):
        model_from_dict(doc)
