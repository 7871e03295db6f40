import warnings

import numpy as np
import pytest
from conftest import random_model

from ghhdet.ghh import GhhModel, model_from_dict, model_to_dict, score_map
from ghhdet.imagekit import FeatureStack
from ghhdet.sepfilters import BankMismatch, SeparableBank, approximate_separable, score_map_separable


def _separable_model(rng, n=2, m=2, c=2, p=7):
    w = np.einsum("nmci,nmcj->nmcij", rng.normal(size=(n, m, c, p)), rng.normal(size=(n, m, c, p)))
    return GhhModel(w, rng.normal(size=(n, m)), rng.choice([-1.0, 1.0], size=n))


def test_separable_filters_exact(rng):
    model = _separable_model(rng)
    bank = approximate_separable(model, 4)
    assert bank.total_error <= 1e-8
    fs = rng.normal(size=(2, 30, 26))
    np.testing.assert_allclose(score_map_separable(model, bank, fs).scores, score_map(model, fs).scores, atol=1e-8)


def test_full_rank_is_exact(rng):
    model = random_model(rng, n=2, m=2, c=6, p=5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        bank = approximate_separable(model, 5 * 2 * 2)
    assert bank.total_error <= 1e-6
    np.testing.assert_allclose(bank.reconstruct(), model.weights, atol=1e-9)
    fs = FeatureStack(rng.normal(size=(6, 24, 24)))
    diff = score_map_separable(model, bank, fs).scores - score_map(model, fs).scores
    assert np.max(np.abs(diff)) <= 1e-6


def test_error_monotone_in_s(rng):
    model = random_model(rng, n=2, m=2, c=1, p=7)
    errs = [approximate_separable(model, s).total_error for s in (1, 2, 4, 8, 16, 28)]
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))
    assert errs[-1] <= 1e-8 and errs[0] > errs[-1]


def test_invariants_and_error_bound(rng):
    model = random_model(rng, n=2, m=3, c=2, p=5)
    bank = approximate_separable(model, 3)
    for c in range(2):
        assert bank.rows[c].shape[1] == 5 and bank.cols[c].shape[1] == 5
        assert bank.coefficients[c].shape == (2, 3, len(bank.rows[c]))
    rec = bank.reconstruct()
    np.testing.assert_allclose(np.sqrt(np.sum((rec - model.weights) ** 2, axis=(3, 4))), bank.errors, atol=1e-10)
    fs = rng.normal(size=(2, 25, 25))
    diff = np.abs(score_map_separable(model, bank, fs).scores - score_map(model, fs).scores)
    mask = score_map(model, fs).interior_mask()
    r = model.radius
    feat_norm = max(np.linalg.norm(fs[:, y - r : y + r + 1, x - r : x + r + 1]) for y, x in zip(*np.nonzero(mask)))
    # each component's max moves by at most its worst hyperplane error
    bound = sum(np.sqrt(np.sum(bank.errors[n] ** 2, axis=1)).max() for n in range(2)) * feat_norm
    assert diff[mask].max() <= bound + 1e-9


def test_clamp_and_errors(rng):
    model = random_model(rng, n=1, m=1, c=1, p=3)
    with pytest.warns(RuntimeWarning):
        bank = approximate_separable(model, 50)
    assert bank.S == 3
    with pytest.raises(ValueError):
        approximate_separable(model, 0)


def test_bank_mismatch(rng):
    model = random_model(rng, n=1, m=2, c=2, p=3)
    other = random_model(rng, n=1, m=2, c=2, p=3)
    bank = approximate_separable(model, 2)
    with pytest.raises(BankMismatch):
        score_map_separable(other, bank, rng.normal(size=(2, 10, 10)))


def test_bank_round_trip_inside_model(rng):
    from dataclasses import replace

    model = random_model(rng, n=2, m=2, c=2, p=5)
    model = replace(model, separable=approximate_separable(model, 3))
    back = model_from_dict(model_to_dict(model))
    assert isinstance(back.separable, SeparableBank)
    fs = rng.normal(size=(2, 16, 16))
    np.testing.assert_array_equal(
        score_map_separable(back, back.separable, fs).scores, score_map_separable(model, model.separable, fs).scores
    )


def test_row_partitioning(rng):
    model = random_model(rng, n=2, m=2, c=2, p=5)
    bank = approximate_separable(model, 3)
    fs = rng.normal(size=(2, 31, 17))
    ref = score_map_separable(model, bank, fs).scores
    np.testing.assert_array_equal(score_map_separable(model, bank, fs, jobs=4).scores, ref)
