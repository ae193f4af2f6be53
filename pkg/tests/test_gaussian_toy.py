import math

import numpy as np
import pytest
import torch

from skillcomp.gaussian_toy import (
    GaussianToy,
    bound_estimates,
    fit_posteriors,
    random_toy,
    toy_bundle,
)
from skillcomp.errors import InvalidInputError
from skillcomp.latent_math import gaussian_entropy


def test_closed_form_matches_covariance_oracle(rng):
    for _ in range(25):
        toy = random_toy(rng)
        assert toy.analytic_mi() == pytest.approx(toy.mi_from_cov(), abs=1e-10)


def test_sample_covariance(rng):
    toy = GaussianToy(M=2, d=1, T=3, scale=1.5, noise=0.7)
    z, states = toy.sample(200_000, torch.Generator().manual_seed(0))
    x = torch.cat([z.reshape(len(z), -1), states.reshape(len(z), -1)], 1).numpy()
    emp = np.cov(x, rowvar=False)
    assert np.abs(emp - toy.joint_cov()).max() < 0.05 * toy.joint_cov().max()


def test_V_dist_entropy():
    toy = GaussianToy(M=3, d=2, T=2, scale=2.0, noise=1.0)
    expected = 2 * 0.5 * math.log(2 * math.pi * math.e * 3 * 4.0)
    assert float(gaussian_entropy(toy.V_dist())) == pytest.approx(expected, abs=1e-12)


def test_rejects_bad_parameters():
    with pytest.raises(InvalidInputError):
        GaussianToy(M=0, d=1, T=1, scale=1.0, noise=1.0)
    with pytest.raises(InvalidInputError):
        GaussianToy(M=1, d=1, T=1, scale=1.0, noise=0.0)


def test_v_prediction_error_decreases_monotonically():
    """Held-out V error falls at every one of the first 10 epochs in at least 4 of 5 seeds."""
    toy = GaussianToy(M=2, d=2, T=4, scale=1.5, noise=1.0)
    monotone = 0
    for seed in range(5):
        hist = fit_posteriors(toy_bundle(toy, seed), toy, 10, seed)
        monotone += all(b < a for a, b in zip(hist, hist[1:]))
    assert monotone >= 4


def test_fitted_bounds_are_below_mi():
    toy = GaussianToy(M=2, d=2, T=5, scale=2.0, noise=1.5)
    b = toy_bundle(toy, 0)
    fit_posteriors(b, toy, 40, 0, lr=1e-2, batch=256)
    est = bound_estimates(b, toy, 4000, 99)
    assert est["variational"] <= est["analytic_mi"] + 0.05
    assert est["variational"] > 0.5 * est["analytic_mi"]
    assert est["sample_as_written"] <= est["analytic_mi"] + 0.05
    assert est["sample_cross"] <= est["analytic_mi"] + 0.05
