import math

import numpy as np
import pytest
import torch

from skillcomp.errors import InvalidInputError, NonFiniteLossError, ValidationError
from skillcomp.evaluation import METRIC_COLUMNS, eval_composite
from skillcomp.model import ModelConfig, init_parameters
from skillcomp.objectives import ObjectiveConfig, elbo_terms
from skillcomp.synthdata import Dataset, default_manifest, generate_dataset
from skillcomp.training import TrainConfig, resolve_model_config, train, train_one, training_set

SMALL_MODEL = ModelConfig(2, 2, 2, encoder_hidden=8, attention_dim=4, policy_hidden=8, dynamics_hidden=8)


def flat(bundle):
    return torch.cat([p.detach().reshape(-1) for p in bundle.state_dict().values()])


class TestTrainConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.batch_size, c.learning_rate, c.seeds, c.eval_every) == (200, 16, 1e-3, (0, 1, 2, 3, 4), 5)

    def test_dict_round_trip(self):
        c = TrainConfig(ObjectiveConfig("reg_variational", lam=2.0), epochs=3, seeds=[4, 5])
        assert TrainConfig.from_dict(c.to_dict()) == c
        assert c.to_dict()["objective_config"]["lambda"] == 2.0

    @pytest.mark.parametrize("kw", [{"epochs": -1}, {"batch_size": 0}, {"learning_rate": 0.0},
                                    {"eval_every": 0}, {"seeds": []}])
    def test_rejects(self, kw):
        with pytest.raises(InvalidInputError):
            TrainConfig(**kw)


def test_variational_objective_gets_aux():
    tc = TrainConfig(ObjectiveConfig("reg_variational"))
    assert resolve_model_config(SMALL_MODEL, tc).with_aux
    assert not resolve_model_config(SMALL_MODEL, TrainConfig()).with_aux


def test_training_set_excludes_composites(small_dataset):
    ids = {t.skill_id for t in training_set(small_dataset, TrainConfig())}
    assert ids == set(small_dataset.subskill_ids())
    assert len(training_set(small_dataset, TrainConfig(train_on_composites=True))) == len(small_dataset.trajectories)


def test_epoch_zero_is_initialization(small_dataset):
    res = train_one(small_dataset, TrainConfig(epochs=0), SMALL_MODEL, 3)
    assert torch.equal(flat(res.bundle), flat(init_parameters(SMALL_MODEL, 3)))
    assert [r["epoch"] for r in res.metrics] == [0]


def test_fresh_kl_near_zero(small_dataset):
    b = init_parameters(ModelConfig(2, 2, 4), 0)
    states = torch.stack([torch.from_numpy(t.states) for t in small_dataset.trajectories])
    actions = torch.stack([torch.from_numpy(t.actions) for t in small_dataset.trajectories])
    kl = elbo_terms(b, states, actions, torch.Generator().manual_seed(0))["kl"]
    assert float(kl.abs().max()) < 0.5


@pytest.mark.parametrize("objective", ["original", "reg_variational", "reg_nonvariational"])
def test_deterministic_and_well_formed(small_dataset, objective):
    tc = TrainConfig(ObjectiveConfig(objective, lam=1.0, n_mc=2), epochs=3, eval_every=2, batch_size=8, seeds=(0, 1))
    a = train(small_dataset, tc, SMALL_MODEL)
    b = train(small_dataset, tc, SMALL_MODEL)
    assert [r.seed for r in a] == [0, 1]
    for ra, rb in zip(a, b):
        assert ra.metrics == rb.metrics
        assert torch.equal(flat(ra.bundle), flat(rb.bundle))
        epochs = [m["epoch"] for m in ra.metrics]
        assert epochs == [0, 2, 3]
        for m in ra.metrics:
            assert set(m) == set(METRIC_COLUMNS)
            assert all(math.isfinite(m[c]) for c in METRIC_COLUMNS[4:])
            assert m["kl"] >= 0
            assert (m["mi_term"] != 0) == (objective != "original")
    assert not torch.equal(flat(a[0].bundle), flat(a[1].bundle))


def test_non_finite_loss_aborts_with_diagnostics(small_dataset):
    tc = TrainConfig(epochs=2, learning_rate=1e300, grad_clip=1e300, seeds=(0,))
    with pytest.raises(NonFiniteLossError) as info:
        train_one(small_dataset, tc, SMALL_MODEL, 0)
    assert info.value.epoch >= 1 and info.value.components


def test_missing_subskill_demos_rejected(small_dataset):
    trimmed = Dataset([t for t in small_dataset.trajectories if t.skill_id != "move_up"], small_dataset.manifest)
    with pytest.raises(ValidationError):
        train_one(trimmed, TrainConfig(epochs=1), SMALL_MODEL, 0)


@pytest.fixture(scope="module")
def diag_runs():
    ds = generate_dataset(default_manifest("diag"))
    return ds, train(ds, TrainConfig(epochs=200, eval_every=50), ModelConfig(2, 2, 4))


@pytest.mark.slow
def test_training_reduces_loss_on_diag(diag_runs):
    _, runs = diag_runs
    for r in runs:
        assert r.metrics[-1]["train_loss"] < r.metrics[0]["train_loss"]


@pytest.mark.slow
def test_trained_encode_mse_beats_untrained(diag_runs):
    ds, runs = diag_runs
    comp = ds.compositions[0]
    by_skill = {s: ds.by_skill(s) for s in ds.manifest.skill_ids()}
    demos = by_skill[comp.composite_id]
    for r in runs:
        fresh = init_parameters(r.bundle.config, r.seed)
        trained = eval_composite(r.bundle, comp, by_skill, demos, "encode")["mse_mean"]
        untrained = eval_composite(fresh, comp, by_skill, demos, "encode")["mse_mean"]
        assert trained <= untrained
