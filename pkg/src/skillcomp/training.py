"""Deterministic multi-seed training of the trajectory VAE."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import InvalidInputError, NonFiniteLossError, NonFiniteValueError, ValidationError
from .evaluation import eval_composite, mean_additivity_error
from .model import ModelBundle, ModelConfig, init_parameters
from .objectives import ObjectiveConfig, regularized_loss
from .synthdata import Dataset

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    objective_config: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    seeds: tuple = (0, 1, 2, 3, 4)
    eval_every: int = 5
    grad_clip: float = 10.0
    train_on_composites: bool = False

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if int(self.epochs) < 0:
            raise InvalidInputError("epochs must be >= 0")
        if int(self.batch_size) < 1 or int(self.eval_every) < 1:
            raise InvalidInputError("batch_size and eval_every must be >= 1")
        if not self.learning_rate > 0 or not self.grad_clip > 0:
            raise InvalidInputError("learning_rate and grad_clip must be positive")
        if not self.seeds:
            raise InvalidInputError("at least one seed is required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective_config"] = self.objective_config.to_dict()
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["objective_config"] = ObjectiveConfig.from_dict(d["objective_config"])
        return cls(**d)


@dataclass
class RunResult:
    seed: int
    run_id: str
    bundle: ModelBundle
    metrics: list


def resolve_model_config(model_config: ModelConfig, train_config: TrainConfig) -> ModelConfig:
    """The variational objective needs the auxiliary posterior network."""
    if train_config.objective_config.objective == "reg_variational" and not model_config.with_aux:
        return replace(model_config, with_aux=True)
    return model_config


def training_set(dataset: Dataset, train_config: TrainConfig) -> list:
    if train_config.train_on_composites:
        return list(dataset.trajectories)
    subs = set(dataset.subskill_ids())
    return [t for t in dataset.trajectories if t.skill_id in subs]


def _noise(seed: int, stream: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(np.random.SeedSequence([int(seed), stream]).generate_state(1)[0]))


@torch.no_grad()
def evaluate_bundle(bundle: ModelBundle, dataset: Dataset, train_set: Sequence,
                    objective_config: ObjectiveConfig, seed: int) -> dict:
    """Logged metrics for one checkpoint; deterministic given (bundle, data, seed).

    The training objective is evaluated once on the whole training set under
    a fixed noise stream. ``train_loss`` and the ELBO components are divided
    by the number of trajectories; ``mi_term`` is the bound summed over
    compositions.
    """
    bundle.eval()
    n = len(train_set)
    loss, comps = regularized_loss(bundle, train_set, dataset.compositions, objective_config,
                                   _noise(seed, 2), demo_pool=train_set)
    row = {
        "action_nll": float(comps["action_nll"]) / n,
        "state_nll": float(comps["state_nll"]) / n,
        "kl": float(comps["kl"]) / n,
        "mi_term": float(comps["mi_term"]),
    }
    row["train_loss"] = float(loss) / n
    by_skill: dict = {}
    for t in dataset.trajectories:
        by_skill.setdefault(t.skill_id, []).append(t)
    mse_sum, mse_enc, add = [], [], []
    for comp in dataset.compositions:
        demos = by_skill.get(comp.composite_id, [])
        if not demos:
            continue
        mse_sum.append(eval_composite(bundle, comp, by_skill, demos, "sum")["mse_mean"])
        mse_enc.append(eval_composite(bundle, comp, by_skill, demos, "encode")["mse_mean"])
        add.append(mean_additivity_error(bundle, comp, by_skill, demos))
    row["eval_mse_sum_embedding"] = float(np.mean(mse_sum)) if mse_sum else math.nan
    row["eval_mse_encoded"] = float(np.mean(mse_enc)) if mse_enc else math.nan
    row["additivity_error"] = float(np.mean(add)) if add else math.nan
    bundle.train()
    return row


def _check_dataset(dataset: Dataset) -> None:
    present = {t.skill_id for t in dataset.trajectories}
    for comp in dataset.compositions:
        missing = [s for s in comp.subskill_ids if s not in present]
        if missing:
            raise ValidationError(f"composition {comp.composite_id!r} lacks demos for {missing}")


def train_one(dataset: Dataset, train_config: TrainConfig, model_config: ModelConfig,
              seed: int) -> RunResult:
    _check_dataset(dataset)
    ocfg = train_config.objective_config
    model_config = resolve_model_config(model_config, train_config)
    bundle = init_parameters(model_config, seed)
    train_set = training_set(dataset, train_config)
    if not train_set:
        raise ValidationError("training set is empty")
    run_id = f"{ocfg.objective}_seed{seed}"
    opt = torch.optim.Adam(bundle.parameters(), lr=train_config.learning_rate,
                           betas=ADAM_BETAS, eps=ADAM_EPS)
    order_rng = np.random.default_rng([int(seed), 1])
    noise = _noise(seed, 0)
    metrics = []

    def record(epoch):
        try:
            row = evaluate_bundle(bundle, dataset, train_set, ocfg, seed)
        except NonFiniteValueError as exc:
            raise NonFiniteLossError(epoch, -1, {"evaluation": math.nan}) from exc
        bad = {k: v for k, v in row.items() if not math.isfinite(v) and k in ("train_loss", "kl", "action_nll", "state_nll", "mi_term")}
        if bad:
            raise NonFiniteLossError(epoch, -1, bad)
        row.update(run_id=run_id, objective=ocfg.objective, seed=int(seed), epoch=int(epoch))
        metrics.append(row)
        log.info("%s epoch %d loss %.4f mse_sum %.5f add %.4f", run_id, epoch,
                 row["train_loss"], row["eval_mse_sum_embedding"], row["additivity_error"])

    record(0)
    bs = int(train_config.batch_size)
    for epoch in range(1, int(train_config.epochs) + 1):
        perm = order_rng.permutation(len(train_set))
        for b, start in enumerate(range(0, len(perm), bs)):
            batch = [train_set[i] for i in perm[start:start + bs]]
            opt.zero_grad(set_to_none=True)
            try:
                loss, comps = regularized_loss(bundle, batch, dataset.compositions, ocfg, noise,
                                               demo_pool=train_set)
            except NonFiniteValueError as exc:
                raise NonFiniteLossError(epoch, b, {"forward": math.nan}) from exc
            if not bool(torch.isfinite(loss)):
                raise NonFiniteLossError(epoch, b, {k: float(v) for k, v in comps.items()} | {"loss": float(loss)})
            loss.backward()
            torch.nn.utils.clip_grad_norm_(bundle.parameters(), train_config.grad_clip)
            opt.step()
            if not all(bool(torch.isfinite(p).all()) for p in bundle.parameters()):
                raise NonFiniteLossError(epoch, b, {k: float(v) for k, v in comps.items()}
                                         | {"loss": float(loss), "parameters": math.nan})
        if epoch % int(train_config.eval_every) == 0 or epoch == int(train_config.epochs):
            record(epoch)
    return RunResult(int(seed), run_id, bundle, metrics)


def train(dataset: Dataset, train_config: TrainConfig, model_config: ModelConfig) -> list:
    """One RunResult per seed, in seed order."""
    return [train_one(dataset, train_config, model_config, s) for s in train_config.seeds]
