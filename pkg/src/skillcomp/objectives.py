"""Training losses: the baseline ELBO and its two MI-regularised variants.

The minimised loss *subtracts* ``lam`` times a lower bound on I(V; tau~),
where V is the sum of subskill embeddings and tau~ the trajectory generated
from a composite latent.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch

from .errors import ConfigurationError, InvalidInputError
from .latent_math import (
    DiagGaussian,
    gaussian_entropy,
    kl_to_standard_normal,
    log_density,
    sum_gaussians,
)
from .model import (
    DTYPE,
    GeneratedTrajectory,
    ModelBundle,
    Trajectory,
    aux_posterior,
    encode,
    policy_logprob,
    rollout,
    sample_latent,
    sequence_dynamics_logprob,
)

OBJECTIVES = ("original", "reg_variational", "reg_nonvariational")
MI_SAMPLING = ("as_written", "cross")
COMPOSITE_EMBEDDING = ("sum", "encode")


@dataclass(frozen=True)
class CompositionSpec:
    composite_id: str
    subskill_ids: list

    def __post_init__(self):
        ids = list(self.subskill_ids)
        if not ids:
            raise InvalidInputError(f"composition {self.composite_id!r} has no subskills")
        if len(set(ids)) != len(ids):
            raise InvalidInputError(f"composition {self.composite_id!r} repeats a subskill")
        object.__setattr__(self, "subskill_ids", ids)

    @property
    def M(self) -> int:
        return len(self.subskill_ids)


@dataclass(frozen=True)
class ObjectiveConfig:
    objective: str = "original"
    lam: float = 0.1
    n_mc: int = 8
    mi_sampling: str = "as_written"
    composite_embedding: str = "sum"
    rollout_T: Optional[int] = None  # None: length of the reference demo

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise InvalidInputError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not self.lam >= 0:
            raise InvalidInputError("lambda must be >= 0")
        if int(self.n_mc) < 1:
            raise InvalidInputError("n_mc must be >= 1")
        if self.mi_sampling not in MI_SAMPLING:
            raise InvalidInputError(f"mi_sampling must be one of {MI_SAMPLING}")
        if self.composite_embedding not in COMPOSITE_EMBEDDING:
            raise InvalidInputError(f"composite_embedding must be one of {COMPOSITE_EMBEDDING}")
        if self.rollout_T is not None and int(self.rollout_T) < 1:
            raise InvalidInputError("rollout_T must be >= 1")

    @property
    def regularized(self) -> bool:
        return self.objective != "original"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


def _stack(trajs: Sequence[Trajectory]):
    lengths = {t.T for t in trajs}
    if len(lengths) != 1:
        raise InvalidInputError(f"batched trajectories must share T, got {sorted(lengths)}")
    states = torch.stack([torch.from_numpy(t.states) for t in trajs]).to(DTYPE)
    actions = torch.stack([torch.from_numpy(t.actions) for t in trajs]).to(DTYPE)
    return states, actions


def _check_traj(bundle: ModelBundle, traj) -> None:
    if not isinstance(traj, Trajectory):
        raise InvalidInputError("expected a Trajectory")
    c = bundle.config
    if traj.states.shape[1] != c.d_state or traj.actions.shape[1] != c.d_action:
        raise InvalidInputError(
            f"trajectory dims ({traj.states.shape[1]}, {traj.actions.shape[1]}) "
            f"do not match model ({c.d_state}, {c.d_action})")


def elbo_terms(bundle: ModelBundle, states: torch.Tensor, actions: torch.Tensor,
               noise_source: torch.Generator) -> dict:
    """Per-trajectory ELBO components for a (B, T, d) batch, one z per trajectory."""
    post = encode(bundle, states)
    eps = torch.randn(post.mean.shape, generator=noise_source, dtype=DTYPE)
    z = sample_latent(post, eps)
    zt = z.unsqueeze(-2).expand(*states.shape[:-1], z.shape[-1])
    action_nll = -policy_logprob(bundle, zt, states, actions).sum(-1)
    state_nll = -sequence_dynamics_logprob(bundle, z, states).sum(-1)
    kl = kl_to_standard_normal(post)
    return {"loss": action_nll + state_nll + kl, "action_nll": action_nll,
            "state_nll": state_nll, "kl": kl}


def elbo_loss(bundle: ModelBundle, traj: Trajectory, noise_source: torch.Generator):
    """Negative ELBO of a single demonstration; returns (loss, components)."""
    _check_traj(bundle, traj)
    states, actions = _stack([traj])
    terms = {k: v[0] for k, v in elbo_terms(bundle, states, actions, noise_source).items()}
    return terms.pop("loss"), terms


def batch_elbo(bundle: ModelBundle, batch: Sequence[Trajectory], noise_source: torch.Generator) -> dict:
    """Summed ELBO components over a batch, grouped by length so ragged batches work."""
    if not batch:
        raise InvalidInputError("empty batch")
    for t in batch:
        _check_traj(bundle, t)
    groups: dict = {}
    for t in batch:
        groups.setdefault(t.T, []).append(t)
    total = None
    for T in sorted(groups):
        states, actions = _stack(groups[T])
        terms = elbo_terms(bundle, states, actions, noise_source)
        sums = {k: v.sum() for k, v in terms.items()}
        total = sums if total is None else {k: total[k] + sums[k] for k in total}
    return total


def _encode_demos(bundle: ModelBundle, demos: Sequence[Trajectory]) -> list:
    if len({d.T for d in demos}) == 1:
        states, _ = _stack(demos)
        post = encode(bundle, states)
        return [DiagGaussian(post.mean[i], post.std[i]) for i in range(len(demos))]
    return [encode(bundle, d.states) for d in demos]


def build_V(bundle: ModelBundle, subskill_demos: Sequence[Trajectory]) -> DiagGaussian:
    """Distribution of V = z_1 + ... + z_M for one demo per subskill."""
    if len(subskill_demos) == 0:
        raise InvalidInputError("build_V needs at least one subskill demo")
    return sum_gaussians(_encode_demos(bundle, subskill_demos))


def make_composite_latent(bundle: ModelBundle, comp: CompositionSpec,
                          subskill_demos: Sequence[Trajectory],
                          composite_demo: Optional[Trajectory], mode: str,
                          noise_source: torch.Generator, posteriors=None) -> torch.Tensor:
    if mode == "sum":
        if len(subskill_demos) != comp.M:
            raise InvalidInputError(f"{comp.composite_id} needs {comp.M} subskill demos, got {len(subskill_demos)}")
        posteriors = posteriors or _encode_demos(bundle, subskill_demos)
        z = None
        for post in posteriors:
            eps = torch.randn(post.mean.shape, generator=noise_source, dtype=DTYPE)
            zi = sample_latent(post, eps)
            z = zi if z is None else z + zi
        return z
    if mode == "encode":
        if composite_demo is None:
            raise ConfigurationError("encode mode needs a composite demonstration")
        post = encode(bundle, composite_demo.states)
        eps = torch.randn(post.mean.shape, generator=noise_source, dtype=DTYPE)
        return sample_latent(post, eps)
    raise InvalidInputError(f"unknown composite embedding mode {mode!r}")


def mi_variational_bound(bundle: ModelBundle, V_dist: DiagGaussian, gen: GeneratedTrajectory,
                         noise_source: torch.Generator, v_sample=None) -> torch.Tensor:
    """Single-sample log Q_alpha(V | gen) + H(V).

    ``v_sample`` is the draw of V that ``gen`` was generated from, when there
    is one (sum-mode composites); otherwise V is drawn from ``V_dist``.
    """
    if bundle.aux is None:
        raise ConfigurationError("the variational bound needs an auxiliary posterior (with_aux=True)")
    Q = aux_posterior(bundle, gen)
    if v_sample is None:
        eps = torch.randn(V_dist.mean.shape, generator=noise_source, dtype=DTYPE)
        v_sample = sample_latent(V_dist, eps)
    return log_density(Q, v_sample) + gaussian_entropy(V_dist)


def mi_sample_bound(bundle: ModelBundle, V_dist: DiagGaussian, gen: GeneratedTrajectory,
                    M: int, n_mc: int, mi_sampling: str, noise_source: torch.Generator,
                    subskill_posteriors: Optional[Sequence[DiagGaussian]] = None) -> torch.Tensor:
    """H(V) + (1/N) sum_n sum_i log q(z_{n,i} | gen), with q the encoder on gen's states."""
    if int(n_mc) < 1:
        raise InvalidInputError("n_mc must be >= 1")
    if mi_sampling not in MI_SAMPLING:
        raise InvalidInputError(f"unknown mi_sampling {mi_sampling!r}")
    if mi_sampling == "cross":
        if subskill_posteriors is None:
            raise ConfigurationError("cross sampling needs the subskill posteriors")
        if len(subskill_posteriors) != M:
            raise InvalidInputError(f"expected {M} subskill posteriors, got {len(subskill_posteriors)}")
    q = encode(bundle, gen.states)
    total = 0.0
    # one draw per n keeps the noise stream identical to n_mc separate calls
    for _ in range(int(n_mc)):
        eps = torch.randn((M, *q.mean.shape), generator=noise_source, dtype=DTYPE)
        if mi_sampling == "as_written":
            z = q.mean + q.std * eps
        else:
            z = torch.stack([p.mean + p.std * eps[i] for i, p in enumerate(subskill_posteriors)])
        total = total + log_density(q, z).sum(0)
    return gaussian_entropy(V_dist) + total / int(n_mc)


def _pick(pool: Sequence[Trajectory], noise_source: torch.Generator) -> Trajectory:
    idx = int(torch.randint(len(pool), (1,), generator=noise_source))
    return pool[idx]


def composition_mi(bundle: ModelBundle, comp: CompositionSpec, by_skill: dict,
                   cfg: ObjectiveConfig, noise_source: torch.Generator) -> torch.Tensor:
    """Draw demos for one composition, generate tau~ and evaluate the selected MI bound."""
    demos = []
    for sid in comp.subskill_ids:
        pool = by_skill.get(sid)
        if not pool:
            raise InvalidInputError(f"no demonstrations of subskill {sid!r} available")
        demos.append(_pick(pool, noise_source))
    composite_demo = None
    if cfg.composite_embedding == "encode":
        pool = by_skill.get(comp.composite_id)
        if not pool:
            raise ConfigurationError(f"encode mode needs demos of composite {comp.composite_id!r}")
        composite_demo = _pick(pool, noise_source)
    posteriors = _encode_demos(bundle, demos)
    V = sum_gaussians(posteriors)
    z = make_composite_latent(bundle, comp, demos, composite_demo, cfg.composite_embedding,
                              noise_source, posteriors=posteriors)
    ref = composite_demo if composite_demo is not None else demos[0]
    T = int(cfg.rollout_T) if cfg.rollout_T is not None else ref.T
    gen = rollout(bundle, z, torch.from_numpy(ref.states[0]), T, "stochastic", noise_source)
    if cfg.objective == "reg_variational":
        # a sum-mode latent is itself a draw of V, paired with the trajectory it produced
        paired = z if cfg.composite_embedding == "sum" else None
        return mi_variational_bound(bundle, V, gen, noise_source, v_sample=paired)
    return mi_sample_bound(bundle, V, gen, comp.M, cfg.n_mc, cfg.mi_sampling, noise_source,
                           subskill_posteriors=posteriors)


def regularized_loss(bundle: ModelBundle, batch: Sequence[Trajectory],
                     compositions: Sequence[CompositionSpec], cfg: ObjectiveConfig,
                     noise_source: torch.Generator, demo_pool: Optional[Sequence[Trajectory]] = None):
    """Summed ELBO minus ``lam`` times the MI bound of every composition.

    Demos for the regulariser are drawn from ``demo_pool`` (the batch itself
    when omitted). Returns (loss, components); components hold detached
    floats plus the differentiable ``loss``.
    """
    terms = batch_elbo(bundle, batch, noise_source)
    loss = terms["loss"]
    mi_total = torch.zeros((), dtype=DTYPE)
    if cfg.regularized:
        by_skill: dict = {}
        for t in (demo_pool if demo_pool is not None else batch):
            by_skill.setdefault(t.skill_id, []).append(t)
        for comp in compositions:
            mi_total = mi_total + composition_mi(bundle, comp, by_skill, cfg, noise_source)
        loss = loss - cfg.lam * mi_total
    components = {
        "action_nll": terms["action_nll"],
        "state_nll": terms["state_nll"],
        "kl": terms["kl"],
        "mi_term": mi_total,
    }
    return loss, components
