"""Linear-Gaussian (V, trajectory) pairs with closed-form mutual information.

Each subskill latent is z_i ~ N(0, scale^2 I_d), V = z_1 + ... + z_M, and the
"generated" trajectory repeats V for T steps under isotropic observation
noise. Everything is jointly Gaussian, so I(V; states) is known exactly and
the MI bound estimators can be checked against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInputError
from .latent_math import DiagGaussian, gaussian_mutual_information
from .model import DTYPE, GeneratedTrajectory, ModelBundle, ModelConfig, aux_posterior, encode, init_parameters
from .objectives import mi_sample_bound, mi_variational_bound


@dataclass(frozen=True)
class GaussianToy:
    M: int
    d: int
    T: int
    scale: float
    noise: float

    def __post_init__(self):
        if min(self.M, self.d, self.T) < 1:
            raise InvalidInputError("M, d and T must be >= 1")
        if not (self.scale > 0 and self.noise > 0):
            raise InvalidInputError("scale and noise must be positive")

    def sample(self, n: int, gen: torch.Generator):
        """Return (z of shape (n, M, d), states of shape (n, T, d))."""
        z = self.scale * torch.randn((n, self.M, self.d), generator=gen, dtype=DTYPE)
        eps = torch.randn((n, self.T, self.d), generator=gen, dtype=DTYPE)
        return z, z.sum(1).unsqueeze(1) + self.noise * eps

    def V_dist(self) -> DiagGaussian:
        return DiagGaussian(torch.zeros(self.d, dtype=DTYPE),
                            torch.full((self.d,), math.sqrt(self.M) * self.scale, dtype=DTYPE))

    def subskill_prior(self) -> DiagGaussian:
        return DiagGaussian(torch.zeros(self.d, dtype=DTYPE), torch.full((self.d,), self.scale, dtype=DTYPE))

    def joint_cov(self) -> np.ndarray:
        """Covariance of [z_1, ..., z_M, states_1, ..., states_T] (each block d-dim)."""
        M, T, d = self.M, self.T, self.d
        A = np.zeros(((M + T) * d, M * d))
        A[: M * d] = np.eye(M * d)
        for t in range(T):
            for i in range(M):
                A[(M + t) * d:(M + t + 1) * d, i * d:(i + 1) * d] = np.eye(d)
        cov = self.scale ** 2 * A @ A.T
        cov[M * d:, M * d:] += self.noise ** 2 * np.eye(T * d)
        return cov

    def analytic_mi(self) -> float:
        return 0.5 * self.d * math.log1p(self.T * self.M * self.scale ** 2 / self.noise ** 2)

    def mi_from_cov(self) -> float:
        """Same quantity through the generic covariance oracle."""
        M, T, d = self.M, self.T, self.d
        sel_v = np.zeros((d, (M + T) * d))
        for i in range(M):
            sel_v[:, i * d:(i + 1) * d] = np.eye(d)
        states = list(range(M * d, (M + T) * d))
        return gaussian_mutual_information(self.joint_cov(), sel_v, states)


def random_toy(rng: np.random.Generator) -> GaussianToy:
    """Subskill scales of at least 1 keep every conditional entropy positive."""
    return GaussianToy(M=int(rng.integers(1, 4)), d=int(rng.integers(1, 4)), T=int(rng.integers(2, 7)),
                       scale=float(rng.uniform(1.0, 3.0)), noise=float(rng.uniform(0.5, 3.0)))


def toy_bundle(toy: GaussianToy, seed: int, hidden: int = 16) -> ModelBundle:
    cfg = ModelConfig(toy.d, 1, toy.d, encoder_hidden=hidden, attention_dim=8,
                      policy_hidden=4, dynamics_hidden=4, with_aux=True)
    return init_parameters(cfg, seed)


def _nll(g: DiagGaussian, x: torch.Tensor) -> torch.Tensor:
    return (torch.log(g.std) + 0.5 * ((x - g.mean) / g.std) ** 2).sum(-1).mean()


def v_prediction_error(bundle: ModelBundle, toy: GaussianToy, z: torch.Tensor, states: torch.Tensor) -> float:
    with torch.no_grad():
        Q = aux_posterior(bundle, GeneratedTrajectory(states, states, None))
        return float(((Q.mean - z.sum(1)) ** 2).sum(-1).mean())


def fit_posteriors(bundle: ModelBundle, toy: GaussianToy, epochs: int, seed: int,
                   n_train: int = 512, batch: int = 128, lr: float = 3e-3,
                   n_heldout: int = 1024) -> list:
    """Maximum-likelihood fit of Q_alpha(V | states) and q_phi(z_i | states).

    Returns the held-out mean squared V prediction error after each epoch,
    with the untrained value first.
    """
    gen = torch.Generator().manual_seed(int(seed))
    z, states = toy.sample(n_train, gen)
    z_ho, states_ho = toy.sample(n_heldout, gen)
    params = list(bundle.aux.parameters()) + list(bundle.encoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    history = [v_prediction_error(bundle, toy, z_ho, states_ho)]
    for _ in range(int(epochs)):
        perm = torch.randperm(n_train, generator=gen)
        for start in range(0, n_train, batch):
            idx = perm[start:start + batch]
            s, zb = states[idx], z[idx]
            Q = aux_posterior(bundle, GeneratedTrajectory(s, s, None))
            q = encode(bundle, s)
            loss = _nll(Q, zb.sum(1)) + sum(_nll(q, zb[:, i]) for i in range(toy.M))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        history.append(v_prediction_error(bundle, toy, z_ho, states_ho))
    return history


@torch.no_grad()
def bound_estimates(bundle: ModelBundle, toy: GaussianToy, n: int, seed: int, n_mc: int = 4) -> dict:
    """Monte-Carlo means of each bound over ``n`` fresh (V, states) pairs."""
    gen = torch.Generator().manual_seed(int(seed))
    z, states = toy.sample(n, gen)
    traj = GeneratedTrajectory(states, states, z.sum(1))
    V = toy.V_dist()
    prior = toy.subskill_prior()
    out = {"analytic_mi": toy.analytic_mi()}
    out["variational"] = float(mi_variational_bound(bundle, V, traj, gen, v_sample=z.sum(1)).mean())
    for mode in ("as_written", "cross"):
        est = mi_sample_bound(bundle, V, traj, toy.M, n_mc, mode, gen, subskill_posteriors=[prior] * toy.M)
        out[f"sample_{mode}"] = float(est.mean())
    return out
