"""Diagonal-Gaussian algebra over the latent space.

Everything here is in nats. ``DiagGaussian`` stores the standard deviation
directly; callers that work with log-std convert before constructing one.
Tensors may carry leading batch dimensions, the latent axis is always last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import InvalidInputError, NonFiniteValueError

LOG_2PI = math.log(2.0 * math.pi)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class DiagGaussian:
    mean: torch.Tensor
    std: torch.Tensor

    def __post_init__(self):
        mean = _as_tensor(self.mean)
        std = _as_tensor(self.std)
        if mean.ndim == 0 or std.ndim == 0:
            raise InvalidInputError("mean and std must be at least 1-D")
        if mean.shape != std.shape:
            raise InvalidInputError(f"mean shape {tuple(mean.shape)} != std shape {tuple(std.shape)}")
        with torch.no_grad():
            if not bool(torch.isfinite(mean).all()):
                raise NonFiniteValueError("mean contains non-finite entries")
            if not bool(torch.isfinite(std).all()):
                raise NonFiniteValueError("std contains non-finite entries")
            if not bool((std > 0).all()):
                raise InvalidInputError("std must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def var(self) -> torch.Tensor:
        return self.std * self.std

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.std.detach())

    def sample(self, noise_source: torch.Generator, n: int | None = None) -> torch.Tensor:
        shape = tuple(self.mean.shape) if n is None else (n, *self.mean.shape)
        eps = torch.randn(shape, generator=noise_source, dtype=self.mean.dtype)
        return self.mean + self.std * eps


def gaussian_entropy(g: DiagGaussian) -> torch.Tensor:
    """Differential entropy, summed over latent dimensions."""
    return 0.5 * (1.0 + LOG_2PI + torch.log(g.var)).sum(-1)


def sum_gaussians(parts: Sequence[DiagGaussian]) -> DiagGaussian:
    """Distribution of the sum of independent diagonal Gaussians."""
    if len(parts) == 0:
        raise InvalidInputError("sum_gaussians needs at least one part")
    shape = parts[0].mean.shape
    for p in parts[1:]:
        if p.mean.shape != shape:
            raise InvalidInputError(f"part shapes differ: {tuple(shape)} vs {tuple(p.mean.shape)}")
    if len(parts) == 1:
        return parts[0]
    mean = torch.stack([p.mean for p in parts]).sum(0)
    var = torch.stack([p.var for p in parts]).sum(0)
    return DiagGaussian(mean, torch.sqrt(var))


def log_density(g: DiagGaussian, x) -> torch.Tensor:
    x = _as_tensor(x)
    if x.shape[-1] != g.dim:
        raise InvalidInputError(f"point has {x.shape[-1]} entries, distribution has {g.dim}")
    z = (x - g.mean) / g.std
    return (-0.5 * LOG_2PI - torch.log(g.std) - 0.5 * z * z).sum(-1)


def kl_to_standard_normal(g: DiagGaussian) -> torch.Tensor:
    var = g.var
    return 0.5 * (var + g.mean * g.mean - 1.0 - torch.log(var)).sum(-1)


def mc_entropy_estimate(g: DiagGaussian, n_samples: int, seed: int) -> float:
    """Monte-Carlo entropy: minus the mean log-density of draws from ``g``."""
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        xs = g.sample(gen, n_samples)
        return float(-log_density(g, xs).mean())


# -- jointly Gaussian oracles -------------------------------------------------
#
# These work on dense covariances in numpy and are used to check the bounds on
# instances where every entropy is available in closed form.


def gaussian_conditional_entropy(cov: np.ndarray, target, given=None) -> float:
    """H(A x | B x) for x ~ N(0, cov), with ``target``=A and ``given``=B as row maps.

    ``target``/``given`` may be index lists (selecting coordinates) or
    explicit matrices.
    """
    cov = np.asarray(cov, dtype=np.float64)
    n = cov.shape[0]
    A = _selector(target, n)
    S_aa = A @ cov @ A.T
    if given is not None:
        B = _selector(given, n)
        S_ab = A @ cov @ B.T
        S_bb = B @ cov @ B.T
        S_aa = S_aa - S_ab @ np.linalg.solve(S_bb, S_ab.T)
    k = S_aa.shape[0]
    sign, logdet = np.linalg.slogdet(S_aa)
    if sign <= 0:
        raise InvalidInputError("conditional covariance is not positive definite")
    return 0.5 * (k * (1.0 + LOG_2PI) + logdet)


def _selector(spec, n: int) -> np.ndarray:
    arr = np.asarray(spec)
    if arr.ndim == 2:
        return arr.astype(np.float64)
    S = np.zeros((len(arr), n))
    S[np.arange(len(arr)), arr] = 1.0
    return S


def gaussian_mutual_information(cov: np.ndarray, a, b) -> float:
    """I(A x; B x) for x ~ N(0, cov)."""
    return gaussian_conditional_entropy(cov, a) - gaussian_conditional_entropy(cov, a, b)


def subadditivity_terms(cov: np.ndarray, n_parts: int, d_z: int) -> dict:
    """Entropy terms of the conditional sub-additivity chain.

    ``cov`` is the joint covariance of (z_1, ..., z_M, tau) where every z_i
    has ``d_z`` coordinates and tau occupies the remaining ones. Returns

    - ``h_v``: H(V | tau) with V = z_1 + ... + z_M
    - ``rolled``: sum_{i<M} [H(z_i|tau) - H(z_i|V_i, tau)] + H(z_M|tau),
      V_i = z_i + ... + z_M
    - ``sum_h``: sum_i H(z_i | tau)
    - ``residuals``: the dropped terms H(z_i | V_i, tau), i < M
    """
    cov = np.asarray(cov, dtype=np.float64)
    n = cov.shape[0]
    tau = list(range(n_parts * d_z, n))
    if not tau:
        raise InvalidInputError("covariance has no coordinates left for tau")

    def block(i):
        return list(range(i * d_z, (i + 1) * d_z))

    def partial_sum(p):
        S = np.zeros((d_z, n))
        for i in range(p, n_parts):
            S[:, block(i)] += np.eye(d_z)
        return S

    tau_sel = _selector(tau, n)
    h_v = gaussian_conditional_entropy(cov, partial_sum(0), tau)
    h_parts = [gaussian_conditional_entropy(cov, block(i), tau) for i in range(n_parts)]
    residuals = []
    for i in range(n_parts - 1):
        given = np.vstack([partial_sum(i), tau_sel])
        residuals.append(gaussian_conditional_entropy(cov, block(i), given))
    rolled = sum(h_parts) - sum(residuals)
    return {"h_v": h_v, "rolled": rolled, "sum_h": sum(h_parts), "residuals": residuals}
