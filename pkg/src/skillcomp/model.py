"""Conditional trajectory VAE: encoder, policy, dynamics and auxiliary posterior.

All modules run in float64. A bundle is an ``nn.Module`` so the training loop
can hand its parameters straight to an optimizer; the free functions below
are the public surface and accept either single items or leading batch
dimensions.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InvalidInputError, RolloutDivergenceError
from .latent_math import LOG_2PI, DiagGaussian, log_density

DTYPE = torch.float64
FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"SKCK"

DYNAMICS_ARCHS = ("mlp", "causal_conv")


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    skill_id: str

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        actions = np.asarray(self.actions, dtype=np.float64)
        if states.ndim != 2 or actions.ndim != 2:
            raise InvalidInputError("states and actions must be 2-D (T x dim)")
        if states.shape[0] != actions.shape[0]:
            raise InvalidInputError(f"{states.shape[0]} states but {actions.shape[0]} actions")
        if states.shape[0] < 1:
            raise InvalidInputError("a trajectory needs at least one step")
        if not (np.isfinite(states).all() and np.isfinite(actions).all()):
            raise InvalidInputError("trajectory contains non-finite entries")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    @property
    def T(self) -> int:
        return self.states.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.skill_id == other.skill_id
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
        )


@dataclass
class GeneratedTrajectory:
    states: torch.Tensor
    actions: torch.Tensor
    conditioning_latent: torch.Tensor


@dataclass(frozen=True)
class ModelConfig:
    d_state: int
    d_action: int
    d_latent: int
    encoder_hidden: int = 32
    attention_dim: int = 16
    dynamics_arch: str = "mlp"
    mixture_components: int = 1
    log_std_clamp: tuple = (-5.0, 2.0)
    policy_hidden: int = 64
    dynamics_hidden: int = 64
    conv_channels: int = 16
    conv_dilations: tuple = (1, 2, 4)
    with_aux: bool = False

    def __post_init__(self):
        object.__setattr__(self, "log_std_clamp", tuple(float(v) for v in self.log_std_clamp))
        object.__setattr__(self, "conv_dilations", tuple(int(v) for v in self.conv_dilations))
        sizes = ("d_state", "d_action", "d_latent", "encoder_hidden", "attention_dim",
                 "mixture_components", "policy_hidden", "dynamics_hidden", "conv_channels")
        for name in sizes:
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if self.dynamics_arch not in DYNAMICS_ARCHS:
            raise InvalidInputError(f"dynamics_arch must be one of {DYNAMICS_ARCHS}")
        lo, hi = self.log_std_clamp
        if not lo < hi:
            raise InvalidInputError("log_std_clamp needs low < high")
        if not self.conv_dilations or min(self.conv_dilations) < 1:
            raise InvalidInputError("conv_dilations must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["log_std_clamp"] = list(self.log_std_clamp)
        d["conv_dilations"] = list(self.conv_dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(d_in, hidden), nn.Tanh(),
        nn.Linear(hidden, hidden), nn.Tanh(),
        nn.Linear(hidden, d_out),
    )


class AdditiveAttention(nn.Module):
    """score_t = v . tanh(W h_t + b), softmax over time."""

    def __init__(self, d_in: int, attention_dim: int):
        super().__init__()
        self.proj = nn.Linear(d_in, attention_dim)
        self.score = nn.Linear(attention_dim, 1, bias=False)

    def forward(self, feats: torch.Tensor):
        scores = self.score(torch.tanh(self.proj(feats))).squeeze(-1)
        weights = torch.softmax(scores, dim=-1)
        pooled = (weights.unsqueeze(-1) * feats).sum(-2)
        return pooled, weights


def attention_pool(step_features, params: AdditiveAttention):
    """Pool (..., T, h) features into (..., h) with simplex weights over T."""
    feats = torch.as_tensor(step_features, dtype=DTYPE)
    if feats.ndim < 2:
        raise InvalidInputError("step_features must be (..., T, h)")
    if feats.shape[-1] != params.proj.in_features:
        raise InvalidInputError(f"feature width {feats.shape[-1]} != {params.proj.in_features}")
    return params(feats)


class SequenceEncoder(nn.Module):
    """BiLSTM over states, attention pooling, linear map to (mean, log-std)."""

    def __init__(self, d_in: int, hidden: int, attention_dim: int, d_latent: int, clamp):
        super().__init__()
        self.d_in = d_in
        self.clamp = clamp
        self.lstm = nn.LSTM(d_in, hidden, batch_first=True, bidirectional=True)
        self.attention = AdditiveAttention(2 * hidden, attention_dim)
        self.head = nn.Linear(2 * hidden, 2 * d_latent)
        # small head so a fresh encoder outputs roughly N(0, I)
        with torch.no_grad():
            self.head.weight.mul_(0.05)
            self.head.bias.zero_()

    def forward(self, states: torch.Tensor):
        feats, _ = self.lstm(states)
        pooled, weights = self.attention(feats)
        mean, log_std = self.head(pooled).chunk(2, dim=-1)
        log_std = log_std.clamp(*self.clamp)
        return mean, torch.exp(log_std), weights


class PolicyNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.clamp = cfg.log_std_clamp
        self.net = _mlp(cfg.d_state + cfg.d_latent, cfg.policy_hidden, 2 * cfg.d_action)

    def forward(self, s: torch.Tensor, z: torch.Tensor):
        mean, log_std = self.net(torch.cat([s, z], -1)).chunk(2, dim=-1)
        return mean, torch.exp(log_std.clamp(*self.clamp))


class MixtureParams:
    """K-component diagonal Gaussian mixture; tensors shaped (..., K, d)."""

    def __init__(self, logits: torch.Tensor, means: torch.Tensor, stds: torch.Tensor):
        self.logits = logits
        self.means = means
        self.stds = stds

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        x = x.unsqueeze(-2)
        u = (x - self.means) / self.stds
        comp = (-0.5 * LOG_2PI - torch.log(self.stds) - 0.5 * u * u).sum(-1)
        return torch.logsumexp(torch.log_softmax(self.logits, -1) + comp, dim=-1)

    def mean(self) -> torch.Tensor:
        w = torch.softmax(self.logits, -1).unsqueeze(-1)
        return (w * self.means).sum(-2)

    def sample(self, noise_source: torch.Generator) -> torch.Tensor:
        K = self.means.shape[-2]
        if K == 1:
            idx_means, idx_stds = self.means[..., 0, :], self.stds[..., 0, :]
        else:
            # component choice is not reparameterizable; gradients flow through the chosen Gaussian
            probs = torch.softmax(self.logits.detach(), -1).reshape(-1, K)
            idx = torch.multinomial(probs, 1, generator=noise_source).reshape(self.logits.shape[:-1])
            gather = idx[..., None, None].expand(*idx.shape, 1, self.means.shape[-1])
            idx_means = self.means.gather(-2, gather).squeeze(-2)
            idx_stds = self.stds.gather(-2, gather).squeeze(-2)
        eps = torch.randn(idx_means.shape, generator=noise_source, dtype=idx_means.dtype)
        return idx_means + idx_stds * eps


class _MixtureHead(nn.Module):
    """Zero-initialised output layer producing residual mixture parameters."""

    def __init__(self, d_in: int, cfg: ModelConfig):
        super().__init__()
        self.K = cfg.mixture_components
        self.d = cfg.d_state
        self.clamp = cfg.log_std_clamp
        self.out = nn.Linear(d_in, self.K * (2 * self.d + 1))
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        if self.K > 1:
            # break the symmetry between components while keeping the mean at zero
            with torch.no_grad():
                offsets = torch.linspace(-0.05, 0.05, self.K, dtype=self.out.bias.dtype)
                for k in range(self.K):
                    self.out.bias[k * 2 * self.d:k * 2 * self.d + self.d] = offsets[k]

    def forward(self, h: torch.Tensor, s_t: torch.Tensor) -> MixtureParams:
        raw = self.out(h)
        gauss, logits = raw[..., :2 * self.d * self.K], raw[..., 2 * self.d * self.K:]
        gauss = gauss.reshape(*raw.shape[:-1], self.K, 2 * self.d)
        delta, log_std = gauss[..., :self.d], gauss[..., self.d:]
        means = s_t.unsqueeze(-2) + delta
        return MixtureParams(logits, means, torch.exp(log_std.clamp(*self.clamp)))


class MLPDynamics(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.receptive_field = 1
        self.body = nn.Sequential(
            nn.Linear(cfg.d_state + cfg.d_latent, cfg.dynamics_hidden), nn.Tanh(),
            nn.Linear(cfg.dynamics_hidden, cfg.dynamics_hidden), nn.Tanh(),
        )
        self.head = _MixtureHead(cfg.dynamics_hidden, cfg)

    def forward(self, history: torch.Tensor, z: torch.Tensor) -> MixtureParams:
        """history (B, t, d_state), z (B, d_z) -> params for every position (B, t, ...)."""
        zt = z.unsqueeze(-2).expand(*history.shape[:-1], z.shape[-1])
        return self.head(self.body(torch.cat([history, zt], -1)), history)


class CausalConvDynamics(nn.Module):
    """Gated dilated causal convolutions conditioned on z, WaveNet style."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C = cfg.conv_channels
        self.dilations = cfg.conv_dilations
        self.receptive_field = 1 + sum(self.dilations)
        self.inp = nn.Conv1d(cfg.d_state, C, 1)
        self.filters = nn.ModuleList(nn.Conv1d(C, C, 2, dilation=d) for d in self.dilations)
        self.gates = nn.ModuleList(nn.Conv1d(C, C, 2, dilation=d) for d in self.dilations)
        self.cond_f = nn.ModuleList(nn.Linear(cfg.d_latent, C) for _ in self.dilations)
        self.cond_g = nn.ModuleList(nn.Linear(cfg.d_latent, C) for _ in self.dilations)
        self.res = nn.ModuleList(nn.Conv1d(C, C, 1) for _ in self.dilations)
        self.skip = nn.ModuleList(nn.Conv1d(C, C, 1) for _ in self.dilations)
        self.post = nn.Conv1d(C, cfg.dynamics_hidden, 1)
        self.head = _MixtureHead(cfg.dynamics_hidden, cfg)

    def forward(self, history: torch.Tensor, z: torch.Tensor) -> MixtureParams:
        x = self.inp(history.transpose(-1, -2))
        skip = torch.zeros_like(x)
        for d, f, g, cf, cg, r, s in zip(self.dilations, self.filters, self.gates,
                                         self.cond_f, self.cond_g, self.res, self.skip):
            xp = F.pad(x, (d, 0))
            h = torch.tanh(f(xp) + cf(z).unsqueeze(-1)) * torch.sigmoid(g(xp) + cg(z).unsqueeze(-1))
            x = x + r(h)
            skip = skip + s(h)
        h = torch.tanh(self.post(torch.relu(skip))).transpose(-1, -2)
        return self.head(h, history)


class ModelBundle(nn.Module):
    """Encoder (phi), policy (theta), dynamics (psi) and optional aux posterior (alpha)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.format_version = FORMAT_VERSION
        c = config
        self.encoder = SequenceEncoder(c.d_state, c.encoder_hidden, c.attention_dim,
                                       c.d_latent, c.log_std_clamp)
        self.policy = PolicyNet(c)
        self.dynamics = MLPDynamics(c) if c.dynamics_arch == "mlp" else CausalConvDynamics(c)
        self.aux = (SequenceEncoder(c.d_state, c.encoder_hidden, c.attention_dim,
                                    c.d_latent, c.log_std_clamp) if c.with_aux else None)
        self.to(DTYPE)

    def flat_parameters(self) -> dict:
        return {k: v.detach().cpu().numpy().astype(np.float64) for k, v in self.state_dict().items()}


def init_parameters(config: ModelConfig, seed: int) -> ModelBundle:
    """Fresh bundle whose initialisation depends only on ``seed``."""
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(int(seed))
        return ModelBundle(config)
    finally:
        torch.random.set_rng_state(state)


# -- operations ---------------------------------------------------------------


def _states_tensor(bundle: ModelBundle, states) -> torch.Tensor:
    x = torch.as_tensor(states, dtype=DTYPE)
    if x.ndim < 2:
        raise InvalidInputError("states must be (T, d_state) or (B, T, d_state)")
    if x.shape[-1] != bundle.config.d_state:
        raise InvalidInputError(f"states have {x.shape[-1]} columns, model expects {bundle.config.d_state}")
    if x.shape[-2] < 1:
        raise InvalidInputError("need at least one timestep")
    return x


def _run_encoder(net: SequenceEncoder, x: torch.Tensor):
    single = x.ndim == 2
    if single:
        x = x.unsqueeze(0)
    mean, std, weights = net(x)
    if single:
        mean, std, weights = mean[0], std[0], weights[0]
    return DiagGaussian(mean, std), weights


def encode_with_attention(bundle: ModelBundle, states):
    return _run_encoder(bundle.encoder, _states_tensor(bundle, states))


def encode(bundle: ModelBundle, states) -> DiagGaussian:
    """Posterior q(z | states) for one (T, d) or a batch (B, T, d) of state sequences."""
    return encode_with_attention(bundle, states)[0]


def sample_latent(g: DiagGaussian, noise) -> torch.Tensor:
    noise = torch.as_tensor(noise, dtype=g.mean.dtype)
    if noise.shape[-1] != g.dim:
        raise InvalidInputError(f"noise has {noise.shape[-1]} entries, latent has {g.dim}")
    return g.mean + g.std * noise


def policy_distribution(bundle: ModelBundle, z, s_t) -> DiagGaussian:
    z = torch.as_tensor(z, dtype=DTYPE)
    s_t = torch.as_tensor(s_t, dtype=DTYPE)
    c = bundle.config
    if z.shape[-1] != c.d_latent or s_t.shape[-1] != c.d_state:
        raise InvalidInputError("latent or state width does not match the model")
    z, s_t = _align(z, s_t)
    mean, std = bundle.policy(s_t, z)
    return DiagGaussian(mean, std)


def _align(z: torch.Tensor, s: torch.Tensor):
    """Broadcast leading dims of z and s while keeping their own last axes."""
    lead = torch.broadcast_shapes(z.shape[:-1], s.shape[:-1])
    return z.expand(*lead, z.shape[-1]), s.expand(*lead, s.shape[-1])


def policy_logprob(bundle: ModelBundle, z, s_t, a_t) -> torch.Tensor:
    a_t = torch.as_tensor(a_t, dtype=DTYPE)
    if a_t.shape[-1] != bundle.config.d_action:
        raise InvalidInputError(f"action width {a_t.shape[-1]} != {bundle.config.d_action}")
    return log_density(policy_distribution(bundle, z, s_t), a_t)


def dynamics_params(bundle: ModelBundle, z, history) -> MixtureParams:
    """Mixture parameters at every position of ``history`` (..., t, d_state)."""
    z = torch.as_tensor(z, dtype=DTYPE)
    history = torch.as_tensor(history, dtype=DTYPE)
    c = bundle.config
    if z.shape[-1] != c.d_latent or history.shape[-1] != c.d_state:
        raise InvalidInputError("latent or state width does not match the model")
    lead = torch.broadcast_shapes(z.shape[:-1], history.shape[:-2])
    z = z.expand(*lead, z.shape[-1])
    history = history.expand(*lead, *history.shape[-2:])
    flat_z = z.reshape(-1, z.shape[-1])
    flat_h = history.reshape(-1, *history.shape[-2:])
    p = bundle.dynamics(flat_h, flat_z)
    t = history.shape[-2]
    K = c.mixture_components
    return MixtureParams(
        p.logits.reshape(*lead, t, K),
        p.means.reshape(*lead, t, K, c.d_state),
        p.stds.reshape(*lead, t, K, c.d_state),
    )


def dynamics_logprob(bundle: ModelBundle, z, s_t, s_next) -> torch.Tensor:
    """log P(s_next | s_t, z); for the convolutional head ``s_t`` is the only history."""
    s_t = torch.as_tensor(s_t, dtype=DTYPE)
    s_next = torch.as_tensor(s_next, dtype=DTYPE)
    if s_next.shape[-1] != bundle.config.d_state:
        raise InvalidInputError(f"state width {s_next.shape[-1]} != {bundle.config.d_state}")
    p = dynamics_params(bundle, z, s_t.unsqueeze(-2))
    last = MixtureParams(p.logits[..., -1, :], p.means[..., -1, :, :], p.stds[..., -1, :, :])
    return last.log_prob(s_next)


def sequence_dynamics_logprob(bundle: ModelBundle, z, states) -> torch.Tensor:
    """Teacher-forced log P(s_{t+1} | s_{<=t}, z) for t = 1..T-1, shape (..., T-1)."""
    states = torch.as_tensor(states, dtype=DTYPE)
    if states.shape[-2] < 2:
        return states.new_zeros(states.shape[:-2] + (0,))
    p = dynamics_params(bundle, z, states[..., :-1, :])
    return p.log_prob(states[..., 1:, :])


def rollout(bundle: ModelBundle, z, s_1, T: int, mode: str = "mean",
            noise_source: Optional[torch.Generator] = None) -> GeneratedTrajectory:
    """Free-running generation from ``s_1`` conditioned on ``z``.

    Supports a leading batch dimension on ``z`` and ``s_1``. In stochastic
    mode the samples are reparameterised so the result is differentiable in
    the parameters and in ``z``.
    """
    if T < 1:
        raise InvalidInputError("T must be >= 1")
    if mode not in ("mean", "stochastic"):
        raise InvalidInputError(f"unknown rollout mode {mode!r}")
    if mode == "stochastic" and noise_source is None:
        raise InvalidInputError("stochastic rollout needs a noise source")
    z = torch.as_tensor(z, dtype=DTYPE)
    s = torch.as_tensor(s_1, dtype=DTYPE)
    z, s = _align(z, s)
    R = bundle.dynamics.receptive_field
    states, actions = [s], []
    for t in range(T):
        pol = policy_distribution(bundle, z, states[-1])
        if mode == "mean":
            a = pol.mean
        else:
            eps = torch.randn(pol.mean.shape, generator=noise_source, dtype=DTYPE)
            a = pol.mean + pol.std * eps
        actions.append(a)
        if t == T - 1:
            break
        history = torch.stack(states[-R:], dim=-2)
        p = dynamics_params(bundle, z, history)
        last = MixtureParams(p.logits[..., -1, :], p.means[..., -1, :, :], p.stds[..., -1, :, :])
        nxt = last.mean() if mode == "mean" else last.sample(noise_source)
        if not bool(torch.isfinite(nxt).all()):
            raise RolloutDivergenceError(t + 1)
        states.append(nxt)
    return GeneratedTrajectory(torch.stack(states, -2), torch.stack(actions, -2), z)


def aux_posterior(bundle: ModelBundle, traj: GeneratedTrajectory) -> DiagGaussian:
    """Q_alpha(V | generated trajectory), a separate sequence encoder."""
    if bundle.aux is None:
        raise ConfigurationError("bundle has no auxiliary posterior (with_aux=False)")
    return _run_encoder(bundle.aux, _states_tensor(bundle, traj.states))[0]


# -- checkpoint container ------------------------------------------------------
#
# Layout: magic, uint64 little-endian header length, UTF-8 JSON header, then
# each parameter as contiguous little-endian float64 in header order.


def save_checkpoint(path, bundle: ModelBundle, seed: int, extra: Optional[dict] = None) -> None:
    params = bundle.flat_parameters()
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": bundle.config.to_dict(),
        "seed": int(seed),
        "params": [[name, list(arr.shape)] for name, arr in params.items()],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Return (header, {name: array}) without building a model."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise InvalidInputError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12:12 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint format {header.get('format_version')}")
    offset = 12 + n
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        params[name] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise InvalidInputError(f"{path} has {len(data) - offset} trailing bytes")
    return header, params


def load_checkpoint(path):
    """Return (bundle, header)."""
    header, params = read_checkpoint(path)
    bundle = ModelBundle(ModelConfig.from_dict(header["model_config"]))
    expected = bundle.state_dict()
    if set(expected) != set(params):
        raise InvalidInputError("checkpoint parameters do not match its model_config")
    state = {}
    for name, arr in params.items():
        if tuple(expected[name].shape) != arr.shape:
            raise InvalidInputError(f"parameter {name} has shape {arr.shape}, expected {tuple(expected[name].shape)}")
        state[name] = torch.from_numpy(arr.copy())
    bundle.load_state_dict(state)
    return bundle, header
