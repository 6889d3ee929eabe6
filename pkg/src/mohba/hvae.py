"""Hierarchical VAE over multiagent trajectories.

A joint GMM encoder/prior captures trajectory-level structure in z_omega;
per-agent Gaussian encoders with a z_omega-conditioned prior capture local
behavior in z_alpha^i; latent-conditioned Gaussian policies reconstruct the
logged actions. The training objective is the negative variational lower bound
(reconstruction minus beta-weighted local and joint KL terms).

Agent identity enters every shared network only through a one-hot input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .trajdata import DatasetMeta, Trajectory

__all__ = [
    "DiagGaussianParams",
    "GMMParams",
    "ModelConfig",
    "MohbaModel",
    "LatentSample",
    "TensorBatch",
    "to_tensor_batch",
    "init_model_parameters_",
    "encode_joint",
    "encode_local",
    "local_prior",
    "sample_gaussian",
    "sample_gmm",
    "sample_latents",
    "gaussian_kl",
    "gmm_kl_mc",
    "policy_log_prob",
    "elbo",
]

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DiagGaussianParams:
    """Diagonal Gaussian; log_std is clamped to [-5, 2] at construction."""

    mean: torch.Tensor
    log_std: torch.Tensor

    def __post_init__(self):
        self.log_std = torch.clamp(self.log_std, LOG_STD_MIN, LOG_STD_MAX)
        if self.mean.shape != self.log_std.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != log_std shape {tuple(self.log_std.shape)}"
            )


@dataclass
class GMMParams:
    """Gaussian mixture with softmax(logits) weights; log_stds clamped like DiagGaussianParams."""

    logits: torch.Tensor   # (M,)
    means: torch.Tensor    # (M, D)
    log_stds: torch.Tensor  # (M, D)

    def __post_init__(self):
        self.log_stds = torch.clamp(self.log_stds, LOG_STD_MIN, LOG_STD_MAX)
        M = self.logits.shape[-1]
        if self.means.shape[-2] != M or self.means.shape != self.log_stds.shape:
            raise ValueError("GMMParams shapes inconsistent")

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)


@dataclass(frozen=True)
class ModelConfig:
    n_agents: int
    state_dim: int
    action_dims: tuple[int, ...]
    d_omega: int = 4
    d_alpha: int = 4
    gmm_components: int = 8
    rnn_hidden: int = 64
    mlp_hidden: int = 64
    policy_hidden: int = 32
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "action_dims", tuple(int(a) for a in self.action_dims))
        if len(self.action_dims) != self.n_agents:
            raise ValueError("action_dims length must equal n_agents")
        dims = (self.d_omega, self.d_alpha, self.gmm_components, self.rnn_hidden,
                self.mlp_hidden, self.policy_hidden, self.state_dim, self.n_agents)
        if min(dims) < 1 or min(self.action_dims) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @classmethod
    def from_meta(cls, meta: DatasetMeta, **overrides) -> "ModelConfig":
        return cls(n_agents=meta.n_agents, state_dim=meta.state_dim,
                   action_dims=meta.action_dims, **overrides)

    @property
    def max_action_dim(self) -> int:
        return max(self.action_dims)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class LatentSample:
    z_omega: torch.Tensor   # (d_omega,)
    z_alpha: torch.Tensor   # (n_agents, d_alpha)


@dataclass
class TensorBatch:
    """Pre-assembled model inputs for a list of trajectories.

    states holds the observations s_0..s_{T-1} that pair with the T logged
    actions; encoders and policies never consume s_T.
    """

    states: torch.Tensor    # [B, T, S]
    joint_in: torch.Tensor  # [B, T, S + sum(action_dims)]
    local_in: torch.Tensor  # [B, N, T, S + max_action_dim + N]
    actions: torch.Tensor   # [B, N, T, max_action_dim], zero-padded per agent

    def __len__(self) -> int:
        return self.states.shape[0]

    def index(self, idx: torch.Tensor) -> "TensorBatch":
        return TensorBatch(self.states[idx], self.joint_in[idx],
                           self.local_in[idx], self.actions[idx])


def to_tensor_batch(trajs: list[Trajectory], config: ModelConfig) -> TensorBatch:
    if not trajs:
        raise ValueError("empty batch")
    dtype = config.torch_dtype
    N, S, amax = config.n_agents, config.state_dim, config.max_action_dim
    T = trajs[0].states.shape[0] - 1
    states = np.empty((len(trajs), T, S))
    actions = np.zeros((len(trajs), N, T, amax))
    for b, traj in enumerate(trajs):
        if traj.states.shape != (T + 1, S) or len(traj.actions) != N:
            raise ValueError(
                f"trajectory {b} has states {traj.states.shape}, expected {(T + 1, S)} "
                f"with {N} agents"
            )
        states[b] = traj.states[:T]
        for i, a_i in enumerate(traj.actions):
            if a_i.shape != (T, config.action_dims[i]):
                raise ValueError(
                    f"trajectory {b}: agent {i} actions {a_i.shape}, "
                    f"expected {(T, config.action_dims[i])}"
                )
            actions[b, i, :, : config.action_dims[i]] = a_i
    states_t = torch.from_numpy(states).to(dtype)
    actions_t = torch.from_numpy(actions).to(dtype)
    joint_parts = [states_t] + [
        actions_t[:, i, :, : config.action_dims[i]] for i in range(N)
    ]
    joint_in = torch.cat(joint_parts, dim=-1)
    eye = torch.eye(N, dtype=dtype)
    onehot = eye[None, :, None, :].expand(len(trajs), N, T, N)
    local_in = torch.cat(
        [states_t[:, None].expand(len(trajs), N, T, S), actions_t, onehot], dim=-1
    )
    return TensorBatch(states_t, joint_in, local_in, actions_t)


def _mlp(in_dim: int, hidden: int, out_dim: int, dtype: torch.dtype) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden, dtype=dtype),
        nn.ReLU(),
        nn.Linear(hidden, out_dim, dtype=dtype),
    )


def init_model_parameters_(model: nn.Module, seed: int) -> None:
    """Deterministic init: fan-in-scaled uniform weights, zero biases.

    Free GMM prior parameters, when present, get spread means U(-1, 1) and zero
    logits/log_stds. Uses its own generator so global torch RNG state never
    matters.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name == "prior_means":
                p.uniform_(-1.0, 1.0, generator=gen)
            elif name in ("prior_logits", "prior_log_stds") or "bias" in name:
                p.zero_()
            else:
                bound = 1.0 / math.sqrt(p.shape[-1])
                p.uniform_(-bound, bound, generator=gen)


class MohbaModel(nn.Module):
    """Joint GMM encoder/prior, shared local encoder/prior, and shared policy head."""

    def __init__(self, config: ModelConfig, init_seed: int = 0):
        super().__init__()
        self.config = config
        dtype = config.torch_dtype
        N, S = config.n_agents, config.state_dim
        amax, M = config.max_action_dim, config.gmm_components
        joint_in = S + sum(config.action_dims)
        self.joint_rnn = nn.LSTM(joint_in, config.rnn_hidden, batch_first=True,
                                 bidirectional=True, dtype=dtype)
        self.joint_head = _mlp(2 * config.rnn_hidden, config.mlp_hidden,
                               M + 2 * M * config.d_omega, dtype)
        self.local_rnn = nn.LSTM(S + amax + N, config.rnn_hidden, batch_first=True,
                                 bidirectional=True, dtype=dtype)
        self.local_head = _mlp(2 * config.rnn_hidden, config.mlp_hidden,
                               2 * config.d_alpha, dtype)
        self.local_prior_net = _mlp(config.d_omega + N, config.mlp_hidden,
                                    2 * config.d_alpha, dtype)
        self.policy_net = _mlp(S + config.d_alpha + N, config.policy_hidden,
                               2 * amax, dtype)
        self.prior_logits = nn.Parameter(torch.zeros(M, dtype=dtype))
        self.prior_means = nn.Parameter(torch.zeros(M, config.d_omega, dtype=dtype))
        self.prior_log_stds = nn.Parameter(torch.zeros(M, config.d_omega, dtype=dtype))
        self._init_parameters(init_seed)

    def _init_parameters(self, seed: int) -> None:
        init_model_parameters_(self, seed)

    @property
    def joint_prior(self) -> GMMParams:
        return GMMParams(self.prior_logits, self.prior_means, self.prior_log_stds)

    def _agent_eye(self) -> torch.Tensor:
        return torch.eye(self.config.n_agents, dtype=self.config.torch_dtype)

    def _bidir_summary(self, rnn: nn.LSTM, seq: torch.Tensor) -> torch.Tensor:
        _, (h_n, _) = rnn(seq)
        # final hidden state of each direction, concatenated: [B, 2H]
        return torch.cat([h_n[0], h_n[1]], dim=-1)

    def joint_params_batch(self, tb: TensorBatch):
        cfg = self.config
        out = self.joint_head(self._bidir_summary(self.joint_rnn, tb.joint_in))
        M, D = cfg.gmm_components, cfg.d_omega
        logits = out[:, :M]
        means = out[:, M : M + M * D].reshape(-1, M, D)
        log_stds = torch.clamp(out[:, M + M * D :].reshape(-1, M, D),
                               LOG_STD_MIN, LOG_STD_MAX)
        return logits, means, log_stds

    def local_params_batch(self, tb: TensorBatch):
        B, N, T, F = tb.local_in.shape
        summary = self._bidir_summary(self.local_rnn, tb.local_in.reshape(B * N, T, F))
        out = self.local_head(summary).reshape(B, N, 2 * self.config.d_alpha)
        mean, log_std = out.chunk(2, dim=-1)
        return mean, torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)

    def local_prior_batch(self, z_omega: torch.Tensor):
        B = z_omega.shape[0]
        N = self.config.n_agents
        eye = self._agent_eye()[None].expand(B, N, N)
        inp = torch.cat([z_omega[:, None].expand(B, N, self.config.d_omega), eye], dim=-1)
        out = self.local_prior_net(inp)
        mean, log_std = out.chunk(2, dim=-1)
        return mean, torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)

    def policy_params_batch(self, states: torch.Tensor, z_alpha: torch.Tensor):
        B, T, S = states.shape
        N = self.config.n_agents
        eye = self._agent_eye()[None, :, None].expand(B, N, T, N)
        inp = torch.cat(
            [
                states[:, None].expand(B, N, T, S),
                z_alpha[:, :, None].expand(B, N, T, self.config.d_alpha),
                eye,
            ],
            dim=-1,
        )
        out = self.policy_net(inp)
        mean, log_std = out.chunk(2, dim=-1)
        return mean, torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)


def _gaussian_log_prob(x: torch.Tensor, mean: torch.Tensor,
                       log_std: torch.Tensor) -> torch.Tensor:
    z = (x - mean) * torch.exp(-log_std)
    return (-0.5 * z * z - log_std - 0.5 * LOG_2PI).sum(dim=-1)


def _gmm_log_prob(z: torch.Tensor, logits: torch.Tensor, means: torch.Tensor,
                  log_stds: torch.Tensor) -> torch.Tensor:
    log_w = torch.log_softmax(logits, dim=-1)
    comp = _gaussian_log_prob(z.unsqueeze(-2), means, log_stds)
    return torch.logsumexp(log_w + comp, dim=-1)


def _diag_kl(mean_q, log_std_q, mean_p, log_std_p) -> torch.Tensor:
    var_ratio = torch.exp(2.0 * (log_std_q - log_std_p))
    delta = (mean_q - mean_p) * torch.exp(-log_std_p)
    return (log_std_p - log_std_q + 0.5 * (var_ratio + delta * delta) - 0.5).sum(dim=-1)


def _sample_gmm_batch(logits, means, log_stds, rng: torch.Generator):
    """Inverse-CDF component pick per row, then a reparameterized in-component draw.

    Draw order per call: B uniforms (skipped when M == 1), then B x D normals.
    """
    B, M, D = means.shape
    dtype = means.dtype
    if M == 1:
        idx = torch.zeros(B, dtype=torch.long)
    else:
        probs = torch.softmax(logits.detach(), dim=-1)
        u = torch.rand(B, 1, generator=rng, dtype=dtype)
        idx = torch.searchsorted(probs.cumsum(dim=-1), u).clamp(max=M - 1).squeeze(1)
    gather = idx[:, None, None].expand(B, 1, D)
    mean = means.gather(1, gather).squeeze(1)
    log_std = log_stds.gather(1, gather).squeeze(1)
    eps = torch.randn(B, D, generator=rng, dtype=dtype)
    return mean + torch.exp(log_std) * eps


def _check_traj(model: MohbaModel, traj: Trajectory) -> TensorBatch:
    return to_tensor_batch([traj], model.config)


def encode_joint(model: MohbaModel, traj: Trajectory) -> GMMParams:
    """Posterior GMM over z_omega from the joint sequence [s_t || a_t^1 || ... || a_t^N]."""
    logits, means, log_stds = model.joint_params_batch(_check_traj(model, traj))
    return GMMParams(logits[0], means[0], log_stds[0])


def encode_local(model: MohbaModel, traj: Trajectory, agent_index: int) -> DiagGaussianParams:
    """Posterior Gaussian over z_alpha^i from [s_t || a_t^i || onehot(i)]."""
    if not 0 <= agent_index < model.config.n_agents:
        raise ValueError(f"agent_index {agent_index} out of range")
    mean, log_std = model.local_params_batch(_check_traj(model, traj))
    return DiagGaussianParams(mean[0, agent_index], log_std[0, agent_index])


def local_prior(model: MohbaModel, z_omega, agent_index: int) -> DiagGaussianParams:
    """Prior Gaussian over z_alpha^i conditioned on [z_omega || onehot(i)]."""
    if not 0 <= agent_index < model.config.n_agents:
        raise ValueError(f"agent_index {agent_index} out of range")
    z = torch.as_tensor(z_omega, dtype=model.config.torch_dtype)
    if z.shape != (model.config.d_omega,):
        raise ValueError(f"z_omega shape {tuple(z.shape)}, expected ({model.config.d_omega},)")
    mean, log_std = model.local_prior_batch(z[None])
    return DiagGaussianParams(mean[0, agent_index], log_std[0, agent_index])


def sample_gaussian(params: DiagGaussianParams, rng: torch.Generator) -> torch.Tensor:
    """Reparameterized draw: mean + exp(log_std) * eps."""
    eps = torch.randn(params.mean.shape, generator=rng, dtype=params.mean.dtype)
    return params.mean + torch.exp(params.log_std) * eps


def sample_gmm(params: GMMParams, rng: torch.Generator) -> torch.Tensor:
    """Component via inverse CDF on softmax(logits), then a reparameterized draw.

    With a single component no uniform is consumed, so the call reduces exactly
    to sample_gaussian on that component.
    """
    return _sample_gmm_batch(params.logits[None], params.means[None],
                             params.log_stds[None], rng)[0]


def sample_latents(model: MohbaModel, traj: Trajectory, rng: torch.Generator) -> LatentSample:
    """One posterior draw of (z_omega, z_alpha) for a trajectory."""
    z_w = sample_gmm(encode_joint(model, traj), rng)
    z_a = torch.stack([
        sample_gaussian(encode_local(model, traj, i), rng)
        for i in range(model.config.n_agents)
    ])
    return LatentSample(z_omega=z_w, z_alpha=z_a)


def gaussian_kl(q: DiagGaussianParams, p: DiagGaussianParams) -> torch.Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over dims."""
    if q.mean.shape != p.mean.shape:
        raise ValueError("dimension mismatch between q and p")
    return _diag_kl(q.mean, q.log_std, p.mean, p.log_std)


def gmm_kl_mc(q: GMMParams, p: GMMParams, n_samples: int, rng: torch.Generator) -> torch.Tensor:
    """Monte Carlo KL(q || p) between mixtures: mean of log q(z) - log p(z), z ~ q.

    All n_samples draws happen in one batched call (component uniforms first,
    then the normal block).
    """
    if q.means.shape[-1] != p.means.shape[-1]:
        raise ValueError("dimension mismatch between q and p")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    M, D = q.means.shape
    z = _sample_gmm_batch(
        q.logits[None].expand(n_samples, M),
        q.means[None].expand(n_samples, M, D),
        q.log_stds[None].expand(n_samples, M, D),
        rng,
    )
    terms = (_gmm_log_prob(z, q.logits, q.means, q.log_stds)
             - _gmm_log_prob(z, p.logits, p.means, p.log_stds))
    return terms.mean()


def policy_log_prob(model: MohbaModel, s_t, a, z_alpha_i, agent_index: int) -> torch.Tensor:
    """Log density of agent i's action under the policy head at [s_t || z_alpha^i || onehot(i)]."""
    cfg = model.config
    if not 0 <= agent_index < cfg.n_agents:
        raise ValueError(f"agent_index {agent_index} out of range")
    dtype = cfg.torch_dtype
    s = torch.as_tensor(s_t, dtype=dtype)
    act = torch.as_tensor(a, dtype=dtype)
    z = torch.as_tensor(z_alpha_i, dtype=dtype)
    a_i = cfg.action_dims[agent_index]
    if s.shape != (cfg.state_dim,) or z.shape != (cfg.d_alpha,) or act.shape != (a_i,):
        raise ValueError("dimension mismatch in policy_log_prob inputs")
    onehot = model._agent_eye()[agent_index]
    out = model.policy_net(torch.cat([s, z, onehot]))
    mean, log_std = out.chunk(2, dim=-1)
    log_std = torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)
    return _gaussian_log_prob(act, mean[:a_i], log_std[:a_i])


def elbo(model: MohbaModel, batch, beta: float, rng: torch.Generator,
         kl_samples: int = 1):
    """Negative lower bound and its parts, averaged over the batch.

    Draw order per call: joint posterior draw (B uniforms then B x D_omega
    normals), local draws (B x N x D_alpha normals), then kl_samples further
    joint posterior draws for the mixture KL.

    Returns (loss, parts); loss is rebuilt from the returned batch-mean parts,
    so loss = -(recon - beta * (kl_local + kl_joint)) holds exactly.
    """
    tb = batch if isinstance(batch, TensorBatch) else to_tensor_batch(batch, model.config)
    cfg = model.config
    B = len(tb)
    logits, mu_w, ls_w = model.joint_params_batch(tb)
    z_w = _sample_gmm_batch(logits, mu_w, ls_w, rng)
    mu_a, ls_a = model.local_params_batch(tb)
    eps = torch.randn(B, cfg.n_agents, cfg.d_alpha, generator=rng, dtype=mu_a.dtype)
    z_a = mu_a + torch.exp(ls_a) * eps

    pr_mean, pr_log_std = model.local_prior_batch(z_w)
    kl_local = _diag_kl(mu_a, ls_a, pr_mean, pr_log_std).sum(dim=-1)

    means, log_stds = model.policy_params_batch(tb.states, z_a)
    recon = torch.zeros(B, dtype=mu_a.dtype)
    for i in range(cfg.n_agents):
        a_i = cfg.action_dims[i]
        recon = recon + _gaussian_log_prob(
            tb.actions[:, i, :, :a_i], means[:, i, :, :a_i], log_stds[:, i, :, :a_i]
        ).sum(dim=-1)

    prior = model.joint_prior
    p_logits = prior.logits[None].expand(B, -1)
    p_means = prior.means[None].expand(B, -1, -1)
    p_log_stds = prior.log_stds[None].expand(B, -1, -1)
    kl_joint = torch.zeros(B, dtype=mu_a.dtype)
    for _ in range(kl_samples):
        z = _sample_gmm_batch(logits, mu_w, ls_w, rng)
        kl_joint = kl_joint + (
            _gmm_log_prob(z, logits, mu_w, ls_w)
            - _gmm_log_prob(z, p_logits, p_means, p_log_stds)
        )
    kl_joint = kl_joint / kl_samples

    parts = {
        "recon": recon.mean(),
        "kl_local": kl_local.mean(),
        "kl_joint": kl_joint.mean(),
    }
    loss = -(parts["recon"] - beta * (parts["kl_local"] + parts["kl_joint"]))
    return loss, parts
