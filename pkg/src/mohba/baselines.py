"""Comparison methods: a causal next-action LSTM predictor and a flat (joint-only) VAE.

The LSTM predicts the joint action a_t from [s_t || a_{t-1}] (a_{-1} = 0) and
uses its final hidden state as the trajectory embedding. The flat VAE reuses the
hierarchical model's joint encoder/prior but feeds z_omega straight into the
policies, so its loss has no local KL term.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .hvae import (
    GMMParams,
    LOG_STD_MAX,
    LOG_STD_MIN,
    TensorBatch,
    _gaussian_log_prob,
    _gmm_log_prob,
    _mlp,
    _sample_gmm_batch,
    init_model_parameters_,
    to_tensor_batch,
)
from .trajdata import DatasetMeta, Trajectory, TrajectoryDataset
from .training import TrainConfig, fit, register_model_class

__all__ = [
    "LstmConfig",
    "LstmBaseline",
    "LstmBatch",
    "lstm_train",
    "lstm_embed",
    "FlatVaeConfig",
    "FlatVae",
    "flat_elbo",
    "flat_vae_train",
]


@dataclass(frozen=True)
class LstmConfig:
    n_agents: int
    state_dim: int
    action_dims: tuple[int, ...]
    rnn_hidden: int = 64
    head_hidden: int = 32
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "action_dims", tuple(int(a) for a in self.action_dims))
        if len(self.action_dims) != self.n_agents:
            raise ValueError("action_dims length must equal n_agents")
        if min(self.n_agents, self.state_dim, self.rnn_hidden, self.head_hidden) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @classmethod
    def from_meta(cls, meta: DatasetMeta, **overrides) -> "LstmConfig":
        return cls(n_agents=meta.n_agents, state_dim=meta.state_dim,
                   action_dims=meta.action_dims, **overrides)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class LstmBatch:
    """Inputs [s_t || a_{t-1}] and joint-action targets for the predictor."""

    inputs: torch.Tensor   # [B, T, S + sum(action_dims)]
    targets: torch.Tensor  # [B, T, sum(action_dims)]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def index(self, idx: torch.Tensor) -> "LstmBatch":
        return LstmBatch(self.inputs[idx], self.targets[idx])


def lstm_batch_from(trajs: list[Trajectory], config: LstmConfig) -> LstmBatch:
    tb = to_tensor_batch(trajs, _as_model_shapes(config))
    S = config.state_dim
    states, acts = tb.joint_in[..., :S], tb.joint_in[..., S:]
    prev = torch.cat([torch.zeros_like(acts[:, :1]), acts[:, :-1]], dim=1)
    return LstmBatch(inputs=torch.cat([states, prev], dim=-1), targets=acts)


def _as_model_shapes(config):
    from .hvae import ModelConfig

    return ModelConfig(n_agents=config.n_agents, state_dim=config.state_dim,
                       action_dims=config.action_dims, dtype=config.dtype)


class LstmBaseline(nn.Module):
    """Single-direction (causal) LSTM over joint inputs with an MLP action head."""

    def __init__(self, config: LstmConfig, init_seed: int = 0):
        super().__init__()
        self.config = config
        dtype = config.torch_dtype
        in_dim = config.state_dim + sum(config.action_dims)
        self.rnn = nn.LSTM(in_dim, config.rnn_hidden, batch_first=True, dtype=dtype)
        self.head = _mlp(config.rnn_hidden, config.head_hidden,
                         sum(config.action_dims), dtype)
        init_model_parameters_(self, init_seed)

    def predict(self, batch: LstmBatch) -> torch.Tensor:
        out, _ = self.rnn(batch.inputs)
        return self.head(out)


def _lstm_loss(model: LstmBaseline, batch: LstmBatch, beta: float, rng):
    # beta and rng are unused: the predictor is deterministic with a pure MSE loss
    err = model.predict(batch) - batch.targets
    mse = err.pow(2).sum(dim=(1, 2)).mean()
    return mse, {"mse": mse}


def lstm_train(dataset: TrajectoryDataset, config: TrainConfig,
               model_config: LstmConfig | None = None, resume=None,
               return_state: bool = False, model: "LstmBaseline | None" = None):
    """Fit the next-action predictor with the shared optimizer/clipping loop.

    Pass model together with resume to continue from a checkpointed state.
    """
    if model is not None:
        model_config = model.config
    else:
        model_config = model_config or LstmConfig.from_meta(dataset.meta)
        model = LstmBaseline(model_config, init_seed=config.seed)
    data = lstm_batch_from(dataset.trajectories, model_config)
    model, log, state = fit(model, data, config, _lstm_loss, ("mse",), resume)
    if return_state:
        return model, log, state
    return model, log


def lstm_embed(model: LstmBaseline, traj: Trajectory) -> torch.Tensor:
    """Final hidden state of the predictor run over the whole trajectory."""
    batch = lstm_batch_from([traj], model.config)
    with torch.no_grad():
        _, (h_n, _) = model.rnn(batch.inputs)
    return h_n[0, 0]


@dataclass(frozen=True)
class FlatVaeConfig:
    n_agents: int
    state_dim: int
    action_dims: tuple[int, ...]
    d_omega: int = 4
    gmm_components: int = 8
    rnn_hidden: int = 64
    mlp_hidden: int = 64
    policy_hidden: int = 32
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "action_dims", tuple(int(a) for a in self.action_dims))
        if len(self.action_dims) != self.n_agents:
            raise ValueError("action_dims length must equal n_agents")
        dims = (self.d_omega, self.gmm_components, self.rnn_hidden, self.mlp_hidden,
                self.policy_hidden, self.state_dim, self.n_agents)
        if min(dims) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @classmethod
    def from_meta(cls, meta: DatasetMeta, **overrides) -> "FlatVaeConfig":
        return cls(n_agents=meta.n_agents, state_dim=meta.state_dim,
                   action_dims=meta.action_dims, **overrides)

    @property
    def max_action_dim(self) -> int:
        return max(self.action_dims)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


class FlatVae(nn.Module):
    """Joint GMM encoder/prior as in the hierarchical model; policies consume z_omega."""

    def __init__(self, config: FlatVaeConfig, init_seed: int = 0):
        super().__init__()
        self.config = config
        dtype = config.torch_dtype
        N, S, M = config.n_agents, config.state_dim, config.gmm_components
        self.joint_rnn = nn.LSTM(S + sum(config.action_dims), config.rnn_hidden,
                                 batch_first=True, bidirectional=True, dtype=dtype)
        self.joint_head = _mlp(2 * config.rnn_hidden, config.mlp_hidden,
                               M + 2 * M * config.d_omega, dtype)
        self.policy_net = _mlp(S + config.d_omega + N, config.policy_hidden,
                               2 * config.max_action_dim, dtype)
        self.prior_logits = nn.Parameter(torch.zeros(M, dtype=dtype))
        self.prior_means = nn.Parameter(torch.zeros(M, config.d_omega, dtype=dtype))
        self.prior_log_stds = nn.Parameter(torch.zeros(M, config.d_omega, dtype=dtype))
        init_model_parameters_(self, init_seed)

    @property
    def joint_prior(self) -> GMMParams:
        return GMMParams(self.prior_logits, self.prior_means, self.prior_log_stds)

    def joint_params_batch(self, tb: TensorBatch):
        cfg = self.config
        _, (h_n, _) = self.joint_rnn(tb.joint_in)
        out = self.joint_head(torch.cat([h_n[0], h_n[1]], dim=-1))
        M, D = cfg.gmm_components, cfg.d_omega
        logits = out[:, :M]
        means = out[:, M : M + M * D].reshape(-1, M, D)
        log_stds = torch.clamp(out[:, M + M * D :].reshape(-1, M, D),
                               LOG_STD_MIN, LOG_STD_MAX)
        return logits, means, log_stds

    def policy_params_batch(self, states: torch.Tensor, z_omega: torch.Tensor):
        B, T, S = states.shape
        N = self.config.n_agents
        eye = torch.eye(N, dtype=states.dtype)[None, :, None].expand(B, N, T, N)
        inp = torch.cat(
            [
                states[:, None].expand(B, N, T, S),
                z_omega[:, None, None].expand(B, N, T, self.config.d_omega),
                eye,
            ],
            dim=-1,
        )
        out = self.policy_net(inp)
        mean, log_std = out.chunk(2, dim=-1)
        return mean, torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)


def flat_elbo(model: FlatVae, batch, beta: float, rng: torch.Generator,
              kl_samples: int = 1):
    """Loss = -(recon - beta * kl_joint); no local term exists in this model."""
    cfg = model.config
    tb = batch if isinstance(batch, TensorBatch) else to_tensor_batch(batch, _flat_shapes(cfg))
    B = len(tb)
    logits, mu_w, ls_w = model.joint_params_batch(tb)
    z_w = _sample_gmm_batch(logits, mu_w, ls_w, rng)

    means, log_stds = model.policy_params_batch(tb.states, z_w)
    recon = torch.zeros(B, dtype=mu_w.dtype)
    for i in range(cfg.n_agents):
        a_i = cfg.action_dims[i]
        recon = recon + _gaussian_log_prob(
            tb.actions[:, i, :, :a_i], means[:, i, :, :a_i], log_stds[:, i, :, :a_i]
        ).sum(dim=-1)

    prior = model.joint_prior
    kl_joint = torch.zeros(B, dtype=mu_w.dtype)
    for _ in range(kl_samples):
        z = _sample_gmm_batch(logits, mu_w, ls_w, rng)
        kl_joint = kl_joint + (
            _gmm_log_prob(z, logits, mu_w, ls_w)
            - _gmm_log_prob(z, prior.logits, prior.means, prior.log_stds)
        )
    kl_joint = kl_joint / kl_samples

    parts = {"recon": recon.mean(), "kl_joint": kl_joint.mean()}
    loss = -(parts["recon"] - beta * parts["kl_joint"])
    return loss, parts


def _flat_shapes(config: FlatVaeConfig):
    from .hvae import ModelConfig

    return ModelConfig(n_agents=config.n_agents, state_dim=config.state_dim,
                       action_dims=config.action_dims, d_omega=config.d_omega,
                       gmm_components=config.gmm_components, dtype=config.dtype)


def flat_vae_train(dataset: TrajectoryDataset, config: TrainConfig,
                   model_config: FlatVaeConfig | None = None, resume=None,
                   return_state: bool = False, model: "FlatVae | None" = None):
    """Fit the joint-only VAE with the shared optimizer/clipping loop.

    Pass model together with resume to continue from a checkpointed state.
    """
    if model is not None:
        model_config = model.config
    else:
        model_config = model_config or FlatVaeConfig.from_meta(dataset.meta)
        model = FlatVae(model_config, init_seed=config.seed)
    data = to_tensor_batch(dataset.trajectories, _flat_shapes(model_config))

    def loss_fn(mdl, batch, beta, rng):
        return flat_elbo(mdl, batch, beta, rng, kl_samples=config.kl_samples)

    model, log, state = fit(model, data, config, loss_fn, ("recon", "kl_joint"), resume)
    if return_state:
        return model, log, state
    return model, log


def flat_vae_embed(model: FlatVae, traj: Trajectory) -> torch.Tensor:
    """Posterior-mean z_omega: mixture weights times component means."""
    tb = to_tensor_batch([traj], _flat_shapes(model.config))
    with torch.no_grad():
        logits, means, _ = model.joint_params_batch(tb)
    w = torch.softmax(logits[0], dim=-1)
    return (w[:, None] * means[0]).sum(dim=0)


register_model_class(LstmBaseline, LstmConfig)
register_model_class(FlatVae, FlatVaeConfig)
