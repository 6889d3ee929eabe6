"""Training loop shared by the hierarchical model and the baselines.

Hand-written Adam and global-norm clipping keep updates bit-reproducible: the
loop consumes one explicit torch.Generator (batch indices first, then the loss
function's own draws), so (seed, config, dataset) fully determine the result,
and a checkpoint stores parameters, Adam moments, step count, and the rng state
so a resumed run is step-identical to an uninterrupted one.

Checkpoint layout: magic ``MHBCKPT1``, little-endian uint32 header length, a
JSON header (model class, model config, tensor manifest, train state), then the
raw little-endian row-major tensor payloads in manifest order.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .hvae import ModelConfig, MohbaModel, elbo, to_tensor_batch
from .trajdata import TrajectoryDataset

__all__ = [
    "TrainConfig",
    "MetricsLog",
    "OptimizerState",
    "beta_schedule",
    "clip_global_norm",
    "fit",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "register_model_class",
]

ADAM_EPS = 1e-8
CHECKPOINT_MAGIC = b"MHBCKPT1"

_MODEL_REGISTRY: dict[str, tuple[type, type]] = {}


def register_model_class(model_cls: type, config_cls: type) -> None:
    _MODEL_REGISTRY[model_cls.__name__] = (model_cls, config_cls)


register_model_class(MohbaModel, ModelConfig)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 100_000
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta_max: float = 1e-2
    anneal_period: int = 5_000
    clip_norm: float = 10.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    seed: int = 0
    kl_samples: int = 1
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if min(self.batch_size, self.anneal_period, self.kl_samples, self.log_every) < 1:
            raise ValueError("batch_size, anneal_period, kl_samples, log_every must be >= 1")
        if min(self.learning_rate, self.clip_norm) <= 0 or self.beta_max < 0:
            raise ValueError("learning_rate and clip_norm must be positive, beta_max >= 0")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("adam betas must lie in [0, 1)")


@dataclass
class MetricsLog:
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(self.columns) + "\n")
            for row in self.rows:
                cells = [str(int(row[0]))] + [format(float(v), ".17g") for v in row[1:]]
                fh.write(",".join(cells) + "\n")

    @classmethod
    def read_csv(cls, path) -> "MetricsLog":
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        columns = tuple(lines[0].split(","))
        rows = [tuple(float(c) for c in line.split(",")) for line in lines[1:] if line]
        return cls(columns=columns, rows=rows)

    def column(self, name: str) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([row[j] for row in self.rows])


@dataclass
class OptimizerState:
    """Adam moments plus the position and rng state of the training stream."""

    step: int
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    rng_state: torch.Tensor


def beta_schedule(step: int, config: TrainConfig) -> float:
    """Cyclical KL weight: linear 0 -> beta_max over the first half-cycle, then flat."""
    if step < 0:
        raise ValueError("step must be >= 0")
    pos = step % config.anneal_period
    half = config.anneal_period / 2.0
    if pos < half:
        return config.beta_max * (pos / half)
    return config.beta_max


def clip_global_norm(gradients, clip_norm: float):
    """Scale all gradients jointly so their global L2 norm is at most clip_norm."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    grads = list(gradients)
    total = math.sqrt(sum(float(g.pow(2).sum()) for g in grads))
    if total <= clip_norm:
        return grads
    scale = clip_norm / total
    return [g * scale for g in grads]


def _check_finite(loss: torch.Tensor, parts: dict, step: int) -> None:
    if not torch.isfinite(loss):
        detail = ", ".join(f"{k}={v.item():.6g}" for k, v in parts.items())
        raise RuntimeError(f"non-finite loss {loss.item()} at step {step} ({detail})")


def fit(model: torch.nn.Module, data, config: TrainConfig, loss_fn,
        part_names: tuple[str, ...], resume: OptimizerState | None = None):
    """Generic loop: uniform-with-replacement batches, clip, Adam, periodic logging.

    data must support len() and .index(tensor-of-indices); loss_fn(model, batch,
    beta, rng) returns (loss, parts) with parts keyed exactly by part_names.
    Returns (model, MetricsLog, OptimizerState).
    """
    n = len(data)
    if n < 1:
        raise ValueError("empty dataset")
    params = list(model.named_parameters())
    rng = torch.Generator()
    if resume is None:
        rng.manual_seed(config.seed)
        start = 0
        m = {name: torch.zeros_like(p) for name, p in params}
        v = {name: torch.zeros_like(p) for name, p in params}
    else:
        rng.set_state(resume.rng_state.clone())
        start = resume.step
        m = {k: t.clone() for k, t in resume.m.items()}
        v = {k: t.clone() for k, t in resume.v.items()}
    log = MetricsLog(columns=("step", "loss") + part_names + ("beta",))
    b1, b2, lr = config.adam_beta1, config.adam_beta2, config.learning_rate
    for step in range(start, config.steps):
        idx = torch.randint(0, n, (config.batch_size,), generator=rng)
        beta = beta_schedule(step, config)
        loss, parts = loss_fn(model, data.index(idx), beta, rng)
        _check_finite(loss, parts, step)
        if step % config.log_every == 0:
            log.rows.append((step, loss.item())
                            + tuple(parts[k].item() for k in part_names) + (beta,))
        model.zero_grad(set_to_none=False)
        loss.backward()
        grads = clip_global_norm((p.grad for _, p in params), config.clip_norm)
        t = step + 1
        with torch.no_grad():
            for (name, p), g in zip(params, grads):
                m[name].mul_(b1).add_(g, alpha=1.0 - b1)
                v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
                m_hat = m[name] / (1.0 - b1**t)
                v_hat = v[name] / (1.0 - b2**t)
                p.addcdiv_(m_hat, v_hat.sqrt().add_(ADAM_EPS), value=-lr)
    state = OptimizerState(step=config.steps, m=m, v=v, rng_state=rng.get_state())
    return model, log, state


MOHBA_PART_NAMES = ("recon", "kl_local", "kl_joint")


def train(model: MohbaModel, dataset: TrajectoryDataset, config: TrainConfig,
          resume: OptimizerState | None = None, return_state: bool = False):
    """Optimize the hierarchical model's negative lower bound on the dataset."""
    meta = dataset.meta
    cfg = model.config
    if (meta.n_agents, meta.state_dim, tuple(meta.action_dims)) != (
        cfg.n_agents, cfg.state_dim, cfg.action_dims,
    ):
        raise ValueError(
            f"dataset meta ({meta.n_agents} agents, state {meta.state_dim}, "
            f"actions {meta.action_dims}) does not match the model config"
        )
    data = to_tensor_batch(dataset.trajectories, cfg)

    def loss_fn(mdl, batch, beta, rng):
        return elbo(mdl, batch, beta, rng, kl_samples=config.kl_samples)

    model, log, state = fit(model, data, config, loss_fn, MOHBA_PART_NAMES, resume)
    if return_state:
        return model, log, state
    return model, log


def _tensor_entries(model: torch.nn.Module, state: OptimizerState | None):
    entries = [(name, p.detach()) for name, p in model.named_parameters()]
    if state is not None:
        entries += [(f"adam.m.{k}", t) for k, t in state.m.items()]
        entries += [(f"adam.v.{k}", t) for k, t in state.v.items()]
        entries.append(("rng_state", state.rng_state))
    return entries


def save_checkpoint(model: torch.nn.Module, optimizer_state: OptimizerState | None,
                    path) -> None:
    """Write model config, parameters, and (optionally) optimizer state to one file."""
    entries = _tensor_entries(model, optimizer_state)
    manifest = [
        {"name": name, "shape": list(t.shape), "dtype": str(t.numpy().dtype)}
        for name, t in entries
    ]
    header = {
        "format_version": 1,
        "model_class": type(model).__name__,
        "model_config": dataclasses.asdict(model.config),
        "tensors": manifest,
        "train": None if optimizer_state is None else {"step": optimizer_state.step},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, t in entries:
            arr = t.numpy()
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _lookup_model_class(name: str):
    if name not in _MODEL_REGISTRY:
        # baseline classes register themselves on import
        from . import baselines  # noqa: F401
    if name not in _MODEL_REGISTRY:
        raise ValueError(f"checkpoint references unknown model class {name!r}")
    return _MODEL_REGISTRY[name]


def load_checkpoint(path, expected_config=None):
    """Rebuild (model, optimizer_state) from a checkpoint file.

    expected_config, when given, must equal the stored model config exactly.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint header: {exc}") from exc
    off += hlen
    model_cls, config_cls = _lookup_model_class(header["model_class"])
    config = config_cls(**header["model_config"])
    if expected_config is not None and config != expected_config:
        raise ValueError(
            f"checkpoint config {config} does not match expected {expected_config}"
        )
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(entry["shape"])
        off += arr.nbytes
        tensors[entry["name"]] = torch.from_numpy(arr.astype(dtype.newbyteorder("=")))
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after tensor payloads")
    model = model_cls(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in tensors:
                raise ValueError(f"{path}: checkpoint missing parameter {name}")
            p.copy_(tensors[name])
    state = None
    if header.get("train") is not None:
        state = OptimizerState(
            step=int(header["train"]["step"]),
            m={n: tensors[f"adam.m.{n}"] for n, _ in model.named_parameters()},
            v={n: tensors[f"adam.v.{n}"] for n, _ in model.named_parameters()},
            rng_state=tensors["rng_state"],
        )
    return model, state
