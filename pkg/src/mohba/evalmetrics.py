"""Post-hoc analysis: embeddings, clustering, trajectory metrics, run tracking."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .baselines import FlatVae, LstmBaseline, _flat_shapes, lstm_batch_from
from .envs import agent_dispersion, trajectory_return
from .hvae import MohbaModel, to_tensor_batch
from .trajdata import TrajectoryDataset

__all__ = [
    "ClusterAssignment",
    "EmbeddingTable",
    "apl",
    "dispersion_classes",
    "embed_dataset",
    "ictd",
    "kmeans",
    "pca_project",
    "return_classes",
    "track_run",
]

KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 300


@dataclass
class EmbeddingTable:
    traj_ids: list[int]
    z_omega: np.ndarray
    z_alpha: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.z_omega = np.asarray(self.z_omega, dtype=np.float64)
        self.z_alpha = np.asarray(self.z_alpha, dtype=np.float64)
        if self.z_omega.ndim != 2:
            raise ValueError("z_omega must be 2-d (trajectories x d_omega)")
        if self.z_alpha.ndim != 3:
            raise ValueError("z_alpha must be 3-d (trajectories x agents x d_alpha)")
        k = len(self.traj_ids)
        if self.z_omega.shape[0] != k or self.z_alpha.shape[0] != k:
            raise ValueError("row count does not match traj_ids")

    def __len__(self) -> int:
        return len(self.traj_ids)


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.labels.ndim != 1 or self.centroids.ndim != 2:
            raise ValueError("labels must be 1-d and centroids 2-d")
        c = self.centroids.shape[0]
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= c):
            raise ValueError("labels out of range for centroid count")

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]


def _check_meta(config, meta) -> None:
    if (config.n_agents, config.state_dim, tuple(config.action_dims)) != (
            meta.n_agents, meta.state_dim, tuple(meta.action_dims)):
        raise ValueError("model config does not match dataset metadata")


def embed_dataset(model: MohbaModel, dataset: TrajectoryDataset, sample: bool = False,
                  rng: torch.Generator | None = None,
                  provenance: str = "") -> EmbeddingTable:
    """Posterior embeddings for every trajectory.

    Default is the deterministic posterior mean (z_omega = sum_m w_m mu_m,
    z_alpha = encoder means); sample=True draws one reparameterized sample per
    trajectory instead.
    """
    _check_meta(model.config, dataset.meta)
    if sample and rng is None:
        raise ValueError("sampling requires an rng")
    tb = to_tensor_batch(list(dataset), model.config)
    with torch.no_grad():
        logits, mu_w, ls_w = model.joint_params_batch(tb)
        mu_a, ls_a = model.local_params_batch(tb)
        if sample:
            from .hvae import _sample_gmm_batch
            z_w = _sample_gmm_batch(logits, mu_w, ls_w, rng)
            eps = torch.randn(mu_a.shape, generator=rng, dtype=mu_a.dtype)
            z_a = mu_a + ls_a.exp() * eps
        else:
            w = torch.softmax(logits, dim=-1)
            z_w = (w[:, :, None] * mu_w).sum(dim=1)
            z_a = mu_a
    return EmbeddingTable(traj_ids=list(range(len(dataset))),
                          z_omega=z_w.numpy(), z_alpha=z_a.numpy(),
                          provenance=provenance)


def apl(method: str, model, dataset: TrajectoryDataset) -> float:
    """Action-prediction loss: squared L2 error summed over steps and agents,
    averaged over trajectories.

    Latent-variable models predict the policy mean under posterior-mean latents;
    the recurrent baseline predicts the next joint action directly.
    """
    if method == "lstm":
        if not isinstance(model, LstmBaseline):
            raise ValueError("method 'lstm' requires an LstmBaseline")
        _check_meta(model.config, dataset.meta)
        batch = lstm_batch_from(list(dataset), model.config)
        with torch.no_grad():
            err = model.predict(batch) - batch.targets
        return float(err.pow(2).sum(dim=(1, 2)).mean())

    if method == "mohba":
        if not isinstance(model, MohbaModel):
            raise ValueError("method 'mohba' requires a MohbaModel")
        _check_meta(model.config, dataset.meta)
        tb = to_tensor_batch(list(dataset), model.config)
        with torch.no_grad():
            z_a, _ = model.local_params_batch(tb)
            means, _ = model.policy_params_batch(tb.states, z_a)
    elif method == "flat_vae":
        if not isinstance(model, FlatVae):
            raise ValueError("method 'flat_vae' requires a FlatVae")
        _check_meta(model.config, dataset.meta)
        tb = to_tensor_batch(list(dataset), _flat_shapes(model.config))
        with torch.no_grad():
            logits, mu_w, _ = model.joint_params_batch(tb)
            w = torch.softmax(logits, dim=-1)
            z_w = (w[:, :, None] * mu_w).sum(dim=1)
            means, _ = model.policy_params_batch(tb.states, z_w)
    else:
        raise ValueError(f"unknown method {method!r}")

    total = torch.zeros(len(tb), dtype=means.dtype)
    for i, a_i in enumerate(model.config.action_dims):
        diff = means[:, i, :, :a_i] - tb.actions[:, i, :, :a_i]
        total = total + diff.pow(2).sum(dim=(1, 2))
    return float(total.mean())


def _kmeans_pp_init(points: np.ndarray, n_clusters: int,
                    rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((n_clusters, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for c in range(1, n_clusters):
        total = d2.sum()
        if total <= 0.0:
            centers[c] = points[rng.integers(n)]
        else:
            centers[c] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centers[c]) ** 2).sum(axis=1))
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray):
    prev_inertia = np.inf
    labels = None
    for _ in range(KMEANS_MAX_ITER):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(len(points)), new_labels].sum())
        assert inertia <= prev_inertia + 1e-9, "inertia increased during Lloyd step"
        prev_inertia = inertia
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(centers.shape[0]):
            members = points[labels == c]
            if len(members) == 0:
                # reseed an empty cluster at the point farthest from its centroid
                far = d2[np.arange(len(points)), labels].argmax()
                centers[c] = points[far]
            else:
                centers[c] = members.mean(axis=0)
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    for c in range(centers.shape[0]):
        members = points[labels == c]
        if len(members):
            centers[c] = members.mean(axis=0)
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(points)), labels].sum())
    return labels, centers, inertia


def kmeans(points: np.ndarray, n_clusters: int, seed: int = 0) -> ClusterAssignment:
    """Lloyd iterations with k-means++ seeding; best of 10 restarts."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be 2-d")
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if points.shape[0] < n_clusters:
        raise ValueError("fewer points than clusters")
    best = None
    for restart in range(KMEANS_RESTARTS):
        rng = np.random.default_rng([seed, restart])
        centers = _kmeans_pp_init(points, n_clusters, rng)
        labels, centers, inertia = _lloyd(points, centers)
        if best is None or inertia < best[2]:
            best = (labels, centers, inertia)
    return ClusterAssignment(labels=best[0], centroids=best[1], inertia=best[2])


def _trajectory_matrix(dataset: TrajectoryDataset) -> np.ndarray:
    rows = []
    for traj in dataset:
        parts = [traj.states.ravel()]
        parts.extend(a.ravel() for a in traj.actions)
        rows.append(np.concatenate(parts))
    v = np.asarray(rows, dtype=np.float64)
    sd = v.std(axis=0)
    sd[sd == 0.0] = 1.0
    v = (v - v.mean(axis=0)) / sd
    return v / np.sqrt(v.shape[1])


def ictd(embeddings: np.ndarray, dataset: TrajectoryDataset,
         assignment: ClusterAssignment) -> float:
    """Within-cluster raw-trajectory spread.

    Clusters come from the embedding space; distances are measured between
    normalized flattened state-action vectors and their cluster mean.
    """
    embeddings = np.asarray(embeddings)
    if embeddings.shape[0] != len(dataset):
        raise ValueError("embeddings and dataset differ in length")
    if len(assignment.labels) != len(dataset):
        raise ValueError("assignment does not match dataset")
    v = _trajectory_matrix(dataset)
    total = 0.0
    weight = 0
    for c in range(assignment.n_clusters):
        members = v[assignment.labels == c]
        if len(members) == 0:
            warnings.warn(f"cluster {c} is empty; skipped")
            continue
        center = members.mean(axis=0)
        dist = np.linalg.norm(members - center, axis=1).mean()
        total += len(members) * dist
        weight += len(members)
    return total / weight


def pca_project(points: np.ndarray) -> np.ndarray:
    """Center and project onto the top-2 principal axes.

    Each axis is oriented so its first nonzero loading is positive; inputs with
    fewer than 2 columns get a zero second coordinate.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("points must be 2-d")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 points")
    x = x - x.mean(axis=0)
    if x.shape[1] < 2:
        return np.concatenate([x, np.zeros((x.shape[0], 2 - x.shape[1]))], axis=1)
    cov = x.T @ x / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    w = eigvecs[:, order]
    for k in range(2):
        nz = np.flatnonzero(np.abs(w[:, k]) > 1e-12)
        if len(nz) and w[nz[0], k] < 0:
            w[:, k] = -w[:, k]
    return x @ w


def _quantile_labels(values: np.ndarray, n_classes: int) -> np.ndarray:
    n = len(values)
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    if n < n_classes:
        raise ValueError("fewer items than classes")
    order = np.argsort(values, kind="stable")
    labels = np.empty(n, dtype=np.int64)
    start = 0
    for b in range(n_classes):
        size = n // n_classes + (1 if b < n % n_classes else 0)
        labels[order[start:start + size]] = b
        start += size
    return labels


def dispersion_classes(dataset: TrajectoryDataset, n_classes: int = 5) -> np.ndarray:
    """Quantile-bin labels of final-step agent dispersion, 0 = least dispersed."""
    meta = dataset.meta
    if meta.state_dim != 2 * meta.n_agents:
        raise ValueError("dispersion labels need 2-d position states per agent")
    values = np.array([
        agent_dispersion(traj.states[-1].reshape(meta.n_agents, 2))
        for traj in dataset
    ])
    return _quantile_labels(values, n_classes)


def return_classes(dataset: TrajectoryDataset, n_classes: int = 5) -> np.ndarray:
    """Quantile-bin labels of total team return, 0 = lowest."""
    if not dataset.meta.has_rewards:
        raise ValueError("dataset has no rewards")
    values = np.array([trajectory_return(traj)[1] for traj in dataset])
    return _quantile_labels(values, n_classes)


def track_run(embeddings: np.ndarray,
              assignment: ClusterAssignment) -> tuple[np.ndarray, list[int]]:
    """Nearest-centroid labels for one run's trajectories in train_step order,
    plus the indices where the label changes."""
    points = np.asarray(embeddings, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("embeddings must be a nonempty 2-d array")
    d2 = ((points[:, None, :] - assignment.centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    changepoints = [t for t in range(1, len(labels)) if labels[t] != labels[t - 1]]
    return labels, changepoints
