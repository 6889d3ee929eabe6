"""Concept discovery over joint embeddings: K-means concepts, thresholded
scores, a small classification head, completeness, and ConceptSHAP."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .evalmetrics import kmeans
from .hvae import init_model_parameters_
from .training import TrainConfig, fit

__all__ = [
    "ConceptHead",
    "ConceptSet",
    "HeadConfig",
    "completeness",
    "concept_report",
    "concept_scores",
    "concept_score_matrix",
    "concept_shap",
    "fit_concept_head",
    "generate_concepts",
    "top_concept_trajectories",
]


@dataclass
class ConceptSet:
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be 2-d (concepts x dim)")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("every concept must be unit-norm")
        for j in range(len(self.vectors)):
            for k in range(j + 1, len(self.vectors)):
                if np.array_equal(self.vectors[j], self.vectors[k]):
                    raise ValueError("concepts must be pairwise distinct")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return x / safe


def generate_concepts(z_omega: np.ndarray, m: int, seed: int = 0) -> ConceptSet:
    """K-means centroids of the unit-normalized embeddings, re-normalized.

    Centroids that coincide after normalization are collapsed with a warning,
    so the result can hold fewer than m concepts.
    """
    z = np.asarray(z_omega, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("z_omega must be 2-d")
    if z.shape[0] < m:
        raise ValueError("fewer embeddings than concepts")
    assignment = kmeans(_unit_rows(z), m, seed=seed)
    vectors = _unit_rows(assignment.centroids)
    kept: list[np.ndarray] = []
    for row in vectors:
        if any(np.allclose(row, prev, atol=1e-12) for prev in kept):
            continue
        kept.append(row)
    if len(kept) < len(vectors):
        warnings.warn(f"collapsed {len(vectors) - len(kept)} duplicate concepts")
    return ConceptSet(vectors=np.asarray(kept))


def _thresholded_products(z: np.ndarray, concepts: ConceptSet,
                          kappa: float) -> np.ndarray:
    zu = _unit_rows(np.atleast_2d(z))
    nu = zu @ concepts.vectors.T
    nu[nu < kappa] = 0.0
    return nu


def concept_scores(z: np.ndarray, concepts: ConceptSet, kappa: float) -> np.ndarray:
    """Unit-normalized vector of thresholded inner products; zero if all
    products fall below kappa."""
    nu = _thresholded_products(z, concepts, kappa)[0]
    norm = np.linalg.norm(nu)
    return nu / norm if norm > 0.0 else nu


def concept_score_matrix(embeddings: np.ndarray, concepts: ConceptSet,
                         kappa: float, mask: np.ndarray | None = None) -> np.ndarray:
    """Rows of concept scores; mask (boolean per concept) zeroes entries before
    the renormalization."""
    nu = _thresholded_products(embeddings, concepts, kappa)
    if mask is not None:
        nu = nu * np.asarray(mask, dtype=np.float64)[None, :]
    norms = np.linalg.norm(nu, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return nu / safe


@dataclass(frozen=True)
class HeadConfig:
    steps: int = 10_000
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    n_classes: int = 5
    hidden: int = 8
    kappa: float = 0.0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.n_classes < 1 or self.hidden < 1 or self.batch_size < 1:
            raise ValueError("n_classes, hidden, and batch_size must be positive")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")


class ConceptHead(nn.Module):
    """Two hidden layers of 8 units mapping concept scores to class logits."""

    def __init__(self, n_concepts: int, config: HeadConfig = HeadConfig(),
                 init_seed: int | None = None):
        super().__init__()
        if n_concepts < 1:
            raise ValueError("need at least one concept")
        h = config.hidden
        self.net = nn.Sequential(
            nn.Linear(n_concepts, h, dtype=torch.float64), nn.ReLU(),
            nn.Linear(h, h, dtype=torch.float64), nn.ReLU(),
            nn.Linear(h, config.n_classes, dtype=torch.float64),
        )
        self.n_concepts = n_concepts
        self.kappa = config.kappa
        seed = config.seed if init_seed is None else init_seed
        init_model_parameters_(self, seed)

    def forward(self, scores: torch.Tensor) -> torch.Tensor:
        return self.net(scores)

    def predict(self, scores: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(np.atleast_2d(scores), dtype=torch.float64)
        with torch.no_grad():
            return self.net(x).argmax(dim=1).numpy()


@dataclass
class _ScoreData:
    inputs: torch.Tensor
    labels: torch.Tensor

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def index(self, idx: torch.Tensor) -> "_ScoreData":
        return _ScoreData(self.inputs[idx], self.labels[idx])


def _head_loss(model: ConceptHead, batch: _ScoreData, beta: float, rng):
    # beta and rng are unused: plain cross-entropy on a deterministic head
    ce = F.cross_entropy(model.net(batch.inputs), batch.labels)
    return ce, {"ce": ce}


def fit_concept_head(scores: np.ndarray, labels: np.ndarray,
                     config: HeadConfig = HeadConfig()) -> ConceptHead:
    """Cross-entropy training of the prediction head; deterministic per seed."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError("scores and labels must align")
    present = set(np.unique(labels))
    missing = [k for k in range(config.n_classes) if k not in present]
    if missing:
        raise ValueError(f"classes missing from train split: {missing}")
    head = ConceptHead(scores.shape[1], config)
    data = _ScoreData(torch.as_tensor(scores), torch.as_tensor(labels))
    tc = TrainConfig(steps=config.steps, batch_size=config.batch_size,
                     learning_rate=config.learning_rate, seed=config.seed,
                     log_every=max(1, config.steps))
    head, _, _ = fit(head, data, tc, _head_loss, ("ce",))
    return head


def _subset_mask(n_concepts: int, subset) -> np.ndarray:
    mask = np.zeros(n_concepts, dtype=bool)
    for j in subset:
        if not 0 <= j < n_concepts:
            raise ValueError(f"concept index {j} out of range")
        mask[j] = True
    return mask


def completeness(head: ConceptHead, concepts: ConceptSet, embeddings: np.ndarray,
                 labels: np.ndarray, subset=None, class_id: int | None = None) -> float:
    """Accuracy of the head when only the given concept subset is visible.

    subset=None means all concepts. With class_id set, accuracy is restricted
    to points of that class; an empty class yields nan.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if subset is None:
        mask = None
    else:
        mask = _subset_mask(len(concepts), subset)
    scores = concept_score_matrix(embeddings, concepts, head.kappa, mask=mask)
    pred = head.predict(scores)
    keep = np.ones(len(labels), dtype=bool) if class_id is None else labels == class_id
    if not keep.any():
        return float("nan")
    return float((pred[keep] == labels[keep]).mean())


def _shap_weights(m: int) -> list[float]:
    return [math.factorial(m - s - 1) * math.factorial(s) / math.factorial(m)
            for s in range(m)]


def concept_shap(head: ConceptHead, concepts: ConceptSet, embeddings: np.ndarray,
                 labels: np.ndarray, class_id: int, method: str = "exact",
                 n_perms: int = 2000, seed: int = 0) -> np.ndarray:
    """Per-concept Shapley attribution of the class-conditioned completeness.

    exact enumerates all subsets (m <= 16); sampled averages marginal gains
    over random permutations, caching subset evaluations.
    """
    m = len(concepts)
    labels = np.asarray(labels, dtype=np.int64)
    if not (labels == class_id).any():
        raise ValueError(f"class {class_id} absent from the evaluation set")

    cache: dict[int, float] = {}

    def eta(bits: int) -> float:
        if bits not in cache:
            subset = [j for j in range(m) if bits >> j & 1]
            cache[bits] = completeness(head, concepts, embeddings, labels,
                                       subset=subset, class_id=class_id)
        return cache[bits]

    values = np.zeros(m)
    if method == "exact":
        if m > 16:
            raise ValueError("exact enumeration limited to 16 concepts")
        w = _shap_weights(m)
        for bits in range(1 << m):
            size = bin(bits).count("1")
            for j in range(m):
                if bits >> j & 1:
                    continue
                values[j] += w[size] * (eta(bits | 1 << j) - eta(bits))
        return values
    if method == "sampled":
        if n_perms < 1:
            raise ValueError("n_perms must be >= 1")
        rng = np.random.default_rng(seed)
        for _ in range(n_perms):
            order = rng.permutation(m)
            bits = 0
            for j in order:
                gained = eta(bits | 1 << j) - eta(bits)
                values[j] += gained
                bits |= 1 << j
        return values / n_perms
    raise ValueError(f"unknown method {method!r}")


def top_concept_trajectories(concepts: ConceptSet, embeddings: np.ndarray,
                             concept_index: int, n: int = 20) -> list[int]:
    """Ids of the n embeddings most cosine-similar to one concept; ties go to
    the lower trajectory index."""
    z = _unit_rows(embeddings)
    if not 0 <= concept_index < len(concepts):
        raise ValueError("concept index out of range")
    if n > z.shape[0]:
        raise ValueError("n exceeds the number of embeddings")
    cos = z @ concepts.vectors[concept_index]
    order = np.argsort(-cos, kind="stable")
    return [int(i) for i in order[:n]]


def concept_report(head: ConceptHead, concepts: ConceptSet, embeddings: np.ndarray,
                   labels: np.ndarray, target_values: np.ndarray,
                   method: str = "exact", n_perms: int = 2000, seed: int = 0,
                   top_n: int = 20) -> dict:
    """Per-class attribution summary: lambda vector, top concept, its nearest
    trajectories, and the mean/std of the target statistic over them."""
    labels = np.asarray(labels, dtype=np.int64)
    target_values = np.asarray(target_values, dtype=np.float64)
    top_n = min(top_n, len(target_values))
    report: dict = {
        "n_concepts": len(concepts),
        "kappa": head.kappa,
        "overall_accuracy": completeness(head, concepts, embeddings, labels),
        "classes": {},
    }
    for k in sorted(set(int(v) for v in labels)):
        lam = concept_shap(head, concepts, embeddings, labels, k, method=method,
                           n_perms=n_perms, seed=seed)
        top = int(np.argmax(lam))
        ids = top_concept_trajectories(concepts, embeddings, top, n=top_n)
        chosen = target_values[ids]
        report["classes"][str(k)] = {
            "lambda": [float(v) for v in lam],
            "top_concept": top,
            "top_trajectories": ids,
            "target_mean": float(chosen.mean()),
            "target_std": float(chosen.std()),
            "class_accuracy": completeness(head, concepts, embeddings, labels,
                                           class_id=k),
        }
    return report
