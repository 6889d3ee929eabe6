"""Distill the joint embedding space into concepts and attribute classes.

Concepts are unit directions found by clustering the normalized joint
embeddings. A small head predicts a behavior statistic (how spread out the
team ends up) from each trajectory's concept scores; Shapley values over
concept subsets then say which concepts carry each class.

Needs the artifacts from 02_train_embed.py.
"""

import argparse
import os
import sys

import numpy as np

from mohba.behaviorgen import CorpusConfig, generate_corpus
from mohba.concepts import (HeadConfig, completeness, concept_report,
                            concept_score_matrix, fit_concept_head,
                            generate_concepts)
from mohba.envs import agent_dispersion
from mohba.evalmetrics import dispersion_classes
from mohba.trajdata import split_indices

parser = argparse.ArgumentParser()
parser.add_argument("--out", default="demo_out")
parser.add_argument("--m", type=int, default=8, help="number of concepts")
parser.add_argument("--head-steps", type=int, default=4000)
args = parser.parse_args()

z_path = os.path.join(args.out, "z_omega.npy")
if not os.path.exists(z_path):
    sys.exit("run 02_train_embed.py first")
z_omega = np.load(z_path)
corpus = generate_corpus(CorpusConfig(domain="hill", seed=0))

classes = dispersion_classes(corpus)
train_idx, val_idx = split_indices(len(corpus), 0.2, 0)
concepts = generate_concepts(z_omega[train_idx], m=args.m, seed=0)
print(f"{len(concepts)} concepts from {len(train_idx)} training trajectories")

head_config = HeadConfig(steps=args.head_steps, batch_size=64,
                         learning_rate=1e-3, seed=0, n_classes=5, kappa=0.0)
scores = concept_score_matrix(z_omega[train_idx], concepts, head_config.kappa)
head = fit_concept_head(scores, classes[train_idx], head_config)
accuracy = completeness(head, concepts, z_omega[val_idx], classes[val_idx])
print(f"5-class dispersion accuracy on {len(val_idx)} held-out "
      f"trajectories: {accuracy:.3f} (chance 0.2)")

spread = np.array([agent_dispersion(t.states[-1].reshape(-1, 2))
                   for t in corpus])
report = concept_report(head, concepts, z_omega[val_idx], classes[val_idx],
                        spread[val_idx], method="exact", top_n=10)
for k, entry in sorted(report["classes"].items()):
    lam = np.array(entry["lambda"])
    print(f"class {k}: top concept {entry['top_concept']} "
          f"(lambda {lam.max():+.3f}), its trajectories spread "
          f"{entry['target_mean']:.2f} +- {entry['target_std']:.2f}")
