"""Cluster the joint embeddings, project them, and watch one run drift.

Needs the checkpoint and embeddings written by 02_train_embed.py. The
tracking part replays one training run in trajectory order and reports the
points where its nearest behavior cluster changes.
"""

import argparse
import os
import sys

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from mohba.behaviorgen import CorpusConfig, generate_corpus, parse_run_id
from mohba.evalmetrics import kmeans, pca_project, track_run

parser = argparse.ArgumentParser()
parser.add_argument("--out", default="demo_out")
parser.add_argument("--k", type=int, default=3)
args = parser.parse_args()

z_path = os.path.join(args.out, "z_omega.npy")
if not os.path.exists(z_path):
    sys.exit("run 02_train_embed.py first")
z_omega = np.load(z_path)
corpus = generate_corpus(CorpusConfig(domain="hill", seed=0))

clusters = kmeans(z_omega, args.k, seed=0)
sizes = np.bincount(clusters.labels, minlength=args.k)
print(f"k={args.k} clusters of joint embeddings, sizes {sizes.tolist()}, "
      f"inertia {clusters.inertia:.3f}")

proj = pca_project(z_omega)
fig, ax = plt.subplots(figsize=(5, 4))
ax.scatter(proj[:, 0], proj[:, 1], c=clusters.labels, cmap="viridis", s=10)
ax.set_xlabel("pc1")
ax.set_ylabel("pc2")
fig.tight_layout()
png = os.path.join(args.out, "joint_clusters.png")
fig.savefig(png, dpi=120)
print(f"projection -> {png}")

# replay run 0 in training order
run0 = [k for k, t in enumerate(corpus) if parse_run_id(t.run_id)[0] == 0]
run0.sort(key=lambda k: corpus.trajectories[k].train_step)
labels, changepoints = track_run(z_omega[run0], clusters)
print(f"run 0 cluster sequence: {labels.tolist()}")
if changepoints:
    print(f"behavior changepoints at trajectory indices {changepoints}")
else:
    print("no changepoints: the run stayed in one behavior cluster")
