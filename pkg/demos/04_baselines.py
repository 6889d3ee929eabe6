"""Compare the hierarchical model against the two reference baselines.

All three get the same data, optimizer settings, and step budget. The LSTM
predicts the next joint action from history; the flat VAE keeps the mixture
latent but drops the per-agent level. Reported numbers: action prediction
loss (lower is better) and the within-cluster spread of raw trajectories
when each method's embeddings are cut into 16 clusters (lower means the
embedding space groups genuinely similar trajectories).
"""

import torch

from mohba.baselines import (FlatVaeConfig, LstmConfig, flat_vae_embed,
                             flat_vae_train, lstm_embed, lstm_train)
from mohba.behaviorgen import CorpusConfig, generate_corpus
from mohba.evalmetrics import apl, embed_dataset, ictd, kmeans
from mohba.hvae import MohbaModel, ModelConfig
from mohba.training import TrainConfig, train

STEPS = 2000
K = 16

corpus = generate_corpus(CorpusConfig(domain="hill", seed=0))
budget = TrainConfig(steps=STEPS, batch_size=32, learning_rate=1e-3,
                     anneal_period=1000, log_every=1000, seed=0)
print(f"{len(corpus)} trajectories, {STEPS} steps per method")

model = MohbaModel(ModelConfig.from_meta(corpus.meta, d_omega=4, d_alpha=2,
                                         gmm_components=8, rnn_hidden=32,
                                         mlp_hidden=32, policy_hidden=32,
                                         dtype="float32"), init_seed=0)
model, _ = train(model, corpus, budget)
z_mohba = embed_dataset(model, corpus).z_omega

lstm, _ = lstm_train(corpus, budget,
                     LstmConfig.from_meta(corpus.meta, rnn_hidden=32,
                                          head_hidden=32, dtype="float32"))
z_lstm = torch.stack([lstm_embed(lstm, t) for t in corpus]).numpy()

flat, _ = flat_vae_train(corpus, budget,
                         FlatVaeConfig.from_meta(corpus.meta, d_omega=4,
                                                 gmm_components=8,
                                                 rnn_hidden=32, mlp_hidden=32,
                                                 policy_hidden=32,
                                                 dtype="float32"))
z_flat = torch.stack([flat_vae_embed(flat, t) for t in corpus]).numpy()

rows = [
    ("hierarchical", apl("mohba", model, corpus), z_mohba),
    ("lstm", apl("lstm", lstm, corpus), z_lstm),
    ("flat vae", apl("flat_vae", flat, corpus), z_flat),
]
print(f"{'method':<14} {'APL':>8} {'ICTD@16':>9}")
for name, score, z in rows:
    spread = ictd(z, corpus, kmeans(z, K, seed=0))
    print(f"{name:<14} {score:8.3f} {spread:9.3f}")
