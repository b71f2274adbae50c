# Self-supervised pretraining on synthetic wells, then clustering the embeddings
# Two regimes of AR(1) logs stand in for two geological classes. An
# autoencoder never sees the regime labels; we check whether GMM clusters of
# its embeddings recover them on held-out wells.
import numpy as np

from loglearn.data import standardize, tile_intervals
from loglearn.eval import cluster_and_score
from loglearn.models import Model, ModelSpec
from loglearn.synthetic import make_formation
from loglearn.training import TrainConfig, fit, spec_for

# 1. Wells and a per-well split; validation reuses the training statistics
wells = make_formation(n_wells=20, length=300, seed=0)
train, stats = standardize(wells[:14])
val, _ = standardize(wells[14:], stats)

# 2. Held-out intervals and their expert labels
l = 50
tiles = tile_intervals(val, l, stride=25)
regime = {w.well_id: w.class_label for w in val}
truth = [regime[t.well_id] for t in tiles]
x_val = np.stack([t.values for t in tiles])
print(len(tiles), "validation intervals")

# 3. A small recurrent autoencoder
cfg = TrainConfig(method="ae", epochs=8, samples_per_epoch=256, batch_size=32)
model = Model(spec_for(cfg, ModelSpec(interval_length=l, hidden_size=12, embedding_dim=6)), seed=0)
print("before:", cluster_and_score(model.encode(x_val), truth, "gmm"))

# 4. Train and score again
history = fit(model, train, cfg, seed=0)
print("loss per epoch:", [round(h["loss"], 2) for h in history])
for algo in ("gmm", "kmeans", "agglomerative:ward"):
    print(algo, cluster_and_score(model.encode(x_val), truth, algo))
