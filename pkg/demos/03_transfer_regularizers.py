# Transfer to a shifted formation with L2-SP, Delta and BSS
# A source model is pretrained, then adapted to five wells of a formation whose
# logs are offset. The regularizers keep the target weights (L2-SP) or the
# target feature maps (Delta) close to the source.
import numpy as np

from loglearn.data import standardize, tile_intervals
from loglearn.eval import cluster_and_score
from loglearn.models import Model, ModelSpec
from loglearn.synthetic import make_formation
from loglearn.training import TrainConfig, fit, spec_for
from loglearn.transfer import SourceAnchor, TransferConfig, distance_to_anchor, transfer_fit

l = 50
spec = ModelSpec(interval_length=l, hidden_size=12, embedding_dim=6)

# 1. Source pretraining
source, _ = standardize(make_formation(16, 300, seed=0))
cfg = TrainConfig(method="ae", epochs=6, samples_per_epoch=256)
source_model = Model(spec_for(cfg, spec), seed=0)
fit(source_model, source, cfg, seed=0)
anchor = SourceAnchor.from_model(source_model)

# 2. Target formation: five training wells, ten for validation
target = make_formation(15, 300, seed=1, offset_shift=0.25, prefix="T")
t_train, stats = standardize(target[:5])
t_val, _ = standardize(target[5:], stats)
tiles = tile_intervals(t_val, l, stride=25)
regime = {w.well_id: w.class_label for w in t_val}
x_val, truth = np.stack([t.values for t in tiles]), [regime[t.well_id] for t in tiles]

# 3. One run per method; the same seed makes the runs comparable
train_cfg = TrainConfig(method="ae", epochs=4, samples_per_epoch=256)
for tcfg in (TransferConfig("scratch"), TransferConfig("fine_tune"), TransferConfig("l2sp", lam=10.0),
             TransferConfig("delta", lam=1.0), TransferConfig("delta_bss", lam=1.0, k=1, eta=0.01)):
    model, history = transfer_fit(t_train, anchor, tcfg, train_cfg, seed=0)
    ari = cluster_and_score(model.encode(x_val), truth, "gmm")["ari"]
    print(f"{tcfg.method:<10} ARI {ari:.3f}  |w - w0| {distance_to_anchor(model, anchor):.3f}")
