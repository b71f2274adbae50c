"""Self-supervised objectives and the shared training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import NumericalError, Tensor
from .data import (
    PairingRule,
    WellRecord,
    augment_batch,
    sample_pairs,
    sample_triplets,
    sample_windows,
)
from .models import Model, ModelSpec
from .params import backward, make_optimizer

logger = logging.getLogger(__name__)

METHODS = ("ae", "vae", "aae", "ar", "triplet", "siamese", "contrastive")
WINDOW_METHODS = ("ae", "vae", "aae", "ar")
PAIR_METHODS = ("siamese", "contrastive")


def default_lr(method: str) -> float:
    return 0.01 if method == "siamese" else 0.001


@dataclass
class TrainConfig:
    method: str = "vae"
    epochs: int = 35
    lr: float | None = None
    optimizer: str = "adam"
    batch_size: int = 32
    samples_per_epoch: int = 256
    pairing: PairingRule = field(default_factory=PairingRule)
    margin: float = 1.0
    kl_weight: float = 1.0
    adversarial_weight: float = 1.0
    auxiliaries: tuple = ()  # any of "classification", "autoregressive"
    aux_classification: float = 0.1
    aux_autoregressive: float = 0.1
    augment: tuple = ()
    noise_sigma: float = 0.05
    mask_p: float = 0.1
    hard_negatives: bool = True
    lr_milestones: tuple = ()
    lr_decay: float = 0.1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr is None:
            self.lr = default_lr(self.method)
        self.augment = tuple(self.augment)
        self.auxiliaries = tuple(self.auxiliaries)
        unknown = set(self.augment) - {"noise", "mask"}
        if unknown:
            raise ValueError(f"unknown augmentations {sorted(unknown)}")
        unknown = set(self.auxiliaries) - {"classification", "autoregressive"}
        if unknown:
            raise ValueError(f"unknown auxiliary losses {sorted(unknown)}")

    @property
    def uses_classification(self) -> bool:
        return "classification" in self.auxiliaries and self.aux_classification > 0

    @property
    def uses_autoregressive(self) -> bool:
        return "autoregressive" in self.auxiliaries and self.aux_autoregressive > 0 and self.method != "ar"

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.lr * self.lr_decay**drops


def required_heads(cfg: TrainConfig) -> tuple[str, ...]:
    heads = {
        "ae": ("decoder",),
        "vae": ("decoder", "vae"),
        "aae": ("decoder", "discriminator"),
        "ar": ("ar_predictor",),
        "triplet": (),
        "siamese": ("similarity",),
        "contrastive": (),
    }[cfg.method]
    extra = []
    if cfg.uses_classification:
        extra.append("classifier")
    if cfg.uses_autoregressive:
        extra.append("ar_predictor")
    return tuple(heads) + tuple(extra)


def spec_for(cfg: TrainConfig, base: ModelSpec | None = None, n_classes: int = 2) -> ModelSpec:
    base = base or ModelSpec()
    heads = tuple(dict.fromkeys(tuple(base.heads) + required_heads(cfg)))
    return replace(base, heads=heads, n_classes=max(base.n_classes, n_classes))


class TrainingAborted(RuntimeError):
    """Training hit a non-finite value; ``history`` holds the completed epochs."""

    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


Regularizer = Callable[[Model, Tensor, "ad.Tensor"], list]


@dataclass
class Batch:
    inputs: list[np.ndarray]  # one (b, l, c) array per branch
    future: list[np.ndarray | None]
    wells: list[np.ndarray]
    labels: np.ndarray | None = None


def _split(values: np.ndarray, length: int, horizon: int):
    fut = values[:, length : length + horizon] if horizon else None
    return values[:, :length], fut


def epoch_batches(wells: Sequence[WellRecord], cfg: TrainConfig, spec: ModelSpec, seed) -> list[Batch]:
    """Sample one epoch of training items and cut them into batches."""
    l = spec.interval_length
    need_future = cfg.method == "ar" or cfg.uses_autoregressive
    h = spec.ar_horizon if need_future else 0
    total = l + h
    n = cfg.samples_per_epoch
    batches: list[Batch] = []
    if cfg.method in WINDOW_METHODS:
        samples = sample_windows(wells, total, n, seed)
        groups = [[s] for s in samples]
    elif cfg.method == "triplet":
        trips = sample_triplets(wells, total, cfg.pairing, n, seed)
        groups = [[t.anchor, t.positive, t.negative] for t in trips]
    else:
        pairs = sample_pairs(wells, total, cfg.pairing, n, seed)
        groups = [[p.a, p.b] for p in pairs]
        labels_all = np.array([p.label for p in pairs], dtype=float)
    for start in range(0, len(groups), cfg.batch_size):
        chunk = groups[start : start + cfg.batch_size]
        inputs, future, wells_ = [], [], []
        for branch in range(len(chunk[0])):
            vals = np.stack([g[branch].values for g in chunk])
            x, fut = _split(vals, l, h)
            inputs.append(x)
            future.append(fut)
            wells_.append(np.array([g[branch].well_id for g in chunk]))
        labels = labels_all[start : start + cfg.batch_size] if cfg.method in PAIR_METHODS else None
        batches.append(Batch(inputs, future, wells_, labels))
    return batches


def batch_loss(model: Model, batch: Batch, cfg: TrainConfig, rng: np.random.Generator,
               class_of: dict | None = None, regularizer: Regularizer | None = None) -> L.LossValue:
    """Main objective plus configured auxiliary and regularization terms."""
    spec = model.spec
    noise = cfg.noise_sigma if "noise" in cfg.augment else 0.0
    mask_p = cfg.mask_p if "mask" in cfg.augment else 0.0
    encs = []
    masks = []
    for x in batch.inputs:
        xin, mask = augment_batch(x, rng, noise, mask_p)
        encs.append(model.encoder_graph(Tensor(xin)))
        masks.append(mask)
    enc = encs[0]
    x0 = batch.inputs[0]
    aux: list[tuple[float, L.LossValue]] = []

    if cfg.method in ("ae", "vae", "aae"):
        z = enc.z
        if cfg.method == "vae":
            logvar = model.logvar_graph(enc.hidden)
            eps = rng.standard_normal(z.shape)
            z = z + ad.exp(0.5 * logvar) * eps
            aux.append((cfg.kl_weight, L.vae_kl_from_logvar(enc.z, logvar)))
        recon = model.decode_graph(z)
        step_mask = None if masks[0] is None else masks[0][..., None]
        main = L.ae_loss(x0, recon, mask=step_mask, reduction="mean")
        if cfg.method == "aae":
            aux.append((cfg.adversarial_weight, L.aae_generator_loss(model.discriminate_graph(enc.z))))
    elif cfg.method == "ar":
        main = L.ar_loss(model.predict_graph(enc.z), batch.future[0])
    elif cfg.method == "triplet":
        za, zp, zn = (e.z for e in encs)
        if cfg.hard_negatives and za.shape[0] > 1:
            # batch-hardest: every negative of the batch is a candidate
            idx = L.hardest_negatives(za, zn, batch.wells[0], batch.wells[2])
            zn = zn[idx]
        main = L.triplet_loss(za, zp, zn, margin=cfg.margin)
    elif cfg.method == "siamese":
        prob = model.similarity_graph(encs[0].z, encs[1].z)
        main = L.binary_cross_entropy(prob, batch.labels)
    else:
        main = L.contrastive_pair_loss(encs[0].z, encs[1].z, batch.labels, margin=cfg.margin)

    if cfg.uses_classification:
        if class_of is None:
            raise ValueError("classification auxiliary loss needs a well -> class map")
        y = np.array([class_of[w] for w in batch.wells[0]])
        aux.append((cfg.aux_classification, L.classification_aux_loss(model.classify_graph(enc.z), y)))
    if cfg.uses_autoregressive:
        aux.append((cfg.aux_autoregressive, L.ar_loss(model.predict_graph(enc.z), batch.future[0])))
    if regularizer is not None:
        aux.extend(regularizer(model, Tensor(x0), enc))
    return L.combine(main, aux)


def _discriminator_step(model: Model, batch: Batch, opt, rng) -> float:
    z_fake = model.encoder_graph(Tensor(batch.inputs[0])).z.data
    z_real = rng.standard_normal(z_fake.shape)
    loss = L.aae_discriminator_loss(model.discriminate_graph(z_fake), model.discriminate_graph(z_real))
    grads = backward(loss.total, model.params)
    opt.step({k: v for k, v in grads.items() if k.startswith("disc_")})
    return loss.scalar


def fit(model: Model, wells: Sequence[WellRecord], cfg: TrainConfig, seed=0,
        class_of: dict | None = None, regularizer: Regularizer | None = None,
        on_epoch: Callable[[int, Model], dict | None] | None = None) -> list[dict]:
    """Train ``model`` in place; returns one row of mean loss components per epoch.

    ``on_epoch(epoch, model)`` runs after every epoch (and once before the
    first, with epoch 0); any dict it returns is merged into that row.
    """
    opt = make_optimizer(cfg.optimizer, model.params, cfg.lr)
    disc_opt = make_optimizer(cfg.optimizer, model.params, cfg.lr) if cfg.method == "aae" else None
    history: list[dict] = []
    if on_epoch is not None:
        extra = on_epoch(0, model) or {}
        history.append({"epoch": 0, **extra})
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cfg.lr_at(epoch - 1)
        if disc_opt is not None:
            disc_opt.lr = opt.lr
        ss = np.random.SeedSequence([_seed_int(seed), epoch])
        data_seed, aug_seed = ss.spawn(2)
        rng = np.random.default_rng(aug_seed)
        sums: dict[str, float] = {}
        count = 0
        try:
            for batch in epoch_batches(wells, cfg, model.spec, data_seed):
                if disc_opt is not None:
                    d = _discriminator_step(model, batch, disc_opt, rng)
                    sums["discriminator_step"] = sums.get("discriminator_step", 0.0) + d
                loss = batch_loss(model, batch, cfg, rng, class_of, regularizer)
                grads = backward(loss.total, model.params)
                if disc_opt is not None:
                    grads = {k: v for k, v in grads.items() if not k.startswith("disc_")}
                opt.step(grads)
                for k, v in loss.as_row().items():
                    sums[k] = sums.get(k, 0.0) + v
                count += 1
        except NumericalError as exc:
            raise TrainingAborted(f"epoch {epoch}: {exc}", history) from exc
        row = {"epoch": epoch, "lr": opt.lr, **{k: v / max(count, 1) for k, v in sums.items()}}
        if on_epoch is not None:
            row.update(on_epoch(epoch, model) or {})
        history.append(row)
        logger.debug("epoch %d %s", epoch, row)
    return history


def _seed_int(seed) -> int:
    if isinstance(seed, np.random.SeedSequence):
        return int(seed.generate_state(1)[0])
    return int(seed)
