"""Fine-tuning from a source model with L2-SP, Delta and BSS regularizers."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .data import WellRecord
from .losses import LossValue
from .models import Model, ModelSpec, load_model
from .params import ParameterSet, freeze_layers
from .training import TrainConfig, fit, spec_for

logger = logging.getLogger(__name__)

TRANSFER_METHODS = ("scratch", "fine_tune", "l2sp", "delta", "delta_bss")


@dataclass(frozen=True)
class SourceAnchor:
    """Read-only snapshot of source parameters ``w0`` and their spec."""

    spec: ModelSpec
    w0: Mapping[str, np.ndarray]

    @classmethod
    def from_model(cls, model: Model) -> "SourceAnchor":
        values = model.params.values()
        for v in values.values():
            v.setflags(write=False)
        return cls(model.spec, values)

    @classmethod
    def from_checkpoint(cls, path) -> "SourceAnchor":
        return cls.from_model(load_model(path))

    def model(self) -> Model:
        m = Model(self.spec, seed=0)
        m.params.load_values(dict(self.w0))
        return m


@dataclass
class TransferConfig:
    method: str = "fine_tune"
    lam: float = 1.0
    alpha: float = 1.0
    delta_layers: tuple = ()
    eta: float = 0.001
    k: int = 1
    freeze: str = "none"

    def __post_init__(self):
        if self.method not in TRANSFER_METHODS:
            raise ValueError(f"unknown transfer method {self.method!r}")
        if self.lam < 0 or self.alpha < 0 or self.eta < 0:
            raise ValueError("lam, alpha and eta must be non-negative")
        if self.method == "delta_bss" and self.k < 1:
            raise ValueError("BSS needs k >= 1")
        self.delta_layers = tuple(self.delta_layers)


TRANSFER_EPOCHS = 15


def transfer_train_config(method: str, **overrides) -> TrainConfig:
    """Training settings for the target phase: 15 epochs, method default lr."""
    overrides.setdefault("epochs", TRANSFER_EPOCHS)
    return TrainConfig(method=method, **overrides)


# -- penalties -------------------------------------------------------------------


def _tensor_of(w, name):
    if isinstance(w, ParameterSet):
        return w[name]
    return as_tensor(w[name])


def l2sp_penalty(w, w0, alpha: float = 1.0, names: Sequence[str] | None = None) -> LossValue:
    """``alpha * ||w - w0||^2`` summed over ``names`` (default: trainable tensors).

    ``w`` and ``w0`` may be ParameterSets, name->array mappings or plain arrays.
    """
    if not isinstance(w, (ParameterSet, Mapping)):
        diff = as_tensor(w) - as_tensor(np.asarray(w0.data if isinstance(w0, Tensor) else w0, dtype=float))
        return LossValue.single("l2sp", alpha * ad.square(diff).sum())
    if names is None:
        names = w.trainable() if isinstance(w, ParameterSet) else list(w)
    w0_vals = w0.values() if isinstance(w0, ParameterSet) else w0
    total = Tensor(0.0)
    for name in names:
        if name not in w0_vals:
            continue
        ref = w0_vals[name]
        ref = ref.data if isinstance(ref, Tensor) else np.asarray(ref, dtype=float)
        total = total + ad.square(_tensor_of(w, name) - ref).sum()
    return LossValue.single("l2sp", alpha * total)


def source_feature_maps(anchor: SourceAnchor | Model, x: np.ndarray, layers: Sequence[str]) -> dict[str, np.ndarray]:
    """Source maps under ``w0``, evaluated as constants (no gradient)."""
    source = anchor if isinstance(anchor, Model) else anchor.model()
    fm = source.feature_maps(x)
    missing = [l for l in layers if l not in fm]
    if missing:
        raise KeyError(f"source model has no feature map(s) {missing}")
    return {l: fm[l] for l in layers}


def delta_penalty(model_target: Model, anchor: SourceAnchor | Model, x, layers: Sequence[str],
                  target_maps: dict[str, Tensor] | None = None) -> LossValue:
    """``sum_j ||FM_j(target, w, x) - FM_j(source, w0, x)||^2`` averaged over the batch."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=float)
    layers = tuple(layers)
    if not layers:
        return LossValue.single("delta", Tensor(0.0))
    if target_maps is None:
        target_maps = model_target.encoder_graph(Tensor(x)).feature_maps
    missing = [l for l in layers if l not in target_maps]
    if missing:
        raise KeyError(f"target model has no feature map(s) {missing}")
    src = source_feature_maps(anchor, x, layers)
    total = Tensor(0.0)
    for l in layers:
        total = total + ad.square(target_maps[l] - src[l]).sum()
    return LossValue.single("delta", total / float(x.shape[0]))


def bss_penalty(features, k: int = 1, eta: float = 0.001) -> LossValue:
    """``eta * sum of the k smallest squared singular values`` of a batch feature matrix."""
    f = as_tensor(features)
    if f.ndim != 2:
        raise ad.ShapeError("bss_penalty expects a (batch, dim) matrix")
    if k > min(f.shape):
        raise ValueError(f"k={k} exceeds min(b, d)={min(f.shape)}")
    return LossValue.single("bss", eta * ad.smallest_singular_sq(f, k))


# -- driver ----------------------------------------------------------------------


def init_target(anchor: SourceAnchor, tcfg: TransferConfig, train_cfg: TrainConfig, seed=0,
                n_classes: int = 2) -> Model:
    """Target model: fresh for ``scratch``; otherwise initialised from ``w0``."""
    spec = spec_for(train_cfg, anchor.spec, n_classes)
    model = Model(spec, seed=seed)
    if tcfg.method != "scratch":
        if not spec.compatible(anchor.spec):
            raise ValueError("anchor spec is incompatible with the target model")
        shared = {n: v for n, v in anchor.w0.items() if n in model.params and model.params[n].shape == v.shape}
        model.params.load_values(shared, strict=False)
        freeze_layers(model.params, tcfg.freeze)
    return model


def make_regularizer(tcfg: TransferConfig, anchor: SourceAnchor, encoder_layers: Sequence[str]):
    if tcfg.method in ("scratch", "fine_tune"):
        return None
    source = anchor.model()
    layers = tcfg.delta_layers or tuple(encoder_layers)

    def regularizer(model: Model, x: Tensor, enc) -> list[tuple[float, LossValue]]:
        if tcfg.method == "l2sp":
            return [(tcfg.lam, l2sp_penalty(model.params, anchor.w0, tcfg.alpha))]
        terms = [(tcfg.lam, delta_penalty(model, source, x, layers, target_maps=enc.feature_maps))]
        if tcfg.method == "delta_bss":
            terms.append((1.0, bss_penalty(enc.z, tcfg.k, tcfg.eta)))
        return terms

    return regularizer


def transfer_fit(target_wells: Sequence[WellRecord], anchor: SourceAnchor, tcfg: TransferConfig,
                 train_cfg: TrainConfig, seed=0, class_of: dict | None = None, on_epoch=None):
    """Train a target model; returns ``(model, history)``.

    The objective is the self-supervised loss of ``train_cfg`` plus
    ``lam * Omega(w, w0, x)`` for the regularized methods.
    """
    if tcfg.method == "delta_bss" and tcfg.k > train_cfg.batch_size:
        raise ValueError(f"BSS k={tcfg.k} exceeds batch size {train_cfg.batch_size}")
    n_classes = max(class_of.values()) + 1 if class_of else 2
    model = init_target(anchor, tcfg, train_cfg, seed=seed, n_classes=n_classes)
    reg = make_regularizer(tcfg, anchor, model.encoder_layers)
    history = fit(model, target_wells, train_cfg, seed=seed, class_of=class_of, regularizer=reg,
                  on_epoch=on_epoch)
    return model, history


def distance_to_anchor(model: Model, anchor: SourceAnchor) -> float:
    """``||w - w0||`` over the parameters shared with the anchor."""
    total = 0.0
    for name, t in model.params.items():
        if name in anchor.w0 and anchor.w0[name].shape == t.shape:
            total += float(np.sum((t.data - anchor.w0[name]) ** 2))
    return float(np.sqrt(total))
