"""Training objectives as differentiable scalars.

Every function returns a :class:`LossValue` whose ``total`` is a graph node
that can be passed to :func:`loglearn.params.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

PROB_EPS = 1e-7


@dataclass
class LossValue:
    """A scalar objective with its weighted named components.

    ``components`` maps a name to ``(weight, value)``; the total always equals
    the weighted sum of the component values.
    """

    total: Tensor
    components: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def scalar(self) -> float:
        return self.total.item()

    @classmethod
    def single(cls, name: str, total: Tensor) -> "LossValue":
        return cls(total, {name: (1.0, total.item())})

    def as_row(self) -> dict[str, float]:
        row = {"loss": self.scalar}
        for name, (w, v) in self.components.items():
            row[name] = v
            row[f"{name}_weight"] = w
        return row


def _reduce(per_item: Tensor, reduction: str) -> Tensor:
    if reduction == "sum":
        return per_item.sum()
    if reduction == "mean":
        return per_item.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def clamp_prob(p) -> Tensor:
    return ad.clip(as_tensor(p), PROB_EPS, 1.0 - PROB_EPS)


def ae_loss(x, x_hat, mask=None, reduction: str = "sum") -> LossValue:
    """Squared reconstruction error ``||x - x_hat||^2``.

    ``mask`` is boolean with ``True`` marking entries to exclude; it
    broadcasts against ``x`` (a per-time-step mask of shape ``(b, l, 1)``
    works). With ``reduction="mean"`` the sum is divided by the batch size
    ``x.shape[0]``.
    """
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ad.ShapeError(f"ae_loss: {x.shape} vs {x_hat.shape}")
    diff = x_hat - x
    if mask is not None:
        keep = 1.0 - np.broadcast_to(np.asarray(mask, dtype=float), x.shape)
        diff = diff * keep
    total = ad.square(diff).sum()
    if reduction == "mean":
        total = total / float(x.shape[0])
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return LossValue.single("reconstruction", total)


def vae_kl_loss(mu, sigma, reduction: str = "sum") -> LossValue:
    """``0.5 * sum(sigma^2 + mu^2 - log sigma^2 - 1)``."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("vae_kl_loss: sigma must be strictly positive")
    s2 = ad.square(sigma)
    total = 0.5 * (s2 + ad.square(mu) - ad.log(s2) - 1.0).sum()
    if reduction == "mean":
        total = total / float(mu.shape[0])
    return LossValue.single("kl", total)


def vae_kl_from_logvar(mu, logvar, reduction: str = "mean") -> LossValue:
    """KL term written in log-variance form, used during training."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    total = 0.5 * (ad.exp(logvar) + ad.square(mu) - logvar - 1.0).sum()
    if reduction == "mean":
        total = total / float(mu.shape[0])
    return LossValue.single("kl", total)


def aae_discriminator_loss(d_fake, d_real) -> LossValue:
    """``-(1/m) sum[log D(z') + log(1 - D(z))]`` with clamped probabilities."""
    d_fake, d_real = clamp_prob(d_fake), clamp_prob(d_real)
    m = float(d_real.data.size)
    total = -(ad.log(d_real).sum() + ad.log(1.0 - d_fake).sum()) / m
    return LossValue.single("discriminator", total)


def aae_generator_loss(d_fake) -> LossValue:
    """``-(1/m) sum log D(z)``."""
    d_fake = clamp_prob(d_fake)
    total = -ad.log(d_fake).sum() / float(d_fake.data.size)
    return LossValue.single("generator", total)


def ar_loss(predicted, actual) -> LossValue:
    """Mean squared error over the prediction horizon and channels."""
    predicted, actual = as_tensor(predicted), as_tensor(actual)
    if predicted.shape != actual.shape:
        raise ad.ShapeError(f"ar_loss: {predicted.shape} vs {actual.shape}")
    return LossValue.single("autoregressive", ad.square(predicted - actual).mean())


def _sq_dist(a: Tensor, b: Tensor) -> Tensor:
    return ad.square(a - b).sum(axis=-1)


def contrastive_pair_loss(z_i, z_j, same, margin: float = 1.0, reduction: str = "mean") -> LossValue:
    """Pull same-label pairs together, push others beyond squared distance ``margin``."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    z_i, z_j = as_tensor(z_i), as_tensor(z_j)
    same = np.asarray(same, dtype=float)
    d2 = _sq_dist(z_i, z_j)
    per = same * d2 + (1.0 - same) * ad.relu(margin - d2)
    return LossValue.single("contrastive", _reduce(per, reduction))


def triplet_loss(z_a, z_p, z_n, margin: float = 1.0, reduction: str = "mean") -> LossValue:
    """``max(0, ||a - p||^2 - ||a - n||^2 + margin)``."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    z_a, z_p, z_n = as_tensor(z_a), as_tensor(z_p), as_tensor(z_n)
    per = ad.relu(_sq_dist(z_a, z_p) - _sq_dist(z_a, z_n) + margin)
    return LossValue.single("triplet", _reduce(per, reduction))


def hardest_negatives(z_a: Tensor, z_n: Tensor, anchor_groups, negative_groups) -> np.ndarray:
    """For each anchor, index of the closest candidate negative from a different group.

    Groups are well ids. Falls back to the paired negative when no other
    candidate qualifies.
    """
    a = z_a.data
    n = z_n.data
    d2 = np.sum((a[:, None, :] - n[None, :, :]) ** 2, axis=-1)
    anchor_groups = np.asarray(anchor_groups)
    negative_groups = np.asarray(negative_groups)
    invalid = anchor_groups[:, None] == negative_groups[None, :]
    d2 = np.where(invalid, np.inf, d2)
    idx = np.argmin(d2, axis=1)
    fallback = ~np.isfinite(d2[np.arange(len(a)), idx])
    idx[fallback] = np.arange(len(a))[fallback]
    return idx


def binary_cross_entropy(p, target) -> LossValue:
    p = clamp_prob(p)
    y = np.asarray(target, dtype=float).reshape(p.shape)
    per = -(y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p))
    return LossValue.single("similarity", per.mean())


def classification_aux_loss(probs, true_label) -> LossValue:
    """Cross-entropy ``-log p[true]``, averaged over the batch for 2-D input."""
    probs = clamp_prob(probs)
    labels = np.atleast_1d(np.asarray(true_label, dtype=int))
    if probs.ndim == 1:
        picked = probs[int(labels[0])]
    else:
        picked = probs[np.arange(probs.shape[0]), labels]
    return LossValue.single("classification", (-ad.log(picked)).mean())


def combine(main: LossValue, auxiliaries: Iterable[tuple[float, LossValue]] = ()) -> LossValue:
    """Weighted sum of a main loss and weighted auxiliary losses.

    Component names are kept for reporting; auxiliary weights multiply into
    their components.
    """
    total = main.total
    components = dict(main.components)
    for weight, aux in auxiliaries:
        weight = float(weight)
        if weight == 0.0:
            for name, (w, v) in aux.components.items():
                components.setdefault(name, (0.0, v))
            continue
        total = total + weight * aux.total
        for name, (w, v) in aux.components.items():
            key = name
            while key in components:
                key = key + "_aux"
            components[key] = (weight * w, v)
    return LossValue(total, components)
