"""Named trainable tensors, optimizers and the binary checkpoint format."""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from .autodiff import DTYPE, NumericalError, Tensor, gradients

CHECKPOINT_MAGIC = b"LLCK"
CHECKPOINT_VERSION = 1


class ParameterSet:
    """Ordered collection of leaf tensors grouped by layer.

    Names have the form ``"<layer>.<param>"``. Layers keep insertion order,
    which is the lower-to-upper order used by freezing policies.
    """

    def __init__(self):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        self._frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if "." not in name:
            raise ValueError(f"parameter name {name!r} must be '<layer>.<param>'")
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=DTYPE), requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    @property
    def layers(self) -> list[str]:
        seen: "OrderedDict[str, None]" = OrderedDict()
        for name in self._tensors:
            seen[layer_of(name)] = None
        return list(seen)

    def layer_params(self, layer: str) -> list[str]:
        return [n for n in self._tensors if layer_of(n) == layer]

    def trainable(self) -> list[str]:
        return [n for n in self._tensors if n not in self._frozen]

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def set_frozen(self, name: str, frozen: bool = True) -> None:
        if name not in self._tensors:
            raise KeyError(name)
        if frozen:
            self._frozen.add(name)
        else:
            self._frozen.discard(name)

    def values(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_values(self, values: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, t in self._tensors.items():
            if name not in values:
                if strict:
                    raise KeyError(f"missing parameter {name!r}")
                continue
            v = np.asarray(values[name], dtype=DTYPE)
            if v.shape != t.shape:
                raise ValueError(f"{name}: shape {v.shape} != {t.shape}")
            t.data = v.copy()

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for name, t in self._tensors.items():
            out.add(name, t.data.copy())
        out._frozen = set(self._frozen)
        return out

    def flat(self, names=None) -> np.ndarray:
        names = list(self._tensors) if names is None else names
        if not names:
            return np.zeros(0)
        return np.concatenate([self._tensors[n].data.ravel() for n in names])


def layer_of(name: str) -> str:
    return name.rsplit(".", 1)[0]


def freeze_layers(params: ParameterSet, policy: str | int | None = "none") -> ParameterSet:
    """Apply a freezing policy in place and return ``params``.

    ``policy`` is ``"none"``, an int ``k`` or the string ``"lower_k:<k>"``;
    the first ``k`` layer groups become frozen.
    """
    if policy is None or policy == "none":
        k = 0
    elif isinstance(policy, int):
        k = policy
    elif isinstance(policy, str) and policy.startswith("lower_k"):
        k = int(policy.split(":", 1)[1])
    else:
        raise ValueError(f"unknown freeze policy {policy!r}")
    layers = params.layers
    if not 0 <= k <= len(layers):
        raise ValueError(f"cannot freeze {k} of {len(layers)} layers")
    for i, layer in enumerate(layers):
        for name in params.layer_params(layer):
            params.set_frozen(name, i < k)
    return params


GradientMap = dict


def backward(root: Tensor, params: ParameterSet) -> GradientMap:
    """Gradients of a scalar root with respect to every trainable parameter."""
    names = params.trainable()
    grads = gradients(root, [params[n] for n in names])
    return dict(zip(names, grads))


def sgd_step(params: ParameterSet, grads: GradientMap, lr: float) -> ParameterSet:
    """In-place ``w <- w - lr * g`` over the gradient map's parameters."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    _check_grads(params, grads)
    for name, g in grads.items():
        if params.is_frozen(name):
            continue
        t = params[name]
        t.data = t.data - lr * g
    return params


def _check_grads(params: ParameterSet, grads: GradientMap) -> None:
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}; step refused")


class SGD:
    def __init__(self, params: ParameterSet, lr: float):
        self.params = params
        self.lr = lr

    def step(self, grads: GradientMap) -> None:
        sgd_step(self.params, grads, self.lr)


class Adam:
    """Adam with bias correction; frozen parameters are skipped."""

    def __init__(self, params: ParameterSet, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, grads: GradientMap) -> None:
        _check_grads(self.params, grads)
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name in sorted(grads):
            if self.params.is_frozen(name):
                continue
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            t = self.params[name]
            t.data = t.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params: ParameterSet, lr: float):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


# -- checkpoint io -------------------------------------------------------------


def write_checkpoint(values: dict[str, np.ndarray] | ParameterSet, fh: BinaryIO) -> None:
    """Binary layout: ``LLCK``, u32 version, u32 count, then per tensor
    u32 name length, UTF-8 name, u32 rank, u64 dims, little-endian f64 data."""
    if isinstance(values, ParameterSet):
        values = {n: t.data for n, t in values.items()}
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(values)))
    for name, arr in values.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(fh: BinaryIO) -> "OrderedDict[str, np.ndarray]":
    if fh.read(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", _read_exact(fh, 8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4))
        shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").astype(DTYPE)
        out[name] = data.reshape(shape)
    return out


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def save_checkpoint(params, path) -> None:
    buf = io.BytesIO()
    write_checkpoint(params, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return read_checkpoint(fh)
