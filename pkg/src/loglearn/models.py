"""Encoders and heads built from autodiff primitives."""

from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .data import IntervalSample
from .params import ParameterSet, freeze_layers, load_checkpoint, save_checkpoint

HEADS = ("decoder", "vae", "discriminator", "ar_predictor", "classifier", "similarity")
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass
class ModelSpec:
    encoder_kind: str = "recurrent"
    embedding_dim: int = 16
    hidden_size: int = 32
    interval_length: int = 100
    n_channels: int = 4
    conv_channels: int = 16
    kernel_size: int = 5
    decoder_hidden: int = 64
    discriminator_hidden: int = 16
    heads: tuple = ()
    ar_horizon: int = 3
    n_classes: int = 2

    def __post_init__(self):
        self.heads = tuple(self.heads)
        self.validate()

    def validate(self) -> None:
        if self.encoder_kind not in ("recurrent", "conv1d"):
            raise ValueError(f"unknown encoder_kind {self.encoder_kind!r}")
        for name in ("embedding_dim", "hidden_size", "interval_length", "n_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        unknown = set(self.heads) - set(HEADS)
        if unknown:
            raise ValueError(f"unknown heads {sorted(unknown)}")
        if "vae" in self.heads and "decoder" not in self.heads:
            raise ValueError("the vae head requires the decoder head")
        if "ar_predictor" in self.heads and self.ar_horizon < 1:
            raise ValueError("ar_horizon must be >= 1")
        if "classifier" in self.heads and self.n_classes < 2:
            raise ValueError("classifier needs n_classes >= 2")

    def has(self, head: str) -> bool:
        return head in self.heads

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "heads":
                value = ",".join(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ValueError(f"unknown ModelSpec key {key!r}")
            if key == "heads":
                kwargs[key] = tuple(h for h in value.split(",") if h)
            elif key == "encoder_kind":
                kwargs[key] = value
            else:
                kwargs[key] = int(ast.literal_eval(value))
        return cls(**kwargs)

    def compatible(self, other: "ModelSpec") -> bool:
        keys = ("encoder_kind", "embedding_dim", "hidden_size", "interval_length", "n_channels",
                "conv_channels", "kernel_size")
        return all(getattr(self, k) == getattr(other, k) for k in keys)


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class EncoderOutput:
    hidden: Tensor
    z: Tensor
    feature_maps: dict = field(default_factory=dict)


class Model:
    """Parameters plus the forward maps of an encoder and its heads.

    Graph-level methods (suffix ``_graph``) take and return ``Tensor`` and are
    used for training; the plain methods take numpy arrays or
    ``IntervalSample`` objects and return numpy arrays.
    """

    def __init__(self, spec: ModelSpec, seed=0, params: ParameterSet | None = None):
        self.spec = spec
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params

    # -- parameters ----------------------------------------------------------------

    def _init_params(self, rng) -> ParameterSet:
        s = self.spec
        p = ParameterSet()
        c, h, d = s.n_channels, s.hidden_size, s.embedding_dim
        if s.encoder_kind == "recurrent":
            p.add("enc_lstm.w_x", _glorot(rng, c, 4 * h, (c, 4 * h)))
            p.add("enc_lstm.w_h", _glorot(rng, h, 4 * h, (h, 4 * h)))
            b = np.zeros(4 * h)
            b[h : 2 * h] = 1.0  # forget gate bias
            p.add("enc_lstm.b", b)
            feat = h
        else:
            k, ch = s.kernel_size, s.conv_channels
            cin = c
            for i in (1, 2, 3):
                p.add(f"enc_conv{i}.w", _glorot(rng, k * cin, k * ch, (k, cin, ch)))
                p.add(f"enc_conv{i}.b", np.zeros(ch))
                cin = ch
            feat = ch
        p.add("enc_out.w", _glorot(rng, feat, d, (feat, d)))
        p.add("enc_out.b", np.zeros(d))
        if s.has("vae"):
            p.add("vae_logvar.w", _glorot(rng, feat, d, (feat, d)) * 0.1)
            p.add("vae_logvar.b", np.zeros(d))
        if s.has("decoder"):
            hd, out = s.decoder_hidden, s.interval_length * c
            p.add("dec_hidden.w", _glorot(rng, d, hd, (d, hd)))
            p.add("dec_hidden.b", np.zeros(hd))
            p.add("dec_out.w", _glorot(rng, hd, out, (hd, out)))
            p.add("dec_out.b", np.zeros(out))
        if s.has("discriminator"):
            hd = s.discriminator_hidden
            p.add("disc_hidden.w", _glorot(rng, d, hd, (d, hd)))
            p.add("disc_hidden.b", np.zeros(hd))
            p.add("disc_out.w", _glorot(rng, hd, 1, (hd, 1)))
            p.add("disc_out.b", np.zeros(1))
        if s.has("ar_predictor"):
            out = s.ar_horizon * c
            p.add("ar_out.w", _glorot(rng, d, out, (d, out)))
            p.add("ar_out.b", np.zeros(out))
        if s.has("classifier"):
            p.add("clf_out.w", _glorot(rng, d, s.n_classes, (d, s.n_classes)))
            p.add("clf_out.b", np.zeros(s.n_classes))
        if s.has("similarity"):
            p.add("sim_out.w", _glorot(rng, d, 1, (d, 1)))
            p.add("sim_out.b", np.zeros(1))
        return p

    @property
    def encoder_layers(self) -> list[str]:
        return [l for l in self.params.layers if l.startswith("enc_")]

    def copy(self) -> "Model":
        return Model(self.spec, params=self.params.copy())

    # -- encoder -------------------------------------------------------------------

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        if isinstance(x, IntervalSample):
            x = x.values
        elif isinstance(x, (list, tuple)) and x and isinstance(x[0], IntervalSample):
            x = np.stack([s.values for s in x])
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=float)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != self.spec.n_channels:
            raise ad.ShapeError(f"expected (batch, length, {self.spec.n_channels}) input, got {x.shape}")
        return x, single

    def encoder_graph(self, x) -> EncoderOutput:
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[1] != self.spec.interval_length or x.shape[2] != self.spec.n_channels:
            raise ad.ShapeError(
                f"expected (batch, {self.spec.interval_length}, {self.spec.n_channels}) input, got {x.shape}"
            )
        p = self.params
        fm = {}
        if self.spec.encoder_kind == "recurrent":
            hidden = self._lstm(x)
            fm["enc_lstm"] = hidden
        else:
            h = x
            for i in (1, 2, 3):
                h = ad.tanh(ad.conv1d(h, p[f"enc_conv{i}.w"], stride=2, padding=self.spec.kernel_size // 2)
                            + p[f"enc_conv{i}.b"])
                fm[f"enc_conv{i}"] = h
            hidden = h.mean(axis=1)
        z = ad.linear(hidden, p["enc_out.w"], p["enc_out.b"])
        fm["enc_out"] = z
        return EncoderOutput(hidden, z, fm)

    def _lstm(self, x: Tensor) -> Tensor:
        p = self.params
        b_sz, t_len, _ = x.shape
        h_sz = self.spec.hidden_size
        xw = ad.linear(x, p["enc_lstm.w_x"], p["enc_lstm.b"])
        h = Tensor(np.zeros((b_sz, h_sz)))
        c = Tensor(np.zeros((b_sz, h_sz)))
        w_h = p["enc_lstm.w_h"]
        for t in range(t_len):
            g = xw[:, t, :] + h @ w_h
            s = ad.sigmoid(g)
            i_g = s[:, :h_sz]
            f_g = s[:, h_sz : 2 * h_sz]
            o_g = s[:, 3 * h_sz :]
            cand = ad.tanh(g[:, 2 * h_sz : 3 * h_sz])
            c = f_g * c + i_g * cand
            h = o_g * ad.tanh(c)
        return h

    def logvar_graph(self, hidden: Tensor) -> Tensor:
        lv = ad.linear(hidden, self.params["vae_logvar.w"], self.params["vae_logvar.b"])
        return ad.clip(lv, LOGVAR_MIN, LOGVAR_MAX)

    def decode_graph(self, z: Tensor) -> Tensor:
        p = self.params
        h = ad.tanh(ad.linear(z, p["dec_hidden.w"], p["dec_hidden.b"]))
        out = ad.linear(h, p["dec_out.w"], p["dec_out.b"])
        return out.reshape((z.shape[0], self.spec.interval_length, self.spec.n_channels))

    def discriminate_graph(self, z) -> Tensor:
        p = self.params
        h = ad.tanh(ad.linear(as_tensor(z), p["disc_hidden.w"], p["disc_hidden.b"]))
        prob = ad.sigmoid(ad.linear(h, p["disc_out.w"], p["disc_out.b"]))
        return ad.clip(prob, 1e-7, 1.0 - 1e-7).reshape((-1,))

    def predict_graph(self, z: Tensor) -> Tensor:
        out = ad.linear(z, self.params["ar_out.w"], self.params["ar_out.b"])
        return out.reshape((z.shape[0], self.spec.ar_horizon, self.spec.n_channels))

    def classify_graph(self, z) -> Tensor:
        return ad.softmax(ad.linear(as_tensor(z), self.params["clf_out.w"], self.params["clf_out.b"]))

    def similarity_graph(self, z_a: Tensor, z_b: Tensor) -> Tensor:
        diff = ad.abs_(z_a - z_b)
        return ad.sigmoid(ad.linear(diff, self.params["sim_out.w"], self.params["sim_out.b"])).reshape((-1,))

    # -- numpy-level api -----------------------------------------------------------

    def encode(self, x, batch_size: int = 256) -> np.ndarray:
        """Deterministic embeddings; the VAE mean for variational models."""
        x, single = self._as_batch(x)
        chunks = [self.encoder_graph(x[i : i + batch_size]).z.data for i in range(0, len(x), batch_size)]
        z = np.concatenate(chunks) if chunks else np.zeros((0, self.spec.embedding_dim))
        return z[0] if single else z

    def feature_maps(self, x) -> dict[str, np.ndarray]:
        x, _ = self._as_batch(x)
        return {k: v.data for k, v in self.encoder_graph(x).feature_maps.items()}

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        out = self.decode_graph(Tensor(np.atleast_2d(z))).data
        return out[0] if single else out

    def vae_sample(self, x, seed):
        """Reparameterised draw ``z = mu + sigma * eps``; returns (z, mu, sigma)."""
        x, single = self._as_batch(x)
        enc = self.encoder_graph(x)
        mu = enc.z.data
        sigma = np.exp(0.5 * self.logvar_graph(enc.hidden).data)
        eps = np.random.default_rng(seed).standard_normal(mu.shape)
        z = mu + sigma * eps
        if single:
            return z[0], mu[0], sigma[0]
        return z, mu, sigma

    def discriminate(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        out = self.discriminate_graph(np.atleast_2d(z)).data
        return out[0] if z.ndim == 1 else out

    def predict_next(self, x, h: int | None = None) -> np.ndarray:
        if h is not None and h != self.spec.ar_horizon:
            raise ValueError(f"model predicts {self.spec.ar_horizon} steps, asked for {h}")
        x, single = self._as_batch(x)
        out = self.predict_graph(self.encoder_graph(x).z).data
        return out[0] if single else out

    def classify(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        out = self.classify_graph(np.atleast_2d(z)).data
        return out[0] if z.ndim == 1 else out

    def similarity(self, x_a, x_b) -> np.ndarray:
        za = Tensor(self.encode(self._as_batch(x_a)[0]))
        zb = Tensor(self.encode(self._as_batch(x_b)[0]))
        return self.similarity_graph(za, zb).data

    def freeze(self, policy="none") -> "Model":
        freeze_layers(self.params, policy)
        return self


def model_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    return path, path.with_suffix(".spec")


def save_model(model: Model, path) -> None:
    """Write the binary checkpoint and its ``.spec`` sidecar."""
    ckpt, side = model_paths(path)
    save_checkpoint(model.params, ckpt)
    side.write_text(model.spec.to_text())


def load_model(path) -> Model:
    ckpt, side = model_paths(path)
    spec = ModelSpec.from_text(side.read_text())
    model = Model(spec, seed=0)
    model.params.load_values(load_checkpoint(ckpt))
    return model
