"""Visual encoder, phrase encoder and the shared semantic embedding.

Images are H x W x C arrays. Internally feature grids are kept as
(N, D, H', W') tensors so the conv primitive can consume them directly.

Forward functions take a *bound* parameter mapping (name -> Tensor) rather
than the model itself, so the same code runs on constants for inference and
on tape-watched leaves for training or gradient checks.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import tensorio
from .autodiff import ShapeError, Tensor

UNK = "<unk>"
PAD = 0  # padded positions are masked out, the index itself is never read


@dataclass
class ModelConfig:
    image_size: int = 80
    channels: int = 3
    conv_widths: tuple[int, ...] = (8, 16, 32)
    conv_strides: tuple[int, ...] = (2, 2, 1)
    kernel: int = 3
    embed_hidden: int = 32
    width: int = 32  # language code width == visual code width
    token_dim: int = 32
    embed_activation: str = "linear"  # or "tanh"
    dropout: float = 0.0
    norm_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.conv_widths = tuple(int(w) for w in self.conv_widths)
        self.conv_strides = tuple(int(s) for s in self.conv_strides)
        if len(self.conv_widths) != len(self.conv_strides):
            raise ValueError("conv_widths and conv_strides must have equal length")
        if self.embed_activation not in ("tanh", "linear"):
            raise ValueError(f"unknown embed_activation {self.embed_activation!r}")
        if self.image_size % self.delta:
            raise ValueError(f"image_size {self.image_size} not divisible by delta {self.delta}")

    @property
    def delta(self) -> int:
        return int(np.prod(self.conv_strides))

    @property
    def grid(self) -> int:
        return self.image_size // self.delta

    @property
    def feature_dim(self) -> int:
        return self.conv_widths[-1]

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name.replace('_', '-')} = {value}")
        lines.append(f"delta = {self.delta}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            key = key.replace("-", "_")
            if key not in known:
                continue
            kwargs[key] = _coerce(known[key], value)
        return cls(**kwargs)


def _coerce(f, value: str):
    default = f.default
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.split(","))
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


# ------------------------------------------------------------- parameters


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


LANGUAGE_PREFIX = "lang."


def init_params(cfg: ModelConfig, vocab_size: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    p: dict[str, np.ndarray] = {}
    c_in = cfg.channels
    for i, c_out in enumerate(cfg.conv_widths):
        fan = c_in * cfg.kernel * cfg.kernel
        p[f"conv{i}.w"] = _uniform(rng, (c_out, c_in, cfg.kernel, cfg.kernel), fan)
        p[f"conv{i}.b"] = _uniform(rng, (c_out,), fan)
        c_in = c_out
    d, hdim, e = cfg.feature_dim, cfg.embed_hidden, cfg.width
    p["embed.fc1.w"] = _uniform(rng, (d, hdim), d)
    p["embed.fc1.b"] = _uniform(rng, (hdim,), d)
    p["embed.fc2.w"] = _uniform(rng, (hdim, e), hdim)
    p["embed.fc2.b"] = _uniform(rng, (e,), hdim)
    p["embed.norm.gamma"] = np.ones(e)
    p["embed.norm.beta"] = np.zeros(e)
    p["lang.embedding"] = _uniform(rng, (vocab_size, cfg.token_dim), 1)
    x_dim = cfg.token_dim
    for layer in range(2):
        for gate in ("z", "r", "n"):
            p[f"lang.l{layer}.w{gate}"] = _uniform(rng, (x_dim, e), e)
            p[f"lang.l{layer}.u{gate}"] = _uniform(rng, (e, e), e)
            p[f"lang.l{layer}.b{gate}"] = _uniform(rng, (e,), e)
        x_dim = e
    return p


@dataclass
class GroundingModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    vocab: list[str]
    norm_mean: np.ndarray = None
    norm_var: np.ndarray = None
    _index: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not self.vocab or self.vocab[0] != UNK:
            raise ValueError(f"vocabulary must start with the reserved {UNK!r} token")
        if self.norm_mean is None:
            self.norm_mean = np.zeros(self.config.width)
        if self.norm_var is None:
            self.norm_var = np.ones(self.config.width)
        self._index = {tok: i for i, tok in enumerate(self.vocab)}

    @classmethod
    def create(cls, config: ModelConfig, tokens) -> "GroundingModel":
        vocab = [UNK] + sorted(set(tokens) - {UNK})
        return cls(config, init_params(config, len(vocab)), vocab)

    def token_ids(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t.lower(), 0) for t in tokens]

    def bind(self, tape: ad.Tape | None = None) -> dict[str, Tensor]:
        if tape is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: tape.watch(v) for k, v in self.params.items()}

    def inference_stats(self) -> "NormStats":
        inv = 1.0 / np.sqrt(self.norm_var + self.config.norm_eps)
        return NormStats(Tensor(self.norm_mean), Tensor(inv))

    def copy(self) -> "GroundingModel":
        return GroundingModel(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            list(self.vocab),
            self.norm_mean.copy(),
            self.norm_var.copy(),
        )

    # -------------------------------------------------------------- io

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        tensors = dict(self.params)
        tensors["embed.norm.mean"] = self.norm_mean
        tensors["embed.norm.var"] = self.norm_var
        tensorio.write_tensors(buf, tensors)
        tensorio.write_u32(buf, len(self.vocab))
        for tok in self.vocab:
            tensorio.write_str(buf, tok)
        tensorio.write_str(buf, self.config.to_text())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "GroundingModel":
        buf = io.BytesIO(raw)
        tensors = tensorio.read_tensors(buf)
        vocab = [tensorio.read_str(buf) for _ in range(tensorio.read_u32(buf))]
        config = ModelConfig.from_text(tensorio.read_str(buf))
        mean = tensors.pop("embed.norm.mean")
        var = tensors.pop("embed.norm.var")
        return cls(config, tensors, vocab, mean, var)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "GroundingModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# ---------------------------------------------------------------- forward


def encode_image(images, p: Mapping[str, Tensor], cfg: ModelConfig, rng=None) -> Tensor:
    """Conv stack over H x W x C images (or a batch N x H x W x C).

    Returns an (N, D, H', W') feature grid with H' = H / delta.
    """
    x = ad.as_tensor(images)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"encode_image: expected images of shape {expected}, got {x.shape}")
    h = x.transpose(0, 3, 1, 2)
    pad = cfg.kernel // 2
    for i, stride in enumerate(cfg.conv_strides):
        h = ad.conv2d(h, p[f"conv{i}.w"], stride=stride, pad=pad)
        h = ad.tanh(h + p[f"conv{i}.b"].reshape(1, -1, 1, 1))
    return h


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


def embed_rows(rows: Tensor, p: Mapping[str, Tensor], cfg: ModelConfig, rng=None) -> Tensor:
    """Two-layer perceptron applied to (M, D) feature rows; output before normalisation."""
    h = rows @ p["embed.fc1.w"] + p["embed.fc1.b"]
    if cfg.embed_activation == "tanh":
        h = ad.tanh(h)
    h = _dropout(h, cfg.dropout, rng)
    return h @ p["embed.fc2.w"] + p["embed.fc2.b"]


@dataclass
class NormStats:
    mean: Tensor
    inv_std: Tensor


def batch_stats(pre: Tensor, eps: float) -> NormStats:
    mean = pre.mean(axis=0)
    centered = pre - mean
    var = (centered * centered).mean(axis=0)
    return NormStats(mean, Tensor(1.0) / ad.sqrt(var + eps))


def normalize(pre: Tensor, stats: NormStats, p: Mapping[str, Tensor]) -> Tensor:
    return (pre - stats.mean) * stats.inv_std * p["embed.norm.gamma"] + p["embed.norm.beta"]


def pool_and_embed(features: Tensor, p, cfg: ModelConfig, stats: NormStats | None = None, rng=None):
    """Visual code: global average pool -> perceptron -> normalisation.

    With ``stats=None`` the batch statistics of this call are used and
    returned alongside the codes, so per-location embeddings can share them.
    """
    features = ad.as_tensor(features)
    if features.ndim == 3:
        features = features.reshape(1, *features.shape)
    if features.ndim != 4 or features.shape[1] != cfg.feature_dim:
        raise ShapeError(f"pool_and_embed: expected (N, {cfg.feature_dim}, H', W'), got {features.shape}")
    pre = embed_rows(ad.avgpool(features), p, cfg, rng)
    if stats is None:
        stats = batch_stats(pre, cfg.norm_eps)
    return normalize(pre, stats, p), stats


def embed_locations(features: Tensor, p, cfg: ModelConfig, stats: NormStats, rng=None) -> Tensor:
    """Per-position embeddings, shape (N, H'*W', E)."""
    n, d, hh, ww = features.shape
    rows = features.transpose(0, 2, 3, 1).reshape(n * hh * ww, d)
    pre = embed_rows(rows, p, cfg, rng)
    return normalize(pre, stats, p).reshape(n, hh * ww, cfg.width)


def _gru_layer(xs: list[Tensor], steps_mask: np.ndarray, p, layer: int, width: int) -> list[Tensor]:
    pre = f"lang.l{layer}."
    batch = xs[0].shape[0]
    h = Tensor(np.zeros((batch, width)))
    out = []
    for t, x in enumerate(xs):
        z = ad.sigmoid(x @ p[pre + "wz"] + h @ p[pre + "uz"] + p[pre + "bz"])
        r = ad.sigmoid(x @ p[pre + "wr"] + h @ p[pre + "ur"] + p[pre + "br"])
        n = ad.tanh(x @ p[pre + "wn"] + (r * h) @ p[pre + "un"] + p[pre + "bn"])
        h_new = n + z * (h - n)
        if steps_mask[:, t].all():
            h = h_new
        else:
            h = h + Tensor(steps_mask[:, t:t + 1]) * (h_new - h)
        out.append(h)
    return out


def encode_phrases(model: GroundingModel, phrases: Sequence[Sequence[str]], p, rng=None) -> Tensor:
    """Final hidden state of the 2-layer gated recurrent encoder for each phrase, (B, E)."""
    if not phrases:
        raise ValueError("encode_phrases: no phrases given")
    ids = [model.token_ids(ph) for ph in phrases]
    if any(len(x) == 0 for x in ids):
        raise ValueError("encode_phrases: empty token list")
    steps = max(len(x) for x in ids)
    grid = np.full((len(ids), steps), PAD, dtype=np.intp)
    mask = np.zeros((len(ids), steps))
    for i, seq in enumerate(ids):
        grid[i, : len(seq)] = seq
        mask[i, : len(seq)] = 1.0
    table = p["lang.embedding"]
    embedded = ad.take(table, grid)  # (B, T, token_dim)
    xs = [ad.take(embedded, [t], axis=1).reshape(len(ids), -1) for t in range(steps)]
    width = model.config.width
    hs = _gru_layer(xs, mask, p, 0, width)
    hs = [_dropout(h, model.config.dropout, rng) for h in hs]
    hs = _gru_layer(hs, mask, p, 1, width)
    return hs[-1]


def encode_phrase(model: GroundingModel, tokens: Sequence[str], p=None) -> Tensor:
    """Language code of a single phrase, shape (E,)."""
    if p is None:
        p = model.bind()
    return encode_phrases(model, [tokens], p).reshape(model.config.width)


def mask_logits(loc_emb: Tensor, codes: Tensor) -> Tensor:
    """(N, P, E) location embeddings x (B, E) codes -> (N, B, P) logits."""
    return (loc_emb @ codes.T).transpose(0, 2, 1)


def attention_mask(features, code, p, cfg: ModelConfig, stats: NormStats) -> Tensor:
    """H' x W' mask of ``sigmoid(embed(f_p) . code)`` for a single image's feature grid."""
    features = ad.as_tensor(features)
    if features.ndim == 3:
        features = features.reshape(1, *features.shape)
    code = ad.as_tensor(code)
    if code.shape != (cfg.width,):
        raise ShapeError(f"attention_mask: code width {code.shape} does not match embedding width {cfg.width}")
    _, _, hh, ww = features.shape
    emb = embed_locations(features, p, cfg, stats)
    return ad.sigmoid(emb.reshape(hh * ww, cfg.width) @ code.reshape(cfg.width, 1)).reshape(hh, ww)


def match_score(visual, language) -> Tensor:
    """``sigmoid(visual . language)``."""
    visual, language = ad.as_tensor(visual), ad.as_tensor(language)
    if visual.shape != language.shape or visual.ndim != 1:
        raise ShapeError(f"match_score: width mismatch {visual.shape} vs {language.shape}")
    return ad.sigmoid(ad.dot(visual, language))


class Grounder:
    """Inference helper around a frozen model: caches bound constants."""

    def __init__(self, model: GroundingModel):
        self.model = model
        self.p = model.bind()
        self.stats = model.inference_stats()

    def features(self, images) -> Tensor:
        return encode_image(images, self.p, self.model.config)

    def visual_code(self, features: Tensor) -> np.ndarray:
        codes, _ = pool_and_embed(features, self.p, self.model.config, self.stats)
        return codes.data

    def codes(self, phrases: Sequence[Sequence[str]]) -> np.ndarray:
        return encode_phrases(self.model, phrases, self.p).data

    def logits(self, image, phrases: Sequence[Sequence[str]]) -> np.ndarray:
        """(len(phrases), H', W') pre-sigmoid mask scores for one image."""
        cfg = self.model.config
        feats = self.features(image)
        emb = embed_locations(feats, self.p, cfg, self.stats).data[0]
        return (emb @ self.codes(phrases).T).T.reshape(len(phrases), cfg.grid, cfg.grid)

    def masks(self, image, phrases: Sequence[Sequence[str]]) -> np.ndarray:
        """(len(phrases), H', W') attention masks for one image."""
        return ad.sigmoid(Tensor(self.logits(image, phrases))).data
