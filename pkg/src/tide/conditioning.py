"""Frozen toy encoders, the image projection / image cross-attention adapter, and
the conditioned noise predictor.

Shapes used throughout (``d_embed`` is shared by both toy encoders, so text and
image embeddings live in one space and cosine similarities between them mean
something):

* text embedding ``c_p``: ``(n_p, d_embed)``, unit rows
* image embedding: ``(n_i, d_embed)`` from non-overlapping patches
* projected image tokens ``c_i``: ``(n_i, d_embed)``
* denoiser hidden state: ``(n_tokens, hidden)``, one token per image patch
"""
from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import (
    ArrayLike,
    DimensionError,
    ParamSet,
    Tensor,
    add,
    gelu,
    matmul,
    mul,
    gather,
    softmax_rows,
    transpose,
)

__all__ = [
    "VocabError",
    "ModelConfig",
    "TextEncoder",
    "ImageEncoder",
    "encode_text",
    "encode_image",
    "patchify",
    "unpatchify",
    "attention",
    "ipm",
    "icam",
    "fuse",
    "timestep_embedding",
    "init_denoiser",
    "init_adapter",
    "denoise",
    "freeze_reference",
    "Model",
]


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 8
    channels: int = 3
    patch: int = 2
    hidden: int = 64
    mlp_ratio: int = 4
    n_res: int = 2
    n_attn: int = 2
    d_embed: int = 16
    d_attn: int = 16
    ipm_hidden: int = 32
    vocab_size: int = 32
    text_seed: int = 11
    image_seed: int = 12
    denoiser_seed: int = 13
    adapter_seed: int = 14

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_size, self.image_size, self.channels)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- encoders


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """``(H, W, C)`` -> ``(H/p * W/p, p*p*C)``, row-major over patches."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise DimensionError(f"expected an H x W x C image, got shape {img.shape}")
    h, w, c = img.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch {patch}")
    x = img.reshape(h // patch, patch, w // patch, patch, c).transpose(0, 2, 1, 3, 4)
    return x.reshape((h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens: np.ndarray, patch: int, size: int, channels: int) -> np.ndarray:
    g = size // patch
    x = np.asarray(tokens).reshape(g, g, patch, patch, channels).transpose(0, 2, 1, 3, 4)
    return x.reshape(size, size, channels)


class TextEncoder:
    """Seeded random lookup table with unit-norm rows.

    ``anchors`` pins chosen token rows to given directions (normalised); the
    synthetic data uses this to tie color words to the image encoder's
    embedding of that color, the way a contrastively trained pair of encoders
    would.
    """

    def __init__(self, vocab_size: int, d: int, seed: int, anchors: dict[int, np.ndarray] | None = None):
        table = np.random.default_rng(seed).standard_normal((vocab_size, d))
        for tok, vec in (anchors or {}).items():
            table[tok] = vec
        self.table = table / np.linalg.norm(table, axis=1, keepdims=True)
        self.table.setflags(write=False)
        self.vocab_size, self.d, self.seed = vocab_size, d, seed

    def __call__(self, tokens) -> np.ndarray:
        tokens = list(tokens)
        if not tokens:
            raise ValueError("prompt must contain at least one token")
        for tok in tokens:
            if not 0 <= int(tok) < self.vocab_size:
                raise VocabError(f"token id {tok} outside vocabulary of size {self.vocab_size}")
        return self.table[np.asarray(tokens, dtype=int)].copy()


class ImageEncoder:
    """Shared random map applied to every non-overlapping patch.

    ``activation="tanh"`` squashes the linear features so that mean-pooled
    embeddings retain more than the image's mean colour; a small random bias
    keeps a blank patch from embedding to exactly zero.
    """

    def __init__(
        self,
        patch: int,
        channels: int,
        d: int,
        seed: int,
        bias_scale: float = 0.0,
        activation: str = "linear",
        n_positions: int = 0,
    ):
        if activation not in ("linear", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(seed)
        fan_in = patch * patch * channels
        self.weight = rng.standard_normal((fan_in, d)) / np.sqrt(fan_in)
        self.bias = rng.standard_normal(d) * bias_scale
        # optional fixed per-token position code, added after the activation
        self.positions = rng.standard_normal((n_positions, d)) * 0.5 if n_positions else None
        self.patch, self.channels, self.d, self.seed = patch, channels, d, seed
        self.activation = activation

    def __call__(self, img: np.ndarray) -> np.ndarray:
        x = patchify(img, self.patch)
        if x.shape[1] != self.weight.shape[0]:
            raise DimensionError(f"patch width {x.shape[1]} does not match encoder input {self.weight.shape[0]}")
        z = x @ self.weight + self.bias
        z = np.tanh(z) if self.activation == "tanh" else z
        if self.positions is not None:
            if len(z) != len(self.positions):
                raise DimensionError(f"{len(z)} patches but {len(self.positions)} position codes")
            z = z + self.positions
        return z

    def pooled(self, img: np.ndarray) -> np.ndarray:
        return self(img).mean(axis=0)


@functools.lru_cache(maxsize=32)
def _text_encoder(vocab_size: int, d: int, seed: int) -> TextEncoder:
    return TextEncoder(vocab_size, d, seed)


@functools.lru_cache(maxsize=32)
def _image_encoder(patch: int, channels: int, d: int, seed: int) -> ImageEncoder:
    return ImageEncoder(patch, channels, d, seed)


def encode_text(prompt, vocab_size: int, d: int, seed: int) -> np.ndarray:
    return _text_encoder(vocab_size, d, seed)(prompt)


def encode_image(img: np.ndarray, patch: int, d: int, seed: int) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3:
        raise DimensionError(f"expected an H x W x C image, got shape {img.shape}")
    return _image_encoder(patch, img.shape[2], d, seed)(img)


# ---------------------------------------------------------------- adapter


def attention(q: ArrayLike, k: ArrayLike, v: ArrayLike) -> Tensor:
    """Scaled dot-product attention, scale 1/sqrt(d) with d the query width."""
    d = (q.shape if isinstance(q, Tensor) else np.shape(q))[1]
    scores = mul(matmul(q, transpose(k)), 1.0 / np.sqrt(d))
    return matmul(softmax_rows(scores), v)


def ipm(emb: ArrayLike, p: ParamSet, activation=gelu) -> Tensor:
    """Two-layer perceptron applied row-wise to encoder tokens."""
    w1 = p["ipm.w1"]
    width = emb.shape[-1] if isinstance(emb, Tensor) else np.shape(emb)[-1]
    if width != w1.shape[0]:
        raise DimensionError(f"image embedding width does not match IPM input {w1.shape[0]}")
    h = activation(add(matmul(emb, w1), p["ipm.b1"]))
    return add(matmul(h, p["ipm.w2"]), p["ipm.b2"])


def icam(q: ArrayLike, c_i: ArrayLike, w_k: ArrayLike, w_v: ArrayLike) -> Tensor:
    """Cross-attention from hidden queries onto projected image tokens."""
    keys = matmul(c_i, transpose(w_k))
    values = matmul(c_i, transpose(w_v))
    return attention(q, keys, values)


def fuse(
    q: ArrayLike,
    c_p: ArrayLike,
    c_i: ArrayLike | None,
    text_wk: ArrayLike,
    text_wv: ArrayLike,
    img_wk: ArrayLike | None = None,
    img_wv: ArrayLike | None = None,
    gamma: float = 1.0,
) -> Tensor:
    """Text attention plus ``gamma`` times image cross-attention.

    With ``gamma == 0`` (or no image tokens) the image branch is not evaluated
    at all, so the result is exactly the text-only attention.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    text = attention(q, matmul(c_p, transpose(text_wk)), matmul(c_p, transpose(text_wv)))
    if gamma == 0 or c_i is None:
        return text
    return add(text, mul(gamma, icam(q, c_i, img_wk, img_wv)))


# ---------------------------------------------------------------- denoiser


def timestep_embedding(t: int, dim: int, max_period: float = 1000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb


def _glorot(rng, fan_in, fan_out, gain=1.0):
    return rng.standard_normal((fan_in, fan_out)) * gain / np.sqrt(fan_in)


def init_denoiser(cfg: ModelConfig) -> ParamSet:
    """Random backbone; every entry frozen."""
    rng = np.random.default_rng(cfg.denoiser_seed)
    h, m = cfg.hidden, cfg.hidden * cfg.mlp_ratio
    p = {
        "in.w": _glorot(rng, cfg.token_dim, h),
        "in.b": np.zeros(h),
        "pos": rng.standard_normal((cfg.n_tokens, h)) * 0.5,
        "temb.w": _glorot(rng, h, h),
        "out.w": _glorot(rng, h, cfg.token_dim, 0.5),
        "out.b": np.zeros(cfg.token_dim),
    }
    for k in range(cfg.n_res):
        p[f"res{k}.w1"] = _glorot(rng, h, m)
        p[f"res{k}.b1"] = np.zeros(m)
        p[f"res{k}.w2"] = _glorot(rng, m, h, 0.5)
        p[f"res{k}.b2"] = np.zeros(h)
    for k in range(cfg.n_attn):
        p[f"attn{k}.wq"] = _glorot(rng, h, cfg.d_attn)
        p[f"attn{k}.wk"] = _glorot(rng, cfg.d_embed, cfg.d_attn).T.copy()
        p[f"attn{k}.wv"] = _glorot(rng, cfg.d_embed, cfg.d_attn).T.copy()
        p[f"attn{k}.wo"] = _glorot(rng, cfg.d_attn, h, 0.5)
    return ParamSet(p, frozen=p.keys())


def init_adapter(cfg: ModelConfig, zero_values: bool = True) -> ParamSet:
    """IPM plus per-block image key/value projections; all trainable.

    With ``zero_values`` the image value projections start at zero, so the
    adapted model is output-identical to the text-only backbone.
    """
    rng = np.random.default_rng(cfg.adapter_seed)
    p = {
        "ipm.w1": _glorot(rng, cfg.d_embed, cfg.ipm_hidden),
        "ipm.b1": np.zeros(cfg.ipm_hidden),
        "ipm.w2": _glorot(rng, cfg.ipm_hidden, cfg.d_embed),
        "ipm.b2": np.zeros(cfg.d_embed),
    }
    for k in range(cfg.n_attn):
        p[f"icam{k}.wk"] = _glorot(rng, cfg.d_embed, cfg.d_attn).T.copy()
        wv = _glorot(rng, cfg.d_embed, cfg.d_attn).T.copy()
        p[f"icam{k}.wv"] = np.zeros_like(wv) if zero_values else wv
    return ParamSet(p)


def denoise(
    xt: np.ndarray,
    c_p: np.ndarray,
    img_emb: np.ndarray | None,
    t: int,
    dp: ParamSet,
    ap: ParamSet | None,
    gamma: float,
    cfg: ModelConfig,
) -> Tensor:
    """Predict the noise in ``xt`` (an image) given the instruction and reference embeddings.

    ``img_emb`` is the raw image-encoder output; the IPM projection runs inside
    so that its weights receive gradients.  ``ap=None`` or ``gamma=0`` gives
    the text-only backbone.
    """
    xt = np.asarray(xt)
    if xt.shape != cfg.image_shape:
        raise DimensionError(f"noisy input has shape {xt.shape}, expected {cfg.image_shape}")
    use_image = ap is not None and gamma != 0 and img_emb is not None
    c_i = ipm(img_emb, ap) if use_image else None

    tokens = patchify(xt, cfg.patch)
    temb = matmul(timestep_embedding(t, cfg.hidden)[None, :], dp["temb.w"])
    h = add(add(add(matmul(tokens, dp["in.w"]), dp["in.b"]), dp["pos"]), temb)
    for k in range(max(cfg.n_res, cfg.n_attn)):
        if k < cfg.n_res:
            z = gelu(add(matmul(h, dp[f"res{k}.w1"]), dp[f"res{k}.b1"]))
            h = add(h, add(matmul(z, dp[f"res{k}.w2"]), dp[f"res{k}.b2"]))
        if k < cfg.n_attn:
            q = matmul(h, dp[f"attn{k}.wq"])
            f = fuse(
                q,
                c_p,
                c_i,
                dp[f"attn{k}.wk"],
                dp[f"attn{k}.wv"],
                ap[f"icam{k}.wk"] if use_image else None,
                ap[f"icam{k}.wv"] if use_image else None,
                gamma if use_image else 0.0,
            )
            h = add(h, matmul(f, dp[f"attn{k}.wo"]))
    out = add(matmul(h, dp["out.w"]), dp["out.b"])
    return gather(out, _unpatch_index(cfg.image_size, cfg.patch, cfg.channels), cfg.image_shape)


@functools.lru_cache(maxsize=8)
def _unpatch_index(size: int, patch: int, channels: int) -> np.ndarray:
    """Flat token-layout index for every pixel of the image layout."""
    n = (size // patch) ** 2 * patch * patch * channels
    idx = unpatchify(np.arange(n).reshape(-1, patch * patch * channels), patch, size, channels)
    idx = idx.ravel().astype(np.intp)
    idx.setflags(write=False)
    return idx


def freeze_reference(ap: ParamSet) -> ParamSet:
    """Value-equal, fully frozen deep copy."""
    return ap.frozen_copy()


@dataclass
class Model:
    """Backbone weights, toy encoders and config bundled together."""

    cfg: ModelConfig
    denoiser: ParamSet
    text_encoder: TextEncoder
    image_encoder: ImageEncoder
    meta: dict = field(default_factory=dict)

    def predict(self, xt, c_p, img_emb, t, ap, gamma) -> Tensor:
        return denoise(xt, c_p, img_emb, t, self.denoiser, ap, gamma, self.cfg)

    def eps(self, xt, c_p, img_emb, t, ap, gamma) -> np.ndarray:
        return self.predict(xt, c_p, img_emb, t, ap, gamma).data
