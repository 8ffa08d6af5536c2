"""Feature extractors, token assembly and the multimodal Transformer encoder.

Token matrices are stored row-major: row ``j`` is token ``j``, laid out as
``L`` patch tokens, then ``M`` clinical-factor tokens, then ``C`` class tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.tensor import DimensionError, Tensor


@dataclass
class EncoderConfig:
    """Shapes and sizes of the encoder stack.

    Defaults are the full-size lymphoma setting; :meth:`desk` and :meth:`tiny`
    give the CPU-sized variants used for experiments and gradient checks.
    """

    R: int = 512
    L: int = 100
    M: int = 2
    C: int = 3
    layers: int = 2
    heads: int = 8
    dropout: float = 0.1
    clinical_dims: list[int] = field(default_factory=lambda: [18, 10])
    clinical_hidden: int = 256
    ff_mult: int = 4
    patch_shape: tuple[int, int, int] = (16, 16, 3)
    conv_channels: tuple[int, int] = (8, 16)
    # fixed per-channel input normalization, (x - mean) / std
    pixel_mean: tuple[float, float, float] = (0.8, 0.55, 0.7)
    pixel_std: tuple[float, float, float] = (0.15, 0.15, 0.15)
    # truncated-normal std for Transformer weights and class tokens
    init_std: float = 0.02

    def __post_init__(self):
        self.clinical_dims = list(self.clinical_dims)
        self.patch_shape = tuple(self.patch_shape)
        self.conv_channels = tuple(self.conv_channels)
        self.pixel_mean = tuple(self.pixel_mean)
        self.pixel_std = tuple(self.pixel_std)
        if self.R % self.heads != 0:
            raise ValueError(f"R={self.R} is not divisible by heads={self.heads}")
        if min(self.L, self.M, self.C) < 1:
            raise ValueError("L, M and C must all be at least 1")
        if len(self.clinical_dims) != self.M:
            raise ValueError(f"clinical_dims has {len(self.clinical_dims)} entries, expected M={self.M}")

    @property
    def n_tokens(self) -> int:
        return self.L + self.M + self.C

    @classmethod
    def desk(cls, **overrides) -> "EncoderConfig":
        base = dict(R=32, L=12, clinical_hidden=32)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "EncoderConfig":
        base = dict(R=8, L=6, clinical_hidden=8, conv_channels=(4, 4), patch_shape=(8, 8, 3))
        base.update(overrides)
        return cls(**base)


class PatchExtractor(nn.Module):
    """Toy CNN: two stride-2 3x3 convs with ReLU, global average pool, linear to R."""

    group = "f"

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        c1, c2 = cfg.conv_channels
        self.patch_shape = cfg.patch_shape
        ch = cfg.patch_shape[2]
        self.mean = np.resize(np.asarray(cfg.pixel_mean, dtype=np.float64), ch)
        self.inv_std = 1.0 / np.resize(np.asarray(cfg.pixel_std, dtype=np.float64), ch)
        self.conv1 = nn.Conv2d(cfg.patch_shape[2], c1, 3, 2, 1, rng)
        self.conv2 = nn.Conv2d(c1, c2, 3, 2, 1, rng)
        self.proj = nn.Linear(c2, cfg.R, rng)

    def __call__(self, x) -> Tensor:
        """Map a patch (h, w, ch) to (R,) or a batch (n, h, w, ch) to (n, R)."""
        x = T.as_tensor(x)
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != self.patch_shape:
            raise DimensionError(f"patch shape {x.shape[1:] if x.ndim == 4 else x.shape} "
                                 f"!= configured {self.patch_shape}")
        x = (x - self.mean) * self.inv_std
        h = T.relu(self.conv1(x))
        h = T.relu(self.conv2(h))
        n, hh, ww, c = h.shape
        pooled = T.mean(h.reshape(n, hh * ww, c), axis=1)
        out = self.proj(pooled)
        return out.reshape(out.shape[1]) if single else out


class ClinicalEmbedder(nn.Module):
    """Per-factor MLPs g_m: dim_m -> hidden -> R with ReLU in between."""

    group = "g"

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.dims = list(cfg.clinical_dims)
        self.mlps = nn.ModuleList([nn.MLP([d, cfg.clinical_hidden, cfg.R], rng) for d in self.dims])

    def __call__(self, t, m: int) -> Tensor:
        if not 0 <= m < len(self.dims):
            raise IndexError(f"clinical factor index {m} out of range for M={len(self.dims)}")
        t = T.as_tensor(t)
        if t.shape != (self.dims[m],):
            raise DimensionError(f"clinical factor {m} has shape {t.shape}, expected ({self.dims[m]},)")
        return self.mlps[m](t.reshape(1, self.dims[m])).reshape(-1)

    def embed_all(self, records) -> Tensor:
        return T.stack([self(t, m) for m, t in enumerate(records)])


@dataclass
class TokenMatrix:
    tokens: Tensor  # (L + M + C, R)
    L: int
    M: int
    C: int

    @property
    def patches(self) -> Tensor:
        return self.tokens[: self.L]

    @property
    def clinical(self) -> Tensor:
        return self.tokens[self.L: self.L + self.M]

    @property
    def classes(self) -> Tensor:
        return self.tokens[self.L + self.M:]


def assemble_tokens(patch_feats: Tensor, clin_feats: Tensor | None, class_tokens: Tensor,
                    type_patch: Tensor, type_clinical: Tensor | None) -> TokenMatrix:
    """Stack patch, clinical and class tokens and add their type embeddings.

    Every patch gets the same ``type_patch`` vector, clinical token ``m`` gets
    ``type_clinical[m]`` and class tokens get nothing added.
    """
    if patch_feats.ndim != 2 or class_tokens.ndim != 2:
        raise DimensionError("patch features and class tokens must be 2-D (count, R)")
    R = patch_feats.shape[1]
    parts = [patch_feats + type_patch]
    M = 0
    if clin_feats is not None:
        if type_clinical is None or clin_feats.shape != type_clinical.shape:
            raise DimensionError(f"clinical features {clin_feats.shape} do not match type "
                                 f"embeddings {None if type_clinical is None else type_clinical.shape}")
        parts.append(clin_feats + type_clinical)
        M = clin_feats.shape[0]
    if class_tokens.shape[1] != R or type_patch.shape != (R,):
        raise DimensionError(f"token width mismatch: patches R={R}, class tokens {class_tokens.shape}, "
                             f"patch type embedding {type_patch.shape}")
    parts.append(class_tokens)
    tokens = T.concat(parts, axis=0)
    return TokenMatrix(tokens, patch_feats.shape[0], M, class_tokens.shape[0])


class SelfAttention(nn.Module):
    def __init__(self, R: int, heads: int, rng: np.random.Generator, std: float = 0.02):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(R, R, rng, init="trunc_normal", std=std)
        self.k = nn.Linear(R, R, rng, init="trunc_normal", std=std)
        self.v = nn.Linear(R, R, rng, init="trunc_normal", std=std)
        self.out = nn.Linear(R, R, rng, init="trunc_normal", std=std)

    def _split(self, x: Tensor) -> Tensor:
        n, R = x.shape
        return T.transpose(x.reshape(n, self.heads, R // self.heads), (1, 0, 2))

    def __call__(self, x: Tensor, p: float, rng, training: bool) -> tuple[Tensor, np.ndarray]:
        n, R = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(R // self.heads))
        probs = T.softmax(scores, axis=-1)
        attn = probs.data
        probs = T.dropout(probs, p, rng, training)
        ctx = T.transpose(T.matmul(probs, v), (1, 0, 2)).reshape(n, R)
        return self.out(ctx), attn


class EncoderLayer(nn.Module):
    """Post-norm block: x = LN(x + attn(x)); x = LN(x + FF(x))."""

    def __init__(self, R: int, heads: int, ff_hidden: int, dropout: float, rng: np.random.Generator,
                 std: float = 0.02):
        super().__init__()
        self.attn = SelfAttention(R, heads, rng, std)
        self.norm1 = nn.LayerNorm(R)
        self.ff1 = nn.Linear(R, ff_hidden, rng, init="trunc_normal", std=std)
        self.ff2 = nn.Linear(ff_hidden, R, rng, init="trunc_normal", std=std)
        self.norm2 = nn.LayerNorm(R)
        self.p = dropout

    def __call__(self, x: Tensor, rng) -> tuple[Tensor, np.ndarray]:
        train = self.training
        a, attn = self.attn(x, self.p, rng, train)
        x = self.norm1(x + T.dropout(a, self.p, rng, train))
        h = T.dropout(T.relu(self.ff1(x)), self.p, rng, train)
        x = self.norm2(x + T.dropout(self.ff2(h), self.p, rng, train))
        return x, attn


class TransformerEncoder(nn.Module):
    def __init__(self, R: int, layers: int, heads: int, ff_hidden: int, dropout: float,
                 rng: np.random.Generator, std: float = 0.02):
        super().__init__()
        self.blocks = nn.ModuleList([EncoderLayer(R, heads, ff_hidden, dropout, rng, std)
                                     for _ in range(layers)])

    def __call__(self, x: Tensor, rng=None) -> tuple[Tensor, list[np.ndarray]]:
        maps = []
        for block in self.blocks:
            x, attn = block(x, rng)
            maps.append(attn)
        return x, maps


class MultimodalEncoder(nn.Module):
    """Class tokens, type embeddings and the Transformer stack (the encoder parameter group)."""

    group = "enc"

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, n_class_tokens: int | None = None,
                 n_clinical: int | None = None):
        super().__init__()
        n_cls = cfg.C if n_class_tokens is None else n_class_tokens
        n_clin = cfg.M if n_clinical is None else n_clinical
        self.class_tokens = nn.parameter(nn.trunc_normal(rng, (n_cls, cfg.R), cfg.init_std))
        self.type_patch = nn.parameter(np.zeros(cfg.R))
        if n_clin:
            self.type_clinical = nn.parameter(np.zeros((n_clin, cfg.R)))
        else:
            self.type_clinical = None
        self.transformer = TransformerEncoder(cfg.R, cfg.layers, cfg.heads, cfg.ff_mult * cfg.R,
                                              cfg.dropout, rng, cfg.init_std)

    def __call__(self, patch_feats: Tensor, clin_feats: Tensor | None, rng=None):
        H = assemble_tokens(patch_feats, clin_feats, self.class_tokens, self.type_patch, self.type_clinical)
        return self.encode(H, rng)

    def encode(self, H: TokenMatrix, rng=None) -> tuple[TokenMatrix, list[np.ndarray]]:
        out, maps = self.transformer(H.tokens, rng)
        return TokenMatrix(out, H.L, H.M, H.C), maps


def clinical_to_patch_attention(maps: list[np.ndarray], m: int, L: int, M: int) -> np.ndarray:
    """Final-layer, head-averaged attention from clinical token ``m`` to the ``L`` patches."""
    if not 0 <= m < M:
        raise IndexError(f"clinical factor index {m} out of range for M={M}")
    final = maps[-1].mean(axis=0)
    return final[L + m, :L].copy()
