"""Comparison models sharing the tensor core and the training harness.

All of them expose ``forward(bag)`` returning an object with ``y_hat``,
``loss(out, bag)``, ``loss_components(out, bag)`` and, where defined,
``patch_attention(bag)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .aggregator import Classifier
from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .encoder import ClinicalEmbedder, MultimodalEncoder, PatchExtractor
from .loss import cross_entropy
from .model import ModelConfig, PersAM


class BaselineKind(str, Enum):
    clinical_mlp = "clinical_mlp"
    img_mil = "img_mil"
    img_clinical_mil = "img_clinical_mil"
    img_transformer = "img_transformer"
    img_clinical_transformer = "img_clinical_transformer"


MODEL_KINDS = tuple(k.value for k in BaselineKind) + ("persam",)
DISPLAY_NAMES = {
    "clinical_mlp": "Clinical MLP",
    "img_mil": "Img MIL",
    "img_clinical_mil": "Img-clinical MIL",
    "img_transformer": "Img Transformer",
    "img_clinical_transformer": "Img-clinical Transformer",
    "persam": "PersAM",
}


class UnsupportedOperation(TypeError):
    pass


@dataclass
class BaselineOutput:
    y_hat: Tensor
    attention: np.ndarray | None = None
    maps: list | None = None


class _CEModel(nn.Module):
    def loss_components(self, out, bag) -> dict[str, Tensor]:
        Y = np.zeros(out.y_hat.shape[0])
        Y[bag.label] = 1.0
        return {"ce": cross_entropy(out.y_hat, Y)}

    def loss(self, out, bag) -> Tensor:
        return self.loss_components(out, bag)["ce"]

    def patch_attention(self, bag, out=None) -> np.ndarray:
        out = out or self.forward(bag)
        return out.attention.copy()


class ClinicalMLP(_CEModel):
    """Concatenated record -> 256 -> 512 -> C, ignoring the patches."""

    kind = "clinical_mlp"
    group = "clf"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = sum(cfg.encoder.clinical_dims)
        self.net = nn.MLP([d, 256, 512, cfg.encoder.C], rng)

    def forward(self, bag) -> BaselineOutput:
        x = T.as_tensor(bag.flat_record).reshape(1, -1)
        return BaselineOutput(T.softmax(self.net(x).reshape(-1)))

    __call__ = forward

    def batch_loss(self, bags):
        """Summed cross-entropy of a batch of records in one vectorized pass."""
        X = T.as_tensor(np.stack([b.flat_record for b in bags]))
        probs = T.softmax(self.net(X), axis=1)
        Y = np.zeros(probs.shape)
        Y[np.arange(len(bags)), [b.label for b in bags]] = 1.0
        ce = cross_entropy(probs, Y)
        return ce, {"ce": ce.item()}

    def patch_attention(self, bag, out=None):
        raise UnsupportedOperation("clinical_mlp has no per-patch attention")


class AttentionPool(nn.Module):
    """Softmax attention pooling over instances, plain or gated."""

    group = "agg"

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, gated: bool = False):
        super().__init__()
        self.V = nn.Linear(dim, hidden, rng)
        self.U = nn.Linear(dim, hidden, rng) if gated else None
        self.w = nn.Linear(hidden, 1, rng)
        self.gated = gated

    def __call__(self, h: Tensor) -> tuple[Tensor, Tensor]:
        e = T.tanh(self.V(h))
        if self.gated:
            e = e * T.sigmoid(self.U(h))
        L = h.shape[0]
        weights = T.softmax(self.w(e).reshape(L), axis=0)
        z = T.matmul(weights.reshape(1, L), h).reshape(h.shape[1])
        return z, weights


class ImgMIL(_CEModel):
    kind = "img_mil"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder
        rng = np.random.default_rng(seed)
        self.f = PatchExtractor(enc, rng)
        self.pool = AttentionPool(enc.R, cfg.attn_hidden, rng, cfg.gated)
        self.classifier = Classifier(enc.R, 2 * enc.R, enc.C, rng)

    def forward(self, bag) -> BaselineOutput:
        z, w = self.pool(self.f(bag.patches))
        return BaselineOutput(self.classifier(z), w.data)

    __call__ = forward


class _ClinicalBranch(nn.Module):
    group = "g"

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng):
        super().__init__()
        self.net = nn.MLP([in_dim, hidden, out_dim], rng)

    def __call__(self, record: np.ndarray) -> Tensor:
        x = T.as_tensor(record).reshape(1, -1)
        return self.net(x).reshape(-1)


class ImgClinicalMIL(_CEModel):
    kind = "img_clinical_mil"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder
        rng = np.random.default_rng(seed)
        self.f = PatchExtractor(enc, rng)
        self.pool = AttentionPool(enc.R, cfg.attn_hidden, rng, cfg.gated)
        self.clinical = _ClinicalBranch(sum(enc.clinical_dims), enc.clinical_hidden, enc.R, rng)
        self.classifier = Classifier(2 * enc.R, enc.R, enc.C, rng)

    def forward(self, bag) -> BaselineOutput:
        z, w = self.pool(self.f(bag.patches))
        h = self.clinical(bag.flat_record)
        return BaselineOutput(self.classifier(T.concat([z, h], axis=0)), w.data)

    __call__ = forward


class ImgTransformer(_CEModel):
    """One class token after the patch (and optionally clinical) tokens; classify its encoding."""

    kind = "img_transformer"
    use_clinical = False

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder
        if cfg.baseline_init_std is not None:
            enc = replace(enc, init_std=cfg.baseline_init_std)
        rng = np.random.default_rng(seed)
        self.f = PatchExtractor(enc, rng)
        if self.use_clinical:
            self.g = ClinicalEmbedder(enc, rng)
        self.encoder = MultimodalEncoder(enc, rng, n_class_tokens=1,
                                         n_clinical=enc.M if self.use_clinical else 0)
        self.classifier = Classifier(enc.R, cfg.clf_hidden, enc.C, rng)
        self.dropout_rng = nn.DropoutRNG(seed + 1)

    def forward(self, bag) -> BaselineOutput:
        rng = self.dropout_rng.generator if self.training else None
        h_p = self.f(bag.patches)
        h_t = self.g.embed_all(bag.records) if self.use_clinical else None
        H, maps = self.encoder(h_p, h_t, rng)
        cls = H.classes.reshape(H.tokens.shape[1])
        att = maps[-1].mean(axis=0)[H.L + H.M, : H.L]
        return BaselineOutput(self.classifier(cls), att, maps)

    __call__ = forward


class ImgClinicalTransformer(ImgTransformer):
    kind = "img_clinical_transformer"
    use_clinical = True


_BUILDERS = {
    "clinical_mlp": ClinicalMLP,
    "img_mil": ImgMIL,
    "img_clinical_mil": ImgClinicalMIL,
    "img_transformer": ImgTransformer,
    "img_clinical_transformer": ImgClinicalTransformer,
    "persam": PersAM,
}


class ConfigError(ValueError):
    pass


def build(kind: str, cfg: ModelConfig | None = None, seed: int = 0):
    """Instantiate any model kind (the five baselines or ``"persam"``)."""
    kind = kind.value if isinstance(kind, BaselineKind) else kind
    try:
        builder = _BUILDERS[kind]
    except KeyError:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {sorted(_BUILDERS)}") from None
    return builder(cfg or ModelConfig(), seed)


def baseline_attention(model, bag) -> np.ndarray:
    """Per-patch salience of an attention baseline (softmax weights or class-token attention)."""
    return model.patch_attention(bag)
