"""The full PersAM network: extractors, multimodal encoder, aggregator, classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .aggregator import Aggregator, AttentionTriple, Classifier, aggregate
from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .encoder import (
    ClinicalEmbedder,
    EncoderConfig,
    MultimodalEncoder,
    PatchExtractor,
    TokenMatrix,
    clinical_to_patch_attention,
)
from .loss import LossConfig, bce, cross_entropy, noisy_or

GROUPS = ("f", "g", "enc", "agg", "clf")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig.desk)
    clf_hidden: int = 256
    attn_hidden: int = 128  # baseline attention-pooling head
    gated: bool = False  # baseline attention-pooling variant
    scale_relevance: bool = False
    baseline_init_std: float | None = None  # Transformer-baseline init; None keeps encoder.init_std
    loss: LossConfig = field(default_factory=LossConfig)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """CPU-scale sizes used by the synthetic experiments.

        The noisy-OR floor is lowered so that a 16-patch bag has the same
        ceiling on pi as a 100-patch bag at the default floor. The Transformer
        baselines start from std R^-1/2: from 0.02 their single class token
        stays at chance at this scale.
        """
        enc = overrides.get("encoder", EncoderConfig.desk(L=16))
        base = dict(encoder=enc, clf_hidden=64, baseline_init_std=enc.R ** -0.5,
                    loss=LossConfig(clamp_lo=LossConfig.clamp_lo ** (100 / enc.L)))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        loss = LossConfig(**d.pop("loss", {}))
        return cls(encoder=enc, loss=loss, **d)


@dataclass
class PersAMOutput:
    y_hat: Tensor
    attention: AttentionTriple
    weights: Tensor
    z: Tensor
    pi: Tensor
    tokens: TokenMatrix
    maps: list[np.ndarray]


class PersAM(nn.Module):
    kind = "persam"

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        enc = self.cfg.encoder
        rng = np.random.default_rng(seed)
        self.f = PatchExtractor(enc, rng)
        self.g = ClinicalEmbedder(enc, rng)
        self.encoder = MultimodalEncoder(enc, rng)
        self.aggregator = Aggregator(enc.R, rng, scaled=self.cfg.scale_relevance)
        self.classifier = Classifier(enc.R, self.cfg.clf_hidden, enc.C, rng)
        self.dropout_rng = nn.DropoutRNG(seed + 1)

    def forward(self, bag) -> PersAMOutput:
        rng = self.dropout_rng.generator if self.training else None
        h_p = self.f(bag.patches)
        h_t = self.g.embed_all(bag.records)
        H, maps = self.encoder(h_p, h_t, rng)
        att, proj = self.aggregator(H)
        z, w = aggregate(att.a_prime, proj.v_p)
        y_hat = self.classifier(z)
        pi = noisy_or(att.a_prime, self.cfg.loss)
        return PersAMOutput(y_hat, att, w, z, pi, H, maps)

    __call__ = forward

    def loss_components(self, out: PersAMOutput, bag) -> dict[str, Tensor]:
        C = out.y_hat.shape[0]
        Y = np.zeros(C)
        Y[bag.label] = 1.0
        return {
            "ce": cross_entropy(out.y_hat, Y),
            "bce": T.mean(bce(out.pi, self.cfg.loss.smoothed(bag.label, C))),
        }

    def loss(self, out: PersAMOutput, bag) -> Tensor:
        parts = self.loss_components(out, bag)
        return parts["ce"] + parts["bce"]

    def patch_attention(self, bag, out: PersAMOutput | None = None) -> np.ndarray:
        out = out or self.forward(bag)
        return out.weights.data.copy()

    def clinical_to_patch(self, out: PersAMOutput) -> np.ndarray:
        H = out.tokens
        return np.stack([clinical_to_patch_attention(out.maps, m, H.L, H.M) for m in range(H.M)])
