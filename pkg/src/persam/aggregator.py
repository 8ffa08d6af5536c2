"""Multimodal aggregator: relevances, the three attentions, pooling and classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .encoder import TokenMatrix


class DegenerateAttentionError(FloatingPointError):
    """All pooling attentions vanished, so the weights cannot be normalized."""


@dataclass
class Projections:
    q_cls: Tensor  # (C, R)
    k_p: Tensor  # (L, R)
    v_p: Tensor  # (L, R)
    q_t: Tensor  # (M, R)
    k_t: Tensor  # (M, R)


@dataclass
class AttentionTriple:
    a: Tensor  # class-wise, (L, C)
    psi: Tensor  # exploratory, (L,)
    phi: Tensor  # class-clinical relevance, (C,)
    a_prime: Tensor  # explanatory, (L, C)


def project(H: TokenMatrix, W_q: Tensor, W_k: Tensor, W_v: Tensor) -> Projections:
    """Queries for class and clinical tokens, keys for patches and clinical tokens, values for patches.

    The same ``W_q`` and ``W_k`` serve both token groups.
    """
    patches, clinical, classes = H.patches, H.clinical, H.classes
    return Projections(
        q_cls=T.matmul(classes, W_q),
        k_p=T.matmul(patches, W_k),
        v_p=T.matmul(patches, W_v),
        q_t=T.matmul(clinical, W_q),
        k_t=T.matmul(clinical, W_k),
    )


def _scale(p: Projections, scaled: bool) -> float:
    return 1.0 / math.sqrt(p.k_p.shape[1]) if scaled else 1.0


def class_wise_attention(p: Projections, scaled: bool = False) -> Tensor:
    """a[l, c] = sigmoid(q_c . k_l); rows are not normalized."""
    return T.sigmoid(T.matmul(p.k_p, p.q_cls.T) * _scale(p, scaled))


def exploratory_attention(p: Projections, scaled: bool = False) -> Tensor:
    """psi[l] = mean over clinical factors m of sigmoid(q_m . k_l)."""
    return T.mean(T.sigmoid(T.matmul(p.k_p, p.q_t.T) * _scale(p, scaled)), axis=1)


def class_clinical_relevance(p: Projections, scaled: bool = False) -> Tensor:
    """phi[c] = mean over clinical factors m of sigmoid(q_c . k_m)."""
    return T.mean(T.sigmoid(T.matmul(p.q_cls, p.k_t.T) * _scale(p, scaled)), axis=1)


def explanatory_attention(a: Tensor, phi: Tensor, psi: Tensor) -> Tensor:
    """a'[l, c] = a[l, c] * phi[c] * psi[l]."""
    L, C = a.shape
    return a * phi * T.expand(psi.reshape(L, 1), (L, C))


def pooling_weights(a_prime: Tensor, eps: float = 1e-30) -> Tensor:
    """Per-patch max over classes, normalized to sum to one over the bag."""
    per_patch = T.tmax(a_prime, axis=1)
    total = T.tsum(per_patch)
    if not total.item() >= eps:
        raise DegenerateAttentionError(f"sum of pooling attentions is {total.item():.3g}")
    return per_patch / total


def aggregate(a_prime: Tensor, v_p: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(z, weights)`` with ``z = sum_l weights[l] * v_l``."""
    w = pooling_weights(a_prime)
    L = w.shape[0]
    z = T.matmul(w.reshape(1, L), v_p).reshape(v_p.shape[1])
    return z, w


class Classifier(nn.Module):
    """Hidden ReLU layer then softmax over classes."""

    group = "clf"

    def __init__(self, in_dim: int, hidden: int, n_classes: int, rng: np.random.Generator):
        super().__init__()
        self.net = nn.MLP([in_dim, hidden, n_classes], rng)

    def logits(self, z: Tensor) -> Tensor:
        return self.net(z.reshape(1, z.shape[0])).reshape(-1)

    def __call__(self, z: Tensor) -> Tensor:
        return T.softmax(self.logits(z), axis=-1)


class Aggregator(nn.Module):
    group = "agg"

    def __init__(self, R: int, rng: np.random.Generator, scaled: bool = False):
        super().__init__()
        self.W_q = nn.parameter(nn.kaiming_uniform(rng, (R, R), R))
        self.W_k = nn.parameter(nn.kaiming_uniform(rng, (R, R), R))
        self.W_v = nn.parameter(nn.kaiming_uniform(rng, (R, R), R))
        self.scaled = scaled

    def __call__(self, H: TokenMatrix) -> tuple[AttentionTriple, Projections]:
        p = project(H, self.W_q, self.W_k, self.W_v)
        a = class_wise_attention(p, self.scaled)
        psi = exploratory_attention(p, self.scaled)
        phi = class_clinical_relevance(p, self.scaled)
        return AttentionTriple(a, psi, phi, explanatory_attention(a, phi, psi)), p
