"""Triplet, image-text contrastive, and per-phase objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor
from .prompts import ConfigError


class StateError(RuntimeError):
    """An objective was requested before the state it depends on exists."""


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.5
    temperature: float = 0.07
    pairs: int = 2

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if self.pairs < 1:
            raise ConfigError(f"pairs must be >= 1, got {self.pairs}")


def _as(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def triplet_loss(anchor, pairs, margin: float = 0.5) -> Tensor:
    """Mean hinge ``max(0, |a - p|^2 - |a - n|^2 + margin)`` over the given pairs.

    An empty pair list yields an exact zero.
    """
    anchor = _as(anchor)
    if not pairs:
        return Tensor(0.0, dtype=anchor.data.dtype)
    pos = Tensor(np.stack([np.asarray(p.data if isinstance(p, Tensor) else p) for p, _ in pairs]))
    neg = Tensor(np.stack([np.asarray(n.data if isinstance(n, Tensor) else n) for _, n in pairs]))
    if pos.shape[1:] != anchor.shape:
        raise ShapeError(f"triplet_loss: anchor {anchor.shape} vs pair entries {pos.shape[1:]}")
    a = nx.expand(anchor, 0, len(pairs))
    hinge = nx.relu(nx.squared_euclidean(a, pos) - nx.squared_euclidean(a, neg) + margin)
    return nx.mean(hinge)


def triplet_loss_batch(anchors: Tensor, positives, negatives, weights, margin: float = 0.5) -> Tensor:
    """Per-sample triplet terms for padded pairs; ``weights`` (B, r) holds 1/k or 0."""
    pos, neg = _as(positives), _as(negatives)
    B, r, E = pos.shape
    if anchors.shape != (B, E) or neg.shape != pos.shape:
        raise ShapeError(f"triplet_loss_batch: anchors {anchors.shape}, pairs {pos.shape}/{neg.shape}")
    a = nx.expand(anchors, 1, r)
    hinge = nx.relu(nx.squared_euclidean(a, pos) - nx.squared_euclidean(a, neg) + margin)
    return nx.reduce_sum(hinge * Tensor(np.asarray(weights), dtype=anchors.data.dtype), axis=1)


def itc_loss(image_feature, text_features, true_class: int, temperature: float = 0.07) -> Tensor:
    """``-log softmax(cos(I, T_k) / temperature)[true_class]`` for one image."""
    img, txt = _as(image_feature), _as(text_features)
    if img.ndim != 1 or txt.ndim != 2 or txt.shape[1] != img.shape[0]:
        raise ShapeError(f"itc_loss: image {img.shape} vs text {txt.shape}")
    out = itc_loss_batch(nx.reshape(img, (1, -1)), nx.reshape(txt, (1,) + txt.shape),
                         [true_class], temperature)
    return nx.reshape(out, ())


def itc_loss_batch(images: Tensor, texts, targets, temperature: float = 0.07) -> Tensor:
    """Per-sample contrastive loss; ``texts`` is ``(B, C, E)`` (each sample's candidate set)."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    texts = _as(texts)
    B, C, E = texts.shape
    if images.shape != (B, E):
        raise ShapeError(f"itc_loss_batch: images {images.shape} vs texts {texts.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    logits = nx.scale(nx.cosine_similarity(nx.expand(images, 1, C), texts), 1.0 / temperature)
    shift = Tensor(np.broadcast_to(logits.data.max(axis=1, keepdims=True), (B, C)).copy())
    z = logits - shift
    onehot = np.zeros((B, C), dtype=z.data.dtype)
    onehot[np.arange(B), targets] = 1
    return nx.log(nx.reduce_sum(nx.exp(z), axis=1)) - nx.reduce_sum(z * Tensor(onehot), axis=1)


def phase1_loss(itc_terms: Tensor, triplet_terms: Tensor | None = None) -> Tensor:
    """Batch mean of ``triplet + itc`` with unit weights."""
    if itc_terms.shape[0] == 0:
        raise ShapeError("phase1_loss: empty batch")
    total = itc_terms if triplet_terms is None else itc_terms + triplet_terms
    return nx.mean(total)


def phase2_loss(images: Tensor, frozen_texts, targets, temperature: float = 0.07) -> Tensor:
    """Batch mean contrastive loss against frozen text features."""
    if frozen_texts is None:
        raise StateError("phase-2 loss needs the frozen phase-1 text features")
    return nx.mean(itc_loss_batch(images, frozen_texts, targets, temperature))
