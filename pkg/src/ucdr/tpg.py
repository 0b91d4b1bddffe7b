"""Target prompt generation by attention over masked prompt banks."""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .encoders import pooled_raw_feature
from .numerics import ShapeError, Tensor
from .prompts import PromptBank, mask_out


class InfeasibleMaskError(ValueError):
    """Every row of a bank is masked; attention has no support."""


class TargetPromptGenerator:
    """Feature encoder g (2-layer MLP), query/key maps, and scaled dot-product weights.

    ``crossed`` swaps the two halves fed to the projection (domain mixture in the
    class slot and vice versa); it exists for ablation only.
    """

    def __init__(self, input_dim: int, prompt_dim: int, feature_dim: int = 32, key_dim: int = 16,
                 seed: int = 0, crossed: bool = False):
        rng = np.random.default_rng([seed, 41])

        def param(shape, std):
            return Tensor(rng.normal(0.0, std, shape), requires_grad=True)

        self.g_w1 = param((input_dim, feature_dim), 1.0 / math.sqrt(input_dim))
        self.g_b1 = param((feature_dim,), 0.0)
        self.g_w2 = param((feature_dim, feature_dim), 1.0 / math.sqrt(feature_dim))
        self.g_b2 = param((feature_dim,), 0.0)
        self.q_w = param((feature_dim, key_dim), 1.0 / math.sqrt(feature_dim))
        self.q_b = param((key_dim,), 0.0)
        self.k_w = param((prompt_dim, key_dim), 1.0 / math.sqrt(prompt_dim))
        self.k_b = param((key_dim,), 0.0)
        self.input_dim, self.prompt_dim = input_dim, prompt_dim
        self.feature_dim, self.key_dim = feature_dim, key_dim
        self.crossed = crossed
        # frozen preconditioning constants, set by calibrate()
        self.input_mean = Tensor(np.zeros(input_dim))
        self.input_scale = Tensor(np.ones(input_dim))
        self.bank_scale = Tensor(np.ones(2))

    def buffers(self) -> dict[str, Tensor]:
        return {"input_mean": self.input_mean, "input_scale": self.input_scale, "bank_scale": self.bank_scale}

    def calibrate(self, pooled: np.ndarray, bank: PromptBank) -> None:
        """Standardize generator inputs: per-feature for pooled tokens, RMS for each bank.

        Both are exact reparameterizations of the first MLP layer and the key
        map; they only put the trainable weights on a unit scale.
        """
        pooled = np.asarray(pooled, dtype=np.float64)
        self.input_mean.data = pooled.mean(axis=0).astype(self.input_mean.data.dtype)
        self.input_scale.data = (1.0 / (pooled.std(axis=0) + 1e-6)).astype(self.input_scale.data.dtype)
        rms = [np.sqrt(np.mean(np.square(m.data, dtype=np.float64))) + 1e-12 for m in (bank.V, bank.U)]
        self.bank_scale.data = (1.0 / np.array(rms)).astype(self.bank_scale.data.dtype)

    def parameters(self) -> list[Tensor]:
        return [self.g_w1, self.g_b1, self.g_w2, self.g_b2, self.q_w, self.q_b, self.k_w, self.k_b]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def feature(self, pooled: Tensor) -> Tensor:
        x = (pooled - self.input_mean) * self.input_scale
        return nx.relu(x @ self.g_w1 + self.g_b1) @ self.g_w2 + self.g_b2

    def attend(self, feature: Tensor, masked_bank: Tensor, exclude, bank_scale: float = 1.0) -> Tensor:
        """Attention weights of shape ``(..., R)``; rows with ``exclude == 1`` get exactly 0.

        ``feature`` is ``(D_g,)`` or ``(B, D_g)``; ``exclude`` is ``(R,)`` or ``(B, R)``.
        """
        exclude = np.asarray(exclude)
        R = masked_bank.shape[0]
        if exclude.shape[-1] != R:
            raise ShapeError(f"mask length {exclude.shape[-1]} for a bank with {R} rows")
        keep = exclude == 0
        if not keep.any(axis=-1).all():
            raise InfeasibleMaskError("all bank rows are masked")
        q = feature @ self.q_w + self.q_b
        k = nx.scale(masked_bank @ self.k_w, bank_scale) + self.k_b
        logits = nx.scale(q @ nx.transpose(k), 1.0 / math.sqrt(self.key_dim))
        if logits.ndim == 2 and keep.ndim == 1:
            keep = np.broadcast_to(keep, logits.shape)
        return nx.softmax(logits, keep=keep)

    def mixtures(self, pooled: Tensor, bank: PromptBank, exclude_c, exclude_d) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Return ``(P_c, P_d, w_c, w_d)`` for pooled features ``(B, D_in)``.

        Per-sample exclusions ``(B, R)`` are applied inside the softmax support;
        since excluded rows carry zero weight, mixing the unmasked bank equals
        mixing the row-masked bank exactly.
        """
        feat = self.feature(pooled)
        sc, sd = (float(x) for x in self.bank_scale.data)
        w_c = self.attend(feat, bank.V, exclude_c, sc)
        w_d = self.attend(feat, bank.U, exclude_d, sd)
        return w_c @ bank.V, w_d @ bank.U, w_c, w_d

    def generate(self, tokens, bank: PromptBank, exclude_c=None, exclude_d=None) -> Tensor:
        """Batched prompts ``(B, D_in)`` from token grids ``(B, T, D_in)``; masks default to none."""
        pooled = pooled_raw_feature(tokens)
        B = pooled.shape[0]
        exclude_c = np.zeros((B, len(bank.classes)), np.int64) if exclude_c is None else np.asarray(exclude_c)
        exclude_d = np.zeros((B, len(bank.domains)), np.int64) if exclude_d is None else np.asarray(exclude_d)
        p_c, p_d, _, _ = self.mixtures(pooled, bank, exclude_c, exclude_d)
        return bank.project(p_d, p_c) if self.crossed else bank.project(p_c, p_d)

    def generate_target_prompt(self, tokens, bank: PromptBank, exclude_c=None, exclude_d=None) -> Tensor:
        """Single-sample path written literally over the masked banks ``V'`` and ``U'``."""
        t = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        exclude_c = np.zeros(len(bank.classes), np.int64) if exclude_c is None else np.asarray(exclude_c)
        exclude_d = np.zeros(len(bank.domains), np.int64) if exclude_d is None else np.asarray(exclude_d)
        feat = self.feature(pooled_raw_feature(t))
        v_masked, u_masked = mask_out(bank.V, exclude_c), mask_out(bank.U, exclude_d)
        sc, sd = (float(x) for x in self.bank_scale.data)
        w_c = self.attend(feat, v_masked, exclude_c, sc)
        w_d = self.attend(feat, u_masked, exclude_d, sd)
        p_c = nx.reshape(nx.reshape(w_c, (1, -1)) @ v_masked, (bank.prompt_dim,))
        p_d = nx.reshape(nx.reshape(w_d, (1, -1)) @ u_masked, (bank.prompt_dim,))
        return bank.project(p_d, p_c) if self.crossed else bank.project(p_c, p_d)


def true_row_exclusions(bank: PromptBank, class_ids, domain_ids) -> tuple[np.ndarray, np.ndarray]:
    """One-hot exclusion masks marking each sample's own class and domain rows."""
    B = len(class_ids)
    ex_c = np.zeros((B, len(bank.classes)), np.int64)
    ex_d = np.zeros((B, len(bank.domains)), np.int64)
    ex_c[np.arange(B), bank.class_rows(class_ids)] = 1
    ex_d[np.arange(B), bank.domain_rows(domain_ids)] = 1
    return ex_c, ex_d
