"""Assembly of encoders, template, prompt bank and generator into one model."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .encoders import EncoderSpec, ImageEncoder, SemanticTemplate, TextEncoder
from .losses import StateError
from .numerics import Tensor
from .prompts import PromptBank
from .tpg import TargetPromptGenerator

EMBED_MODES = ("none", "phase1", "tpg")


@dataclass(frozen=True)
class ModelConfig:
    tokens: int = 16
    input_dim: int = 64
    embed_dim: int = 32
    text_dim: int = 32
    context_len: int = 4
    layers: int = 2
    heads: int = 4
    prompt_dim: int = 16
    feature_dim: int = 32
    key_dim: int = 16
    momentum_rate: float = 1e-3
    use_tst: bool = True
    crossed_tpg_pairing: bool = False

    def to_json(self) -> dict:
        return asdict(self)


class AdapterModel:
    def __init__(self, config: ModelConfig, num_classes: int, num_domains: int,
                 seen_classes, seen_domains, seed: int = 0):
        self.config = config
        self.seed = seed
        self.num_classes, self.num_domains = num_classes, num_domains
        self.seen_classes = [int(c) for c in seen_classes]
        self.seen_domains = [int(d) for d in seen_domains]
        self.image_spec = EncoderSpec(config.input_dim, config.tokens, config.embed_dim,
                                      config.layers, config.heads, seed=seed)
        self.text_spec = EncoderSpec(config.text_dim, 4 + config.context_len, config.embed_dim,
                                     config.layers, config.heads, seed=seed)
        self.image_encoder = ImageEncoder(self.image_spec)
        self.template = SemanticTemplate(num_classes, num_domains, config.text_dim,
                                         config.context_len, seed=seed, use_context=config.use_tst)
        self.text_encoder = TextEncoder(self.text_spec, self.template, self.seen_classes, self.seen_domains)
        self.bank = PromptBank(self.seen_classes, self.seen_domains, config.prompt_dim,
                               config.input_dim, config.momentum_rate, seed=seed)
        self.tpg: TargetPromptGenerator | None = None

    def attach_tpg(self) -> TargetPromptGenerator:
        c = self.config
        self.tpg = TargetPromptGenerator(c.input_dim, c.prompt_dim, c.feature_dim, c.key_dim,
                                         seed=self.seed, crossed=c.crossed_tpg_pairing)
        return self.tpg

    def describe(self) -> dict:
        return {"image_encoder": self.image_spec.to_json(), "text_encoder": self.text_spec.to_json(),
                "model": self.config.to_json(), "num_classes": self.num_classes,
                "num_domains": self.num_domains, "seen_classes": self.seen_classes,
                "seen_domains": self.seen_domains, "seed": self.seed}

    def frozen_parameters(self) -> list[Tensor]:
        return (self.image_encoder.parameters() + self.text_encoder.parameters()
                + [self.template.prefix, self.template.class_embeddings])

    def phase1_parameters(self) -> list[Tensor]:
        params = self.bank.parameters()
        if self.config.use_tst:
            params.append(self.template.domain_context)
        return params

    # -- text side ---------------------------------------------------------

    def text_table(self) -> Tensor:
        """Text features for every seen (class, domain): ``(C_seen, D_seen or 1, E)``."""
        cs, ds = self.seen_classes, self.seen_domains
        if not self.config.use_tst:
            feats = self.text_encoder.encode(cs, [ds[0]] * len(cs))
            return nx.reshape(feats, (len(cs), 1, self.config.embed_dim))
        cls = np.repeat(cs, len(ds))
        dom = np.tile(ds, len(cs))
        return nx.reshape(self.text_encoder.encode(cls, dom), (len(cs), len(ds), self.config.embed_dim))

    def text_candidates(self, table: Tensor, domain_ids) -> Tensor:
        """Per-sample candidate set ``(B, C_seen, E)`` using each sample's own domain."""
        C, Dt, E = table.shape
        B = len(domain_ids)
        cols = self.bank.domain_rows(domain_ids) if Dt > 1 else np.zeros(B, np.int64)
        flat = nx.reshape(table, (C * Dt, E))
        idx = np.arange(C)[None, :] * Dt + cols[:, None]
        return nx.take(flat, idx)

    # -- image side --------------------------------------------------------

    def prompts_for(self, tokens, mode: str, class_ids=None, domain_ids=None) -> Tensor | None:
        if mode == "none":
            return None
        if mode == "phase1":
            if class_ids is None or domain_ids is None:
                raise StateError("phase1 prompts need seen class and domain labels")
            return self.bank.select_prompts(class_ids, domain_ids)
        if mode == "tpg":
            if self.tpg is None:
                raise StateError("tpg prompts need a trained target prompt generator")
            return self.tpg.generate(tokens, self.bank)
        raise ValueError(f"unknown embedding mode {mode!r}; expected one of {EMBED_MODES}")

    def embed(self, tokens: np.ndarray, mode: str, class_ids=None, domain_ids=None,
              chunk: int = 256, workers: int = 1) -> np.ndarray:
        """Unit-norm image-branch embeddings ``(n, E)``; never records gradients.

        Chunks are independent, so ``workers > 1`` runs them on a thread pool
        with bit-identical results.
        """
        if mode not in EMBED_MODES:
            raise ValueError(f"unknown embedding mode {mode!r}; expected one of {EMBED_MODES}")
        dtype = nx.default_dtype()

        def one(s: int) -> np.ndarray:
            sl = slice(s, s + chunk)
            with nx.precision(dtype), nx.no_grad():
                t = Tensor(tokens[sl])
                p = self.prompts_for(t, mode,
                                     None if class_ids is None else class_ids[sl],
                                     None if domain_ids is None else domain_ids[sl])
                return self.image_encoder.encode(t, p).data

        starts = range(0, len(tokens), chunk)
        if workers > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                out = list(pool.map(one, starts))
        else:
            out = [one(s) for s in starts]
        if not out:
            return np.zeros((0, self.config.embed_dim), dtype=np.float32)
        return np.concatenate(out)


def count_parameters(params) -> int:
    return int(sum(p.data.size for p in params))
