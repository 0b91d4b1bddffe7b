"""Frozen image/text transformer encoders and the learnable text template.

Both encoders are seeded-random and never updated. The image encoder accepts
an additive prompt that is broadcast onto every input token row; the text
encoder reads a template sequence ``[prefix(3); class(1); domain context(N)]``
whose domain-context vectors are the only trainable text-side parameters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


class MisuseError(RuntimeError):
    """A label outside the trained (seen) label set reached the text branch."""


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    tokens: int
    embed_dim: int
    layers: int = 2
    heads: int = 4
    ff_mult: int = 2
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def _frozen(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, shape))


class TransformerBlock:
    """Pre-norm block: ``x + MHA(LN(x))`` then ``x + FFN(LN(x))``."""

    def __init__(self, dim: int, heads: int, ff_mult: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"model width {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        s = 1.0 / math.sqrt(dim)
        self.wq, self.wk, self.wv, self.wo = (_frozen(rng, (dim, dim), s) for _ in range(4))
        self.ln1_g, self.ln1_b = Tensor(np.ones(dim)), Tensor(np.zeros(dim))
        self.ln2_g, self.ln2_b = Tensor(np.ones(dim)), Tensor(np.zeros(dim))
        hidden = ff_mult * dim
        self.w1 = _frozen(rng, (dim, hidden), s)
        self.b1 = _frozen(rng, (hidden,), 0.02)
        self.w2 = _frozen(rng, (hidden, dim), 1.0 / math.sqrt(hidden))
        self.b2 = _frozen(rng, (dim,), 0.02)

    def parameters(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo, self.ln1_g, self.ln1_b, self.ln2_g,
                self.ln2_b, self.w1, self.b1, self.w2, self.b2]

    def _attention(self, h: Tensor) -> Tensor:
        B, T, D = h.shape
        H, dh = self.heads, D // self.heads

        def split(x):
            x = nx.reshape(x, (B, T, H, dh))
            return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (B * H, T, dh))

        q, k, v = split(h @ self.wq), split(h @ self.wk), split(h @ self.wv)
        att = nx.softmax(nx.scale(nx.matmul(q, nx.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh)))
        o = nx.reshape(nx.matmul(att, v), (B, H, T, dh))
        return nx.reshape(nx.transpose(o, (0, 2, 1, 3)), (B, T, D)) @ self.wo

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self._attention(nx.layer_norm(x, self.ln1_g, self.ln1_b))
        h = nx.layer_norm(x, self.ln2_g, self.ln2_b)
        return x + (nx.relu(h @ self.w1 + self.b1) @ self.w2 + self.b2)


class _Backbone:
    def __init__(self, spec: EncoderSpec, width: int, seq_len: int, salt: int):
        rng = np.random.default_rng([spec.seed, salt])
        self.spec = spec
        self.pos = _frozen(rng, (seq_len, width), 0.1)
        self.blocks = [TransformerBlock(width, spec.heads, spec.ff_mult, rng) for _ in range(spec.layers)]
        self.head_w = _frozen(rng, (width, spec.embed_dim), 1.0 / math.sqrt(width))
        self.head_b = _frozen(rng, (spec.embed_dim,), 0.02)

    def parameters(self) -> list[Tensor]:
        params = [self.pos, self.head_w, self.head_b]
        for b in self.blocks:
            params += b.parameters()
        return params

    def run_blocks(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        x = x + nx.expand(nx.take(self.pos, np.arange(T)), 0, B)
        for block in self.blocks:
            x = block(x)
        return x


class ImageEncoder(_Backbone):
    """Frozen token-grid encoder: prompt add, positional add, blocks, mean-pool, linear, L2."""

    def __init__(self, spec: EncoderSpec):
        super().__init__(spec, spec.input_dim, spec.tokens, salt=11)

    def encode(self, tokens, prompts: Tensor | None = None) -> Tensor:
        """Batched encoding: tokens ``(B, T, D_in)``, prompts ``(B, D_in)`` or None -> ``(B, E)``."""
        x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        if x.ndim != 3 or x.shape[1:] != (self.spec.tokens, self.spec.input_dim):
            raise ShapeError(f"image tokens must be (B, {self.spec.tokens}, {self.spec.input_dim}), "
                             f"got {x.shape}")
        if prompts is not None:
            if prompts.shape != (x.shape[0], self.spec.input_dim):
                raise ShapeError(f"prompts must be ({x.shape[0]}, {self.spec.input_dim}), got {prompts.shape}")
            x = x + nx.expand(prompts, 1, self.spec.tokens)
        h = self.run_blocks(x)
        return nx.l2_normalize(nx.mean(h, axis=1) @ self.head_w + self.head_b)

    def encode_image(self, tokens, prompt: Tensor | None = None) -> Tensor:
        """Single-sample form: ``(T, D_in)`` tokens and ``(D_in,)`` prompt -> ``(E,)``."""
        t = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        p = None
        if prompt is not None:
            if prompt.shape != (self.spec.input_dim,):
                raise ShapeError(f"prompt must have shape ({self.spec.input_dim},), got {prompt.shape}")
            p = nx.reshape(prompt, (1, -1))
        out = self.encode(nx.reshape(t, (1,) + t.shape), p)
        return nx.reshape(out, (self.spec.embed_dim,))


def pooled_raw_feature(tokens) -> Tensor:
    """Mean over token rows: ``(..., T, D_in) -> (..., D_in)``."""
    t = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    if t.ndim < 2:
        raise ShapeError(f"pooled_raw_feature needs at least (T, D_in), got {t.shape}")
    return nx.mean(t, axis=t.ndim - 2)


class SemanticTemplate:
    """Token embeddings for ``A photo of <class> from the <v_1..v_N> domain``.

    ``domain_context`` holds N trainable vectors per domain.
    """

    def __init__(self, num_classes: int, num_domains: int, text_dim: int, context_len: int = 4,
                 seed: int = 0, use_context: bool = True):
        rng = np.random.default_rng([seed, 23])
        self.prefix = _frozen(rng, (3, text_dim), 1.0)
        self.class_embeddings = _frozen(rng, (num_classes, text_dim), 1.0)
        self.domain_context = Tensor(rng.normal(0.0, 0.02, (num_domains, context_len, text_dim)),
                                     requires_grad=use_context)
        self.use_context = use_context
        self.text_dim, self.context_len = text_dim, context_len

    @property
    def seq_len(self) -> int:
        return 4 + (self.context_len if self.use_context else 0)

    def sequences(self, class_ids, domain_ids) -> Tensor:
        class_ids = np.asarray(class_ids, dtype=np.int64)
        n = class_ids.shape[0]
        parts = [nx.expand(self.prefix, 0, n), nx.reshape(nx.take(self.class_embeddings, class_ids),
                                                          (n, 1, self.text_dim))]
        if self.use_context:
            parts.append(nx.take(self.domain_context, np.asarray(domain_ids, dtype=np.int64)))
        return nx.concat(parts, axis=1)


class TextEncoder(_Backbone):
    """Frozen transformer over template sequences; last-token read-out, linear, L2."""

    def __init__(self, spec: EncoderSpec, template: SemanticTemplate,
                 seen_classes=None, seen_domains=None):
        super().__init__(spec, spec.input_dim, template.seq_len, salt=17)
        self.template = template
        self.seen_classes = None if seen_classes is None else frozenset(int(c) for c in seen_classes)
        self.seen_domains = None if seen_domains is None else frozenset(int(d) for d in seen_domains)

    def _check(self, class_ids, domain_ids) -> None:
        if self.seen_classes is not None:
            bad = set(np.asarray(class_ids).tolist()) - self.seen_classes
            if bad:
                raise MisuseError(f"text branch called with unseen class ids {sorted(bad)}")
        if self.seen_domains is not None:
            bad = set(np.asarray(domain_ids).tolist()) - self.seen_domains
            if bad:
                raise MisuseError(f"text branch called with unseen domain ids {sorted(bad)}")

    def encode(self, class_ids, domain_ids) -> Tensor:
        self._check(class_ids, domain_ids)
        seq = self.template.sequences(class_ids, domain_ids)
        h = self.run_blocks(seq)
        last = nx.reshape(nx.take(nx.transpose(h, (1, 0, 2)), [h.shape[1] - 1]), (h.shape[0], h.shape[2]))
        return nx.l2_normalize(last @ self.head_w + self.head_b)

    def encode_text(self, class_id: int, domain_id: int) -> Tensor:
        return nx.reshape(self.encode([class_id], [domain_id]), (self.spec.embed_dim,))
