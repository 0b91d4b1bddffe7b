"""Finite-difference verification of every trainable gradient path at small sizes.

Each check builds a tiny model in 64-bit precision, draws random points, and
compares ``backward()`` against central differences. Points whose hinge
arguments sit within ``KINK_GAP`` of zero are redrawn so that the check never
straddles a non-differentiable kink.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoders import EncoderSpec, ImageEncoder, SemanticTemplate, TextEncoder
from .losses import itc_loss_batch, phase1_loss, phase2_loss, triplet_loss_batch
from .numerics import Tensor
from .prompts import PromptBank
from .tpg import TargetPromptGenerator, true_row_exclusions

TOLERANCE = 1e-5
KINK_GAP = 1e-3
SCOPES = {"losses": ("triplet", "itc", "phase1"), "tpg": ("phase2_tpg",), "text": ("domain_vectors",)}
SCOPES["all"] = SCOPES["losses"] + SCOPES["tpg"] + SCOPES["text"]


@dataclass
class CheckResult:
    name: str
    seed: int
    point: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


class _Tiny:
    """Miniature model: T=3 tokens, D_in=8, E=6, one block with two heads, m=3."""

    def __init__(self, seed: int, classes=(0, 1, 2), domains=(0, 1, 2)):
        rng = np.random.default_rng([seed, 99])
        self.classes, self.domains = list(classes), list(domains)
        self.image = ImageEncoder(EncoderSpec(8, 3, 6, layers=1, heads=2, seed=seed))
        self.template = SemanticTemplate(len(classes), len(domains), 8, context_len=2, seed=seed)
        self.text = TextEncoder(EncoderSpec(8, 4 + 2, 6, layers=1, heads=2, seed=seed), self.template)
        self.bank = PromptBank(self.classes, self.domains, 3, 8, seed=seed)
        # move prompts to unit scale so every path carries a visible gradient
        self.bank.U.data = rng.normal(0, 0.5, self.bank.U.shape)
        self.bank.V.data = rng.normal(0, 0.5, self.bank.V.shape)
        self.tpg = TargetPromptGenerator(8, 3, feature_dim=5, key_dim=4, seed=seed)
        self.rng = rng

    def batch(self, n: int = 4):
        tokens = Tensor(self.rng.normal(0, 1, (n, 3, 8)))
        c = self.rng.integers(0, len(self.classes), n)
        d = self.rng.integers(0, len(self.domains), n)
        return tokens, c, d

    def texts(self, d):
        cls = np.repeat(self.classes, len(self.domains))
        dom = np.tile(self.domains, len(self.classes))
        table = nx.reshape(self.text.encode(cls, dom), (len(self.classes), len(self.domains), 6))
        flat = nx.reshape(table, (len(self.classes) * len(self.domains), 6))
        idx = np.arange(len(self.classes))[None, :] * len(self.domains) + np.asarray(d)[:, None]
        return nx.take(flat, idx)


def _hinge_args(anchor: np.ndarray, pos: np.ndarray, neg: np.ndarray, margin: float) -> np.ndarray:
    a = anchor[:, None, :]
    return ((a - pos) ** 2).sum(-1) - ((a - neg) ** 2).sum(-1) + margin


def _away_from_kink(make, margin: float, tries: int = 50):
    for _ in range(tries):
        anchor, pos, neg = make()
        if np.abs(_hinge_args(anchor, pos, neg, margin)).min() > KINK_GAP:
            return anchor, pos, neg
    raise nx.DegeneratePointError("could not draw a point away from the hinge kink")


def check_triplet(seed: int, point: int) -> float:
    rng = np.random.default_rng([seed, point, 1])
    anchor, pos, neg = _away_from_kink(lambda: (rng.normal(0, 1, (3, 4)), rng.normal(0, 1, (3, 2, 4)),
                                                rng.normal(0, 1, (3, 2, 4))), 0.5)
    a = Tensor(anchor)
    w = np.full((3, 2), 0.5)
    return nx.grad_check(lambda x: nx.mean(triplet_loss_batch(x, pos, neg, w, 0.5)), [a])


def check_itc(seed: int, point: int) -> float:
    rng = np.random.default_rng([seed, point, 2])
    img, txt = Tensor(rng.normal(0, 1, (3, 4))), Tensor(rng.normal(0, 1, (3, 5, 4)))
    targets = rng.integers(0, 5, 3)
    return nx.grad_check(lambda i, t: nx.mean(itc_loss_batch(i, t, targets, 0.07)), [img, txt])


def check_phase1(seed: int, point: int) -> float:
    """Full phase-1 objective wrt U, V, projection and domain context."""
    with nx.precision(np.float64):
        m = _Tiny(seed * 100 + point)
        tokens, c, d = m.batch()
        with nx.no_grad():
            live = m.image.encode(tokens, m.bank.select_prompts(c, d)).data
        rng = m.rng
        pos, neg = None, None
        for _ in range(50):
            pos = live[:, None, :] + rng.normal(0, 0.3, (4, 2, 6))
            neg = live[:, None, :] + rng.normal(0, 0.3, (4, 2, 6))
            if np.abs(_hinge_args(live, pos, neg, 0.5)).min() > 10 * KINK_GAP:
                break
        else:
            raise nx.DegeneratePointError("could not draw a point away from the hinge kink")
        w = np.full((4, 2), 0.5)

        def loss(U, V, W, b, ctx):
            feats = m.image.encode(tokens, m.bank.select_prompts(c, d))
            itc = itc_loss_batch(feats, m.texts(d), c, 0.07)
            return phase1_loss(itc, triplet_loss_batch(feats, pos, neg, w, 0.5))

        b = m.bank
        return nx.grad_check(loss, [b.U, b.V, b.proj_w, b.proj_b, m.template.domain_context])


def check_phase2_tpg(seed: int, point: int) -> float:
    """Phase-2 loss through masked attention and prompt mixing, wrt every generator weight."""
    with nx.precision(np.float64):
        m = _Tiny(seed * 100 + point)
        tokens, c, d = m.batch()
        with nx.no_grad():
            texts = Tensor(m.texts(d).data)
        ex_c, ex_d = true_row_exclusions(m.bank, c, d)
        m.tpg.calibrate(tokens.data.mean(axis=1), m.bank)

        def loss(*_):
            feats = m.image.encode(tokens, m.tpg.generate(tokens, m.bank, ex_c, ex_d))
            return phase2_loss(feats, texts, c, 0.07)

        return nx.grad_check(loss, m.tpg.parameters())


def check_domain_vectors(seed: int, point: int) -> float:
    """ITC gradient reaching the domain context through the frozen text encoder."""
    with nx.precision(np.float64):
        m = _Tiny(seed * 100 + point)
        tokens, c, d = m.batch()
        with nx.no_grad():
            feats = Tensor(m.image.encode(tokens, m.bank.select_prompts(c, d)).data)

        def loss(ctx):
            return nx.mean(itc_loss_batch(feats, m.texts(d), c, 0.07))

        return nx.grad_check(loss, [m.template.domain_context])


CHECKS = {"triplet": check_triplet, "itc": check_itc, "phase1": check_phase1,
          "phase2_tpg": check_phase2_tpg, "domain_vectors": check_domain_vectors}


def run_suite(scope: str = "all", seeds=(0, 1, 2), points: int = 5) -> tuple[list[CheckResult], float]:
    """Run every check in ``scope``; returns the results and wall time in seconds."""
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {sorted(SCOPES)}")
    start = time.perf_counter()
    results = [CheckResult(name, s, p, CHECKS[name](s, p))
               for name in SCOPES[scope] for s in seeds for p in range(points)]
    return results, time.perf_counter() - start
