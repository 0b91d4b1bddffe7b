"""Synthetic multi-domain datasets and the retrieval split protocols.

A sample is a grid of ``T`` token vectors standing in for an image's patch
features. Each class owns a prototype grid; each domain owns an invertible
linear map plus bias applied to every token row::

    tokens = A_d @ (prototype_c + noise) + bias_d

Domain 0 is the canonical domain that galleries are drawn from.
"""

from __future__ import annotations

import dataclasses
import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .numerics import TensorFormatError, read_tensor, write_tensor

PROTOCOLS = ("UCDR", "UcCDR", "UdCDR")
GALLERY_MODES = ("unseen_only", "seen_plus_unseen")
TAGS = ("train", "validation-query", "validation-gallery", "test-query", "test-gallery", "unused")
CANONICAL_DOMAIN = 0
MANIFEST_VERSION = 1


class ProtocolError(ValueError):
    """A split request cannot be satisfied under the chosen protocol."""


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 12
    num_domains: int = 5
    tokens: int = 16
    token_dim: int = 64
    class_separation: float = 0.05
    domain_transform_scale: float = 0.3
    noise_sigma: float = 0.025
    samples_per_cell: int = 30
    seed: int = 0
    # domain biases are mixtures of a few shared style directions
    style_dims: int = 2
    style_gain: float = 0.3

    def validate(self) -> None:
        for name in ("num_classes", "num_domains", "tokens", "token_dim", "samples_per_cell", "style_dims"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        # class_separation == 0 is accepted (degenerate, warned at generation time)
        scales = (self.class_separation, self.domain_transform_scale, self.noise_sigma, self.style_gain)
        if min(scales) < 0:
            raise ValueError("class_separation, domain_transform_scale, noise_sigma and style_gain must be >= 0")
        if not all(np.isfinite(x) for x in scales):
            raise ValueError("generator scales must be finite")


@dataclass
class SampleRecord:
    sample_id: int
    tokens: np.ndarray  # (T, D_in) float32
    class_id: int
    domain_id: int


@dataclass
class DatasetManifest:
    class_names: list[str]
    domain_names: list[str]
    counts: list[list[int]]  # counts[class][domain]
    generator_seed: int
    tokens: int
    token_dim: int
    generator: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Dataset:
    """A manifest plus its samples, with stacked arrays for vectorized access."""

    manifest: DatasetManifest
    samples: list[SampleRecord]

    def __post_init__(self):
        self.tokens = np.stack([s.tokens for s in self.samples]).astype(np.float32)
        self.class_ids = np.array([s.class_id for s in self.samples], dtype=np.int64)
        self.domain_ids = np.array([s.domain_id for s in self.samples], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class SplitAssignment:
    protocol: str
    gallery_mode: str
    seen_classes: list[int]
    unseen_classes: list[int]
    seen_domains: list[int]
    unseen_domains: list[int]
    query_domain: int
    validation_domain: int
    holdout_domain: int | None
    tags: list[str]  # indexed by sample_id
    canonical_domain: int = CANONICAL_DOMAIN

    def indices(self, tag: str) -> np.ndarray:
        if tag not in TAGS:
            raise KeyError(tag)
        return np.array([i for i, t in enumerate(self.tags) if t == tag], dtype=np.int64)

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["tags"] = {str(i): t for i, t in enumerate(self.tags)}
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SplitAssignment":
        obj = dict(obj)
        tags = obj.pop("tags")
        obj["tags"] = [tags[str(i)] for i in range(len(tags))]
        return cls(**obj)


# ---------------------------------------------------------------------------
# generation


def domain_transforms(config: GeneratorConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-domain ``(A_d, b_d)``; the canonical domain is the identity with zero bias.

    ``A_d = expm(scale * G / sqrt(D))`` is invertible for any G because
    ``det(expm(M)) = exp(trace(M)) > 0``. ``b_d`` is a random convex mixture of
    ``style_dims`` shared style directions, so novel domains resemble seen ones.
    Both vanish when ``domain_transform_scale`` is 0.
    """
    dim, scale = config.token_dim, config.domain_transform_scale
    styles = np.random.default_rng([config.seed, 3]).normal(0.0, 1.0, (config.style_dims, dim))
    out = []
    for d in range(config.num_domains):
        if d == CANONICAL_DOMAIN:
            out.append((np.eye(dim), np.zeros(dim)))
            continue
        rng = np.random.default_rng([config.seed, 1, d])
        gen = rng.normal(0.0, 1.0, (dim, dim)) / np.sqrt(dim)
        mix = rng.dirichlet(np.ones(config.style_dims))
        out.append((expm(scale * gen), scale * config.style_gain * (mix @ styles)))
    return out


def class_prototypes(config: GeneratorConfig) -> np.ndarray:
    out = np.empty((config.num_classes, config.tokens, config.token_dim))
    for c in range(config.num_classes):
        rng = np.random.default_rng([config.seed, 0, c])
        out[c] = rng.normal(0.0, 1.0, (config.tokens, config.token_dim)) * config.class_separation
    return out


def generate_dataset(config: GeneratorConfig) -> tuple[DatasetManifest, list[SampleRecord]]:
    config.validate()
    if config.class_separation == 0 and config.noise_sigma == 0:
        warnings.warn("class_separation and noise_sigma are both 0: every sample is identical "
                      "up to its domain transform", RuntimeWarning, stacklevel=2)
    protos = class_prototypes(config)
    transforms = domain_transforms(config)
    samples = []
    for c in range(config.num_classes):
        for d in range(config.num_domains):
            rng = np.random.default_rng([config.seed, 2, c, d])
            noise = rng.normal(0.0, 1.0, (config.samples_per_cell, config.tokens, config.token_dim))
            a, bias = transforms[d]
            grids = (protos[c] + config.noise_sigma * noise) @ a.T + bias
            for grid in grids:
                samples.append(SampleRecord(len(samples), grid.astype(np.float32), c, d))
    manifest = DatasetManifest(
        class_names=[f"class_{c:03d}" for c in range(config.num_classes)],
        domain_names=["canonical"] + [f"domain_{d}" for d in range(1, config.num_domains)],
        counts=[[config.samples_per_cell] * config.num_domains for _ in range(config.num_classes)],
        generator_seed=config.seed,
        tokens=config.tokens,
        token_dim=config.token_dim,
        generator=dataclasses.asdict(config),
    )
    return manifest, samples


def build_dataset(config: GeneratorConfig) -> Dataset:
    return Dataset(*generate_dataset(config))


# ---------------------------------------------------------------------------
# splits


def make_splits(manifest: DatasetManifest, samples, protocol: str, holdout_domain: int | None = None,
                holdout_class_fraction: float = 0.0, gallery_mode: str = "unseen_only",
                heldout_sample_fraction: float = 0.2) -> SplitAssignment:
    """Tag every sample for one protocol.

    Unseen classes are the last ``round(fraction * C)`` class indices. Within
    seen cells a ``heldout_sample_fraction`` of samples is withheld from
    training: in the canonical domain for the validation gallery and for the
    seen-class part of the test gallery, and in the validation domain for
    validation queries.
    """
    if protocol not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if gallery_mode not in GALLERY_MODES:
        raise ProtocolError(f"unknown gallery_mode {gallery_mode!r}")
    if not 0.0 <= holdout_class_fraction < 1.0:
        raise ProtocolError("holdout_class_fraction must lie in [0, 1)")
    C, D = manifest.num_classes, manifest.num_domains
    if protocol in ("UCDR", "UdCDR") and holdout_domain is None:
        raise ProtocolError(f"{protocol} requires holdout_domain")
    if protocol in ("UCDR", "UcCDR") and holdout_class_fraction <= 0:
        raise ProtocolError(f"{protocol} requires holdout_class_fraction > 0")
    if protocol == "UdCDR" and holdout_class_fraction > 0:
        raise ProtocolError("UdCDR keeps every class seen; holdout_class_fraction must be 0")
    if holdout_domain is not None and not 0 <= holdout_domain < D:
        raise ProtocolError(f"holdout_domain {holdout_domain} out of range [0, {D})")
    if holdout_domain == CANONICAL_DOMAIN:
        raise ProtocolError("holdout_domain cannot be the canonical gallery domain 0")

    n_unseen = 0 if holdout_class_fraction == 0 else max(1, int(round(holdout_class_fraction * C)))
    if n_unseen >= C:
        raise ProtocolError("holdout_class_fraction leaves no seen classes")
    seen_classes = list(range(C - n_unseen))
    unseen_classes = list(range(C - n_unseen, C))
    if protocol == "UcCDR":
        seen_domains = list(range(D))
        unseen_domains = []
        query_domain = holdout_domain if holdout_domain is not None else D - 1
    else:
        seen_domains = [d for d in range(D) if d != holdout_domain]
        unseen_domains = [holdout_domain]
        query_domain = holdout_domain
    if query_domain == CANONICAL_DOMAIN:
        raise ProtocolError("the query domain must differ from the canonical gallery domain")
    non_canonical = [d for d in seen_domains if d != CANONICAL_DOMAIN]
    if not non_canonical:
        raise ProtocolError("no seen non-canonical domain is available for validation queries")
    validation_domain = max(non_canonical)

    seen_c, unseen_c = set(seen_classes), set(unseen_classes)
    seen_d = set(seen_domains)
    tags = []
    for s in samples:
        c, d = s.class_id, s.domain_id
        n_cell = manifest.counts[c][d]
        n_hold = max(1, int(round(heldout_sample_fraction * n_cell)))
        i = s.sample_id - _cell_start(manifest, c, d)
        if c in seen_c and d in seen_d:
            if d == CANONICAL_DOMAIN and i < n_hold:
                tag = "validation-gallery"
            elif d == CANONICAL_DOMAIN and i < 2 * n_hold:
                wants_seen = protocol == "UdCDR" or gallery_mode == "seen_plus_unseen"
                tag = "test-gallery" if wants_seen else "unused"
            elif d == validation_domain and i < n_hold:
                tag = "validation-query"
            else:
                tag = "train"
        elif c in seen_c:  # seen class, unseen domain
            tag = "test-query" if protocol == "UdCDR" else "unused"
        elif c in unseen_c and d == query_domain:
            tag = "test-query"
        elif c in unseen_c and d == CANONICAL_DOMAIN:
            tag = "test-gallery"
        else:
            tag = "unused"
        tags.append(tag)

    split = SplitAssignment(protocol, gallery_mode, seen_classes, unseen_classes, seen_domains,
                            unseen_domains, query_domain, validation_domain, holdout_domain, tags)
    for tag in TAGS[:-1]:
        if tags.count(tag) == 0:
            raise ProtocolError(f"split {tag!r} is empty under {protocol} "
                                f"(holdout_domain={holdout_domain}, fraction={holdout_class_fraction})")
    check_split(split, samples)
    return split


def _cell_start(manifest: DatasetManifest, c: int, d: int) -> int:
    # samples are laid out in (class, domain, index) order
    flat = [n for row in manifest.counts for n in row]
    return int(sum(flat[: c * manifest.num_domains + d]))


def check_split(split: SplitAssignment, samples) -> None:
    """Raise ProtocolError if the split violates its protocol's label-set rules."""
    seen_c, unseen_c = set(split.seen_classes), set(split.unseen_classes)
    seen_d, unseen_d = set(split.seen_domains), set(split.unseen_domains)
    if split.protocol == "UCDR" and (seen_c & unseen_c or seen_d & unseen_d):
        raise ProtocolError("UCDR requires disjoint seen/unseen classes and domains")
    if split.protocol == "UdCDR" and (seen_d & unseen_d or unseen_c):
        raise ProtocolError("UdCDR requires disjoint domains and identical class sets")
    if split.protocol == "UcCDR" and (seen_c & unseen_c or split.query_domain not in seen_d):
        raise ProtocolError("UcCDR requires disjoint classes and a seen query domain")
    for s, tag in zip(samples, split.tags):
        if tag == "train" and (s.class_id not in seen_c or s.domain_id not in seen_d):
            raise ProtocolError(f"sample {s.sample_id} carries an unseen label but is tagged train")


# ---------------------------------------------------------------------------
# storage: manifest.json + samples.bin (+ splits.json)


def save_dataset(path, manifest: DatasetManifest, samples) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = manifest.to_json()
    meta["format_version"] = MANIFEST_VERSION
    meta["samples"] = [[s.sample_id, s.class_id, s.domain_id] for s in samples]
    (path / "manifest.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n",
                                        encoding="utf-8")
    with open(path / "samples.bin", "wb") as fh:
        for s in sorted(samples, key=lambda s: s.sample_id):
            write_tensor(fh, s.tokens)


def load_dataset(path) -> tuple[DatasetManifest, list[SampleRecord]]:
    path = Path(path)
    meta = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    if meta.pop("format_version", None) != MANIFEST_VERSION:
        raise TensorFormatError(f"unsupported manifest version in {path / 'manifest.json'}")
    rows = meta.pop("samples")
    manifest = DatasetManifest(**meta)
    bin_path = path / "samples.bin"
    if os.path.getsize(bin_path) == 0:
        raise OSError(f"{bin_path} is empty (byte offset 0)")
    samples = []
    with open(bin_path, "rb") as fh:
        for sid, c, d in rows:
            samples.append(SampleRecord(sid, read_tensor(fh).data, c, d))
    return manifest, samples


def save_splits(path, split: SplitAssignment) -> None:
    Path(path).write_text(json.dumps(split.to_json(), sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_splits(path) -> SplitAssignment:
    return SplitAssignment.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
