"""End-to-end runs and the ablation grid, with phase-1 results shared between rows."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from .config import AblationConfig, RunConfig
from .data import Dataset, SplitAssignment, build_dataset, make_splits
from .losses import itc_loss_batch
from .model import AdapterModel
from .numerics import Tape, Tensor
from .retrieval import evaluate, mean_average_precision, retrieve
from .train import (AdamState, Checkpoint, domain_free_text_table, lr_at_epoch, optimizer_step,
                    restore_model, train_phase1, train_phase2)


def prepare(config: RunConfig) -> tuple[Dataset, SplitAssignment]:
    ds = build_dataset(config.generator_config())
    s = config.split
    split = make_splits(ds.manifest, ds.samples, s.protocol, s.holdout_domain, s.holdout_class_fraction,
                        s.gallery_mode, s.heldout_sample_fraction)
    return ds, split


def zero_shot_model(config: RunConfig, dataset: Dataset, split: SplitAssignment) -> AdapterModel:
    return AdapterModel(config.model_config(), len(dataset.manifest.class_names),
                        len(dataset.manifest.domain_names), split.seen_classes, split.seen_domains,
                        seed=config.seed)


class PhaseCache:
    """Memoizes phase-1 checkpoints by the settings that influence phase 1."""

    def __init__(self):
        self._store: dict[tuple, Checkpoint] = {}

    @staticmethod
    def key(config: RunConfig) -> str:
        # use_mask only affects phase 2; everything else can change phase 1
        a = config.ablation
        return repr((config.seed, config.generator, config.split, config.model_config(), config.phase1,
                     config.loss_config(), a.triplet_pairs, a.use_momentum, a.one_phase_mode))

    def phase1(self, config: RunConfig, dataset: Dataset, split: SplitAssignment) -> Checkpoint:
        k = self.key(config)
        if k not in self._store:
            _, ckpt = train_phase1(dataset, split, config.model_config(), config.train_config(1),
                                   config.loss_config(), config.train_ablation())
            self._store[k] = ckpt
        return self._store[k]


def run_two_phase(config: RunConfig, dataset: Dataset, split: SplitAssignment,
                  cache: PhaseCache | None = None) -> tuple[AdapterModel, Checkpoint]:
    """Phase 1 (cached) then phase 2; one-phase mode skips phase 2."""
    cache = cache or PhaseCache()
    ckpt1 = cache.phase1(config, dataset, split)
    if config.ablation.one_phase_mode:
        return restore_model(ckpt1), ckpt1
    return train_phase2(dataset, split, ckpt1, config.train_config(2), config.loss_config(),
                        config.train_ablation())


# ---------------------------------------------------------------------------
# linear probe on frozen features


def train_linear_probe(config: RunConfig, dataset: Dataset, split: SplitAssignment) -> np.ndarray:
    """E x E head over zero-shot features, trained with ITC against domain-free text anchors."""
    model = zero_shot_model(config, dataset, split)
    train_idx = split.indices("train")
    feats = model.embed(dataset.tokens[train_idx], "none")
    targets = model.bank.class_rows(dataset.class_ids[train_idx])
    anchors = domain_free_text_table(model)[:, 0, :]
    E = feats.shape[1]
    head = Tensor(np.eye(E), requires_grad=True)
    state = AdamState.zeros_like([head])
    tc = config.train_config(1)
    texts = Tensor(np.broadcast_to(anchors, (tc.batch_size,) + anchors.shape).copy())
    for epoch in range(tc.lr_decay_epochs):
        order = np.random.default_rng([config.seed, 3, epoch]).permutation(len(train_idx))
        for s in range(0, len(order), tc.batch_size):
            idx = order[s:s + tc.batch_size]
            with Tape():
                out = nx.l2_normalize(Tensor(feats[idx]) @ head)
                t = texts if len(idx) == tc.batch_size else Tensor(texts.data[: len(idx)])
                loss = nx.mean(itc_loss_batch(out, t, targets[idx], config.loss.temperature))
                loss.backward()
            optimizer_step([head], [head.grad], state, lr_at_epoch(tc, epoch))
            head.grad = None
    return head.data


def probe_metrics(config: RunConfig, dataset: Dataset, split: SplitAssignment, head: np.ndarray,
                  metric_ks=(10, 50)) -> dict[str, float]:
    """Test metrics for zero-shot features passed through a trained probe head."""
    model = zero_shot_model(config, dataset, split)
    q, g = split.indices("test-query"), split.indices("test-gallery")

    def emb(idx):
        z = model.embed(dataset.tokens[idx], "none") @ head
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    rankings, _ = retrieve(emb(q), emb(g))
    rel = dataset.class_ids[q][:, None] == dataset.class_ids[g][None, :]
    metrics = {}
    for k in metric_ks:
        res = mean_average_precision(rankings, rel, k)
        metrics[f"mAP@{k}"], metrics[f"Prec@{k}"] = res["map"], res["prec"]
    metrics["mAP@all"] = mean_average_precision(rankings, rel, None)["map"]
    return metrics


# ---------------------------------------------------------------------------
# ablation grid

FULL = AblationConfig()
ABLATION_ROWS: dict[str, AblationConfig | str] = {
    "zero_shot": "none",
    "linear_probe": "probe",
    "one_phase": replace(FULL, one_phase_mode=True, use_mask=False),
    "two_phase_plain": replace(FULL, use_mask=False, use_tst=False),
    "no_tst": replace(FULL, use_tst=False),
    "no_mask": replace(FULL, use_mask=False),
    "full_no_triplet": replace(FULL, triplet_pairs=0),
    "full_pair1": replace(FULL, triplet_pairs=1),
    "full": FULL,
}


@dataclass
class RowResult:
    row: str
    seed: int
    metrics: dict[str, float]


def run_row(row: str, config: RunConfig, dataset: Dataset, split: SplitAssignment,
            cache: PhaseCache) -> RowResult:
    entry = ABLATION_ROWS[row]
    ks = config.metric_ks
    if entry == "none":
        rep = evaluate(dataset, split, zero_shot_model(config, dataset, split), "none", ks)
        return RowResult(row, config.seed, rep.metrics)
    if entry == "probe":
        head = train_linear_probe(config, dataset, split)
        return RowResult(row, config.seed, probe_metrics(config, dataset, split, head, ks))
    cfg = replace(config, ablation=entry)
    model, _ = run_two_phase(cfg, dataset, split, cache)
    return RowResult(row, config.seed, evaluate(dataset, split, model, "tpg", ks).metrics)


def ablation_grid(config: RunConfig, seeds=(0, 1, 2), rows=None, log=None) -> list[RowResult]:
    rows = list(ABLATION_ROWS) if rows is None else list(rows)
    out = []
    for seed in seeds:
        cfg = replace(config, seed=seed)
        dataset, split = prepare(cfg)
        cache = PhaseCache()
        for row in rows:
            res = run_row(row, cfg, dataset, split, cache)
            if log is not None:
                log(res)
            out.append(res)
    return out


def summarize(results: list[RowResult], metric: str = "mAP@10") -> dict[str, dict]:
    table: dict[str, dict] = {}
    for r in results:
        entry = table.setdefault(r.row, {"per_seed": {}})
        entry["per_seed"][r.seed] = r.metrics[metric]
    for entry in table.values():
        entry["mean"] = float(np.mean(list(entry["per_seed"].values())))
    return table


def format_table(table: dict[str, dict], metric: str = "mAP@10") -> str:
    seeds = sorted({s for e in table.values() for s in e["per_seed"]})
    head = f"{'row':<18}" + "".join(f"seed {s:<6}" for s in seeds) + f"mean {metric}"
    lines = [head]
    for row, e in table.items():
        lines.append(f"{row:<18}" + "".join(f"{e['per_seed'][s]:<11.4f}" for s in seeds) + f"{e['mean']:.4f}")
    return "\n".join(lines)

