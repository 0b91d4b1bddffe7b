"""Two-phase training: source prompt learning, then target prompt generation.

Both phases share the optimizer, LR schedule, early stopping and checkpoint
machinery. Shuffling uses a fresh generator per (seed, phase, epoch) and the
class queues are rebuilt from the momentum path at the start of every epoch,
so a run resumed from an epoch-boundary checkpoint is bit-identical to an
uninterrupted one.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import Dataset, SplitAssignment
from .losses import LossConfig, itc_loss_batch, phase1_loss, phase2_loss, triplet_loss_batch
from .memory import ClassQueueSet
from .model import AdapterModel, ModelConfig, count_parameters
from .numerics import Tape, Tensor, TensorFormatError, TruncatedDataError
from .prompts import ConfigError
from .retrieval import validation_map
from .tpg import true_row_exclusions

CKPT_MAGIC = b"UCDC"
CKPT_VERSION = 1


class DivergenceError(ArithmeticError):
    """A loss term or gradient became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    phase: int = 1
    batch_size: int = 64
    max_epochs: int = 50
    early_stop_patience: int = 2
    lr_initial: float = 1e-3
    lr_final: float = 1e-6
    lr_decay_epochs: int = 20
    seed: int = 0
    metric_k: int = 10
    queue_capacity: int = 20

    def validate(self) -> None:
        if self.phase not in (1, 2):
            raise ConfigError(f"phase must be 1 or 2, got {self.phase}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.lr_decay_epochs < 1:
            raise ConfigError("batch_size, max_epochs and lr_decay_epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.early_stop_patience}")
        if not 0 < self.lr_final <= self.lr_initial:
            raise ConfigError(f"need 0 < lr_final <= lr_initial, got {self.lr_final}, {self.lr_initial}")
        if self.metric_k < 1 or self.queue_capacity < 1:
            raise ConfigError("metric_k and queue_capacity must be >= 1")


@dataclass(frozen=True)
class Ablation:
    """Switches for the reduced configurations; defaults give the full method."""
    use_mask: bool = True
    use_triplet: bool = True
    use_momentum: bool = True
    one_phase_mode: bool = False

    def to_json(self) -> dict:
        return asdict(self)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Geometric interpolation from ``lr_initial`` to ``lr_final``, held afterwards."""
    frac = min(epoch, config.lr_decay_epochs) / config.lr_decay_epochs
    return float(config.lr_initial * (config.lr_final / config.lr_initial) ** frac)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def optimizer_step(params, grads, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update applied in place to ``params[i].data``."""
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise nx.ShapeError(f"gradient shape {g.shape} for parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter of shape {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class EarlyStopping:
    """Stops once the monitored score fails to improve for ``patience`` epochs in a row."""

    def __init__(self, patience: int, best: float | None = None, bad_epochs: int = 0):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience, self.best, self.bad_epochs = patience, best, bad_epochs

    def update(self, score: float) -> bool:
        if self.best is None or score > self.best:
            self.best, self.bad_epochs = score, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# checkpoint


@dataclass
class Checkpoint:
    phase: int
    header: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        head = json.dumps(self.header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<III", CKPT_VERSION, self.phase, len(head)))
        buf.write(head)
        buf.write(struct.pack("<I", len(self.tensors)))
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            nx.write_tensor(buf, arr)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        buf = io.BytesIO(raw)

        def need(n, what):
            at = buf.tell()
            chunk = buf.read(n)
            if len(chunk) != n:
                raise TruncatedDataError(f"truncated checkpoint {what}", at + len(chunk))
            return chunk

        if need(4, "magic") != CKPT_MAGIC:
            raise TensorFormatError("not a checkpoint: bad magic at byte offset 0")
        version, phase, n_head = struct.unpack("<III", need(12, "header"))
        if version != CKPT_VERSION:
            raise TensorFormatError(f"unsupported checkpoint version {version}")
        header = json.loads(need(n_head, "header json").decode("utf-8"))
        (count,) = struct.unpack("<I", need(4, "section count"))
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", need(2, "section name length"))
            name = need(n, "section name").decode("utf-8")
            tensors[name] = nx.read_tensor(buf).data
        return cls(phase, header, tensors)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _bank_tensors(model: AdapterModel) -> dict[str, Tensor]:
    b = model.bank
    return {"bank.U": b.U, "bank.V": b.V, "bank.U_m": b.U_m, "bank.V_m": b.V_m,
            "bank.proj_w": b.proj_w, "bank.proj_b": b.proj_b,
            "template.domain_context": model.template.domain_context}


_TPG_NAMES = ("g_w1", "g_b1", "g_w2", "g_b2", "q_w", "q_b", "k_w", "k_b")


def model_tensors(model: AdapterModel) -> dict[str, Tensor]:
    """Every non-reproducible model tensor in checkpoint order."""
    out = _bank_tensors(model)
    if model.tpg is not None:
        out.update({f"tpg.{n}": getattr(model.tpg, n) for n in _TPG_NAMES})
        out.update({f"tpg.{n}": t for n, t in model.tpg.buffers().items()})
    return out


def build_model(header: dict) -> AdapterModel:
    m = header["model"]
    return AdapterModel(ModelConfig(**m["model"]), m["num_classes"], m["num_domains"],
                        m["seen_classes"], m["seen_domains"], seed=m["seed"])


def restore_model(ckpt: Checkpoint) -> AdapterModel:
    """Rebuild the model (frozen parts from seeds) and load stored tensors."""
    model = build_model(ckpt.header)
    if any(k.startswith("tpg.") for k in ckpt.tensors):
        model.attach_tpg()
    for name, t in model_tensors(model).items():
        if name not in ckpt.tensors:
            raise TensorFormatError(f"checkpoint is missing section {name!r}")
        arr = ckpt.tensors[name]
        if arr.shape != t.shape:
            raise TensorFormatError(f"section {name!r} has shape {arr.shape}, expected {t.shape}")
        t.data = arr.astype(t.data.dtype)
    return model


def _make_checkpoint(phase: int, model: AdapterModel, opt_names, opt: AdamState, header: dict) -> Checkpoint:
    tensors = {k: v.data.copy() for k, v in model_tensors(model).items()}
    for name, m, v in zip(opt_names, opt.m, opt.v):
        tensors[f"adam.m.{name}"] = m.copy()
        tensors[f"adam.v.{name}"] = v.copy()
    header = dict(header, format_version=CKPT_VERSION, phase=phase)
    return Checkpoint(phase, header, tensors)


# ---------------------------------------------------------------------------
# training loops


LogFn = Callable[[dict], None]


def _batches(order: np.ndarray, size: int):
    for s in range(0, len(order), size):
        yield s // size, order[s:s + size]


def _check_finite(value: Tensor, term: str, epoch: int, batch: int) -> None:
    if not np.all(np.isfinite(value.data)):
        raise DivergenceError(f"non-finite {term} loss at epoch {epoch}, batch {batch}")


def _reheat_queues(model: AdapterModel, dataset: Dataset, train_idx: np.ndarray,
                   queues: ClassQueueSet, use_momentum: bool) -> None:
    """Refill queues as if every training sample had just been pushed in index order."""
    queues.clear()
    keep = []
    for c in model.seen_classes:
        rows = train_idx[dataset.class_ids[train_idx] == c]
        keep.append(rows[-queues.capacity:])
    keep = np.sort(np.concatenate(keep))
    c_ids, d_ids = dataset.class_ids[keep], dataset.domain_ids[keep]
    with nx.no_grad():
        prompts = model.bank.select_prompts(c_ids, d_ids, use_momentum=use_momentum)
        feats = model.image_encoder.encode(Tensor(dataset.tokens[keep]), prompts)
    queues.push_batch(c_ids, feats)


class _Run:
    """Mutable per-phase state shared by both loops."""

    def __init__(self, config: TrainConfig, params, names, resume: Checkpoint | None):
        self.config = config
        self.params, self.names = params, names
        self.opt = AdamState.zeros_like(params)
        self.stopper = EarlyStopping(config.early_stop_patience)
        self.epoch, self.history, self.stopped = 0, [], False
        if resume is not None:
            st = resume.header["state"]
            for i, n in enumerate(names):
                self.opt.m[i] = resume.tensors[f"adam.m.{n}"].astype(params[i].data.dtype)
                self.opt.v[i] = resume.tensors[f"adam.v.{n}"].astype(params[i].data.dtype)
            self.opt.step = st["adam_step"]
            self.stopper.best, self.stopper.bad_epochs = st["best_score"], st["bad_epochs"]
            self.epoch, self.history, self.stopped = st["epoch"], list(st["history"]), st["stopped"]

    def state(self) -> dict:
        return {"epoch": self.epoch, "adam_step": self.opt.step, "best_score": self.stopper.best,
                "bad_epochs": self.stopper.bad_epochs, "stopped": self.stopped, "history": self.history,
                "rng": {"generator": "numpy.default_rng", "entropy": [self.config.seed, self.config.phase,
                                                                     "epoch"]}}

    def finish_epoch(self, record: dict, score: float, log: LogFn | None) -> None:
        record["val_map"] = score
        self.history.append(record)
        self.epoch += 1
        stop = self.stopper.update(score)
        record["best_val_map"] = self.stopper.best
        if stop or self.epoch >= self.config.max_epochs:
            self.stopped = True
        record["stopped"] = self.stopped
        if log is not None:
            log(dict(record))

    def step(self, lr: float) -> None:
        optimizer_step(self.params, [p.grad for p in self.params], self.opt, lr)
        for p in self.params:
            p.grad = None


def _header(model: AdapterModel, config: TrainConfig, loss: LossConfig, ablation: Ablation,
            run: _Run, params) -> dict:
    return {"model": model.describe(), "train": asdict(config), "loss": asdict(loss),
            "ablation": ablation.to_json(), "trainable_parameters": count_parameters(params),
            "state": run.state()}


def train_phase1(dataset: Dataset, split: SplitAssignment, model_config: ModelConfig = ModelConfig(),
                 config: TrainConfig = TrainConfig(), loss: LossConfig = LossConfig(),
                 ablation: Ablation = Ablation(), resume: Checkpoint | None = None,
                 log: LogFn | None = None, stop_after: int | None = None) -> tuple[AdapterModel, Checkpoint]:
    """Learn the prompt bank, projection and domain context on seen labels.

    ``stop_after`` ends the call after that many epochs (for interruption);
    passing the returned checkpoint as ``resume`` continues the same run.
    """
    config = replace(config, phase=1)
    config.validate()
    loss.validate()
    train_idx = split.indices("train")
    if len(train_idx) == 0:
        raise ConfigError("phase 1 needs a nonempty train split")
    if resume is not None:
        model = restore_model(resume)
    else:
        model = AdapterModel(model_config, len(dataset.manifest.class_names),
                             len(dataset.manifest.domain_names), split.seen_classes,
                             split.seen_domains, seed=config.seed)
        if ablation.one_phase_mode:
            model.attach_tpg().calibrate(dataset.tokens[train_idx].mean(axis=1), model.bank)
    params = model.phase1_parameters()
    names = [n for n, t in _bank_tensors(model).items() if any(t is p for p in params)]
    if model.tpg is not None:
        params = params + model.tpg.parameters()
        names = names + [f"tpg.{n}" for n in _TPG_NAMES]
    run = _Run(config, params, names, resume)
    queues = ClassQueueSet(model.seen_classes, config.queue_capacity)
    tau = loss.temperature
    mode = "tpg" if ablation.one_phase_mode else "phase1"
    done_here = 0
    while not run.stopped and (stop_after is None or done_here < stop_after):
        epoch = run.epoch
        lr = lr_at_epoch(config, epoch)
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(train_idx)
        _reheat_queues(model, dataset, np.sort(train_idx), queues, ablation.use_momentum)
        totals = {"loss": 0.0, "itc": 0.0, "triplet": 0.0}
        n_batches = 0
        for b, idx in _batches(order, config.batch_size):
            c_ids, d_ids = dataset.class_ids[idx], dataset.domain_ids[idx]
            tokens = Tensor(dataset.tokens[idx])
            targets = model.bank.class_rows(c_ids)
            with Tape():
                feats = model.image_encoder.encode(tokens, model.bank.select_prompts(c_ids, d_ids))
                texts = model.text_candidates(model.text_table(), d_ids)
                itc = itc_loss_batch(feats, texts, targets, tau)
                _check_finite(itc, "itc", epoch, b)
                with nx.no_grad():
                    m_feats = model.image_encoder.encode(
                        tokens, model.bank.select_prompts(c_ids, d_ids, use_momentum=ablation.use_momentum))
                queues.push_batch(c_ids, m_feats)
                trip = None
                if ablation.use_triplet:
                    pos, neg, w = queues.mine_batch(feats.data, c_ids, loss.pairs)
                    trip = triplet_loss_batch(feats, pos, neg, w, loss.margin)
                    _check_finite(trip, "triplet", epoch, b)
                total = phase1_loss(itc, trip)
                if model.tpg is not None:
                    tpg_feats = model.image_encoder.encode(tokens, model.tpg.generate(tokens, model.bank))
                    total = total + phase2_loss(tpg_feats, texts, targets, tau)
                _check_finite(total, "total", epoch, b)
                total.backward()
            run.step(lr)
            model.bank.momentum_update()
            totals["loss"] += total.item()
            totals["itc"] += float(itc.data.mean())
            totals["triplet"] += 0.0 if trip is None else float(trip.data.mean())
            n_batches += 1
        record = {"phase": 1, "epoch": epoch, "lr": lr, **{k: v / n_batches for k, v in totals.items()}}
        run.finish_epoch(record, validation_map(dataset, split, model, mode, config.metric_k), log)
        done_here += 1
    header = _header(model, config, loss, ablation, run, params)
    return model, _make_checkpoint(1, model, names, run.opt, header)


def domain_free_text_table(model: AdapterModel) -> np.ndarray:
    """Per-class text anchors ``(C_seen, 1, E)``: the renormalized mean over seen domains.

    Phase 2 treats the sample's domain as unknown, so its targets carry no
    domain identity.
    """
    with nx.no_grad():
        table = model.text_table().data
    mean = table.astype(np.float64).mean(axis=1, keepdims=True)
    mean /= np.linalg.norm(mean, axis=-1, keepdims=True)
    return mean.astype(table.dtype)


def train_phase2(dataset: Dataset, split: SplitAssignment, phase1: Checkpoint,
                 config: TrainConfig = TrainConfig(phase=2, batch_size=32), loss: LossConfig = LossConfig(),
                 ablation: Ablation = Ablation(), resume: Checkpoint | None = None,
                 log: LogFn | None = None, stop_after: int | None = None) -> tuple[AdapterModel, Checkpoint]:
    """Train the prompt generator over the frozen phase-1 bank with true rows masked."""
    config = replace(config, phase=2)
    config.validate()
    loss.validate()
    if phase1.phase != 1:
        raise ConfigError(f"train_phase2 needs a phase-1 checkpoint, got phase {phase1.phase}")
    train_idx = split.indices("train")
    source = resume if resume is not None else phase1
    model = restore_model(source)
    model.bank.freeze()
    model.template.domain_context.requires_grad = False
    if resume is None:
        model.attach_tpg().calibrate(dataset.tokens[train_idx].mean(axis=1), model.bank)
    params = model.tpg.parameters()
    names = [f"tpg.{n}" for n in _TPG_NAMES]
    run = _Run(config, params, names, resume)
    table = Tensor(domain_free_text_table(model))
    tau = loss.temperature
    done_here = 0
    while not run.stopped and (stop_after is None or done_here < stop_after):
        epoch = run.epoch
        lr = lr_at_epoch(config, epoch)
        order = np.random.default_rng([config.seed, 2, epoch]).permutation(train_idx)
        total_loss, n_batches = 0.0, 0
        for b, idx in _batches(order, config.batch_size):
            c_ids, d_ids = dataset.class_ids[idx], dataset.domain_ids[idx]
            tokens = Tensor(dataset.tokens[idx])
            ex_c = ex_d = None
            if ablation.use_mask:
                ex_c, ex_d = true_row_exclusions(model.bank, c_ids, d_ids)
            texts = model.text_candidates(table, d_ids)
            with Tape():
                prompts = model.tpg.generate(tokens, model.bank, ex_c, ex_d)
                feats = model.image_encoder.encode(tokens, prompts)
                total = phase2_loss(feats, texts, model.bank.class_rows(c_ids), tau)
                _check_finite(total, "phase2 itc", epoch, b)
                total.backward()
            run.step(lr)
            total_loss += total.item()
            n_batches += 1
        record = {"phase": 2, "epoch": epoch, "lr": lr, "loss": total_loss / n_batches}
        run.finish_epoch(record, validation_map(dataset, split, model, "tpg", config.metric_k), log)
        done_here += 1
    header = _header(model, config, loss, ablation, run, params)
    header["phase1_state"] = phase1.header["state"]
    header["phase1_train"] = phase1.header["train"]
    header["phase1_ablation"] = phase1.header["ablation"]
    return model, _make_checkpoint(2, model, names, run.opt, header)
