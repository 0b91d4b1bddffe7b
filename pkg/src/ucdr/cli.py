"""Command-line entry point: gen-data, train, eval, retrieve, grad-check.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration, 3 I/O
failure. Failures print one line ``error: <category>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import RunConfig
from .data import Dataset, ProtocolError, build_dataset, load_dataset, load_splits, make_splits, save_dataset, save_splits
from .experiment import ablation_grid, format_table, summarize, zero_shot_model
from .gradcheck import SCOPES, run_suite
from .model import EMBED_MODES
from .prompts import ConfigError
from .retrieval import embed_set, evaluate, retrieve, sha256_bytes
from .train import Checkpoint, restore_model, train_phase1, train_phase2

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig().validate()
    cfg = cfg.with_env_seed()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg.validate()


def _echo(cfg: RunConfig) -> dict:
    out = cfg.to_json()
    out["seed"] = cfg.seed
    return out


def _load_data(data_dir):
    dataset = Dataset(*load_dataset(data_dir))
    split = load_splits(Path(data_dir) / "splits.json")
    return dataset, split


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    ds = build_dataset(cfg.generator_config())
    s = cfg.split
    split = make_splits(ds.manifest, ds.samples, s.protocol, s.holdout_domain, s.holdout_class_fraction,
                        s.gallery_mode, s.heldout_sample_fraction)
    out = Path(args.out)
    save_dataset(out, ds.manifest, ds.samples)
    save_splits(out / "splits.json", split)
    (out / "config.json").write_text(json.dumps(_echo(cfg), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps({"samples": len(ds.samples), "out": str(out)}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset, split = _load_data(args.data)
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None

    def log(record):
        line = json.dumps(record, sort_keys=True)
        print(line, flush=True)
        if log_fh:
            log_fh.write(line + "\n")

    try:
        resume = Checkpoint.load(args.resume) if args.resume else None
        if args.phase == 1:
            _, ckpt = train_phase1(dataset, split, cfg.model_config(), cfg.train_config(1), cfg.loss_config(),
                                   cfg.train_ablation(), resume=resume, log=log, stop_after=args.stop_after)
        else:
            if not args.phase1_ckpt:
                raise ConfigError("train --phase 2 needs --phase1-ckpt")
            p1 = Checkpoint.load(args.phase1_ckpt)
            _, ckpt = train_phase2(dataset, split, p1, cfg.train_config(2), cfg.loss_config(),
                                   cfg.train_ablation(), resume=resume, log=log, stop_after=args.stop_after)
        ckpt.header["config"] = _echo(cfg)
        ckpt.save(args.out)
    finally:
        if log_fh:
            log_fh.close()
    print(json.dumps({"checkpoint": str(args.out), "phase": ckpt.phase,
                      "trainable_parameters": ckpt.header["trainable_parameters"],
                      "epochs": ckpt.header["state"]["epoch"]}, sort_keys=True))
    return EXIT_OK


def _model_for(args, cfg, dataset, split):
    if args.ckpt:
        raw = Path(args.ckpt).read_bytes()
        return restore_model(Checkpoint.from_bytes(raw)), sha256_bytes(raw)
    if args.mode != "none":
        raise ConfigError(f"--mode {args.mode} needs --ckpt")
    return zero_shot_model(cfg, dataset, split), None


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.ablate:
        seeds = tuple(args.seeds) if args.seeds else (cfg.seed,)
        results = ablation_grid(cfg, seeds=seeds, log=lambda r: print(
            json.dumps({"row": r.row, "seed": r.seed, **r.metrics}, sort_keys=True), flush=True))
        table = {m: summarize(results, m) for m in results[0].metrics}
        (out / "ablation.json").write_text(json.dumps({"config": _echo(cfg), "seeds": list(seeds),
                                                        "table": table}, indent=1, sort_keys=True) + "\n",
                                           encoding="utf-8")
        print(format_table(summarize(results, f"mAP@{cfg.metric_ks[0]}"), f"mAP@{cfg.metric_ks[0]}"))
        return EXIT_OK
    dataset, split = _load_data(args.data)
    if args.gallery_mode and args.gallery_mode != split.gallery_mode:
        split = make_splits(dataset.manifest, dataset.samples, split.protocol, split.holdout_domain,
                            cfg.split.holdout_class_fraction, args.gallery_mode, cfg.split.heldout_sample_fraction)
    model, digest = _model_for(args, cfg, dataset, split)
    report = evaluate(dataset, split, model, args.mode, cfg.metric_ks, config=_echo(cfg),
                      checkpoint_sha256=digest, workers=args.workers)
    report.save(out / "report.json")
    if args.rankings:
        report.write_rankings_csv(out / "rankings.csv")
    if args.embeddings:
        idx = np.concatenate([split.indices("test-query"), split.indices("test-gallery")])
        with open(out / "embeddings.bin", "wb") as fh:
            nx.write_tensor(fh, embed_set(model, dataset, idx, args.mode, args.workers))
    print(json.dumps(report.metrics, sort_keys=True))
    return EXIT_OK


def cmd_retrieve(args) -> int:
    cfg = _load_config(args)
    dataset, split = _load_data(args.data)
    model, _ = _model_for(args, cfg, dataset, split)
    ids = [int(x) for x in args.query_ids.split(",") if x.strip()]
    if not ids:
        raise ConfigError("--query-ids is empty")
    if max(ids) >= len(dataset.samples) or min(ids) < 0:
        raise ConfigError(f"query ids must lie in [0, {len(dataset.samples)})")
    gallery = split.indices(args.gallery_tag)
    q_emb = embed_set(model, dataset, ids, args.mode, args.workers)
    g_emb = embed_set(model, dataset, gallery, args.mode, args.workers)
    rankings, dists = retrieve(q_emb, g_emb)
    for qid, order, d in zip(ids, rankings, dists):
        top = [{"gallery_id": int(gallery[j]), "distance": float(x)} for j, x in zip(order[: args.k], d[: args.k])]
        print(json.dumps({"query_id": qid, "ranked": top}, sort_keys=True))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results, seconds = run_suite(args.scope, seeds=tuple(range(args.seeds)), points=args.points)
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    ok = all(r.passed for r in results)
    for name, err in worst.items():
        print(f"{name:<16} worst relative error {err:.3e} {'PASS' if err < 1e-5 else 'FAIL'}")
    print(json.dumps({"passed": ok, "checks": len(results), "seconds": round(seconds, 2)}, sort_keys=True))
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ucdr", description="Prompt-adapted cross-domain retrieval at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="run configuration JSON (defaults used when omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed (the UCDR_SEED variable also does)")
        sp.add_argument("--workers", type=int, default=1,
                        help="threads for embedding; results are identical for any value (default 1)")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory written by gen-data")

    g = sub.add_parser("gen-data", help="generate the synthetic dataset and its split file")
    common(g, data=False)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run phase 1 or phase 2 training")
    common(t)
    t.add_argument("--phase", type=int, choices=(1, 2), required=True)
    t.add_argument("--out", required=True, help="checkpoint path to write")
    t.add_argument("--phase1-ckpt", help="phase-1 checkpoint (required for --phase 2)")
    t.add_argument("--resume", help="checkpoint of an interrupted run of the same phase")
    t.add_argument("--stop-after", type=int, help="end after this many epochs (resumable)")
    t.add_argument("--log", help="also write the per-epoch JSON log to this file")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate retrieval, or run the ablation grid with --ablate")
    common(e, data=False)
    e.add_argument("--data", help="dataset directory written by gen-data (not used with --ablate)")
    e.add_argument("--ckpt", help="checkpoint to evaluate (not needed for --mode none)")
    e.add_argument("--mode", choices=EMBED_MODES, default="tpg", help="prompt source for embeddings")
    e.add_argument("--out", required=True, help="output directory for report.json and extras")
    e.add_argument("--gallery-mode", choices=("unseen_only", "seen_plus_unseen"),
                   help="re-split with this gallery composition")
    e.add_argument("--rankings", action="store_true", help="also write rankings.csv")
    e.add_argument("--embeddings", action="store_true", help="also write embeddings.bin (test query then gallery)")
    e.add_argument("--ablate", action="store_true", help="run the ablation grid and write ablation.json")
    e.add_argument("--seeds", type=int, nargs="+", help="seeds for --ablate (default: the config seed)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("retrieve", help="print ranked gallery items for given query sample ids")
    common(r)
    r.add_argument("--ckpt", help="checkpoint (not needed for --mode none)")
    r.add_argument("--mode", choices=EMBED_MODES, default="tpg")
    r.add_argument("--query-ids", required=True, help="comma-separated sample ids")
    r.add_argument("--k", type=int, default=10, help="number of results per query")
    r.add_argument("--gallery-tag", default="test-gallery", choices=("test-gallery", "validation-gallery"))
    r.set_defaults(func=cmd_retrieve)

    c = sub.add_parser("grad-check", help="finite-difference gradient suite")
    c.add_argument("--scope", choices=sorted(SCOPES), default="all")
    c.add_argument("--seeds", type=int, default=3, help="number of seeds")
    c.add_argument("--points", type=int, default=5, help="random points per seed")
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("error: config: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to one exit code
        category, code = _classify(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {category}: {message}", file=sys.stderr)
        return code


def _classify(exc: Exception) -> tuple[str, int]:
    if isinstance(exc, (ConfigError, ProtocolError, nx.ShapeError)):
        return "config", EXIT_CONFIG
    if isinstance(exc, (OSError, nx.TensorFormatError, json.JSONDecodeError)):
        return "io", EXIT_IO
    return "runtime", EXIT_RUNTIME

if __name__ == "__main__":
    sys.exit(main())
