"""Command-line entry point: ``compose-retrieval <subcommand> [options]``.

Every subcommand writes into one run directory (``--out``, or a fresh
directory under ``$COMPOSE_RETRIEVAL_RUNS``, default ``./runs``) and leaves the
fully resolved config there as ``config.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig
from .data import (
    TripletFormat,
    TripletFormatError,
    ingest_triplet_file,
    read_world,
    write_gallery,
    write_triplets,
)
from .evaluation import evaluate, mask_alignment_report
from .experiments import (
    ABLATION_ROWS,
    SyntheticData,
    build_data,
    dump_reports,
    format_table,
    run_ablation_matrix,
    seeded,
    summarize,
)
from .training import (
    CheckpointError,
    TrainingDivergedError,
    TripletDataset,
    load_checkpoint,
    run_training,
    save_checkpoint,
)

RUNS_ENV = "COMPOSE_RETRIEVAL_RUNS"


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    cfg = cfg.with_overrides(args.set or [])
    if getattr(args, "seed", None) is not None:
        cfg = seeded(cfg, args.seed)
    return cfg.resolve()


def _outdir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(RUNS_ENV, "runs")) / f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_data(cfg: ExperimentConfig, data: SyntheticData, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    write_gallery(data.world, directory)
    write_triplets(directory / "train.jsonl", data.train, data.world.ids)
    write_triplets(directory / "eval.jsonl", data.test, data.world.ids)


def _read_data(directory: Path) -> SyntheticData:
    world = read_world(directory / "gallery.json")
    fmt = TripletFormat(tuple(world.ids), world.spec.text_dim)
    return SyntheticData(
        world, ingest_triplet_file(directory / "train.jsonl", fmt), ingest_triplet_file(directory / "eval.jsonl", fmt)
    )


def _load_data(args, cfg: ExperimentConfig) -> SyntheticData:
    return _read_data(Path(args.data)) if args.data else build_data(cfg)


def cmd_generate_data(args) -> int:
    cfg = _config(args)
    out = _outdir(args)
    data = build_data(cfg)
    _write_data(cfg, data, out)
    cfg.to_json(out / "config.json")
    print(f"wrote gallery of {data.world.size}, {len(data.train)} train and {len(data.test)} eval triplets to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _outdir(args)
    cfg.to_json(out / "config.json")
    data = _load_data(args, cfg)
    with open(out / "train_log.jsonl", "w") as fh:
        state = run_training(
            cfg,
            TripletDataset(data.train, data.world.payloads),
            out / "checkpoints",
            log_sink=lambda rec: fh.write(rec.to_json() + "\n"),
        )
    if not (out / "checkpoints" / "last.pt").exists():  # zero epochs: keep the initialized model
        save_checkpoint(state, out / "checkpoints" / "last.pt")
    report = evaluate(state.model, data.test, data.world.payloads, cfg.eval.ks, cfg.eval.subset_ks, cfg.eval.protocol)
    (out / "report.txt").write_text(report.to_text() + "\n")
    (out / "report.json").write_text(report.to_json() + "\n")
    print(report.to_text())
    return 0


def cmd_evaluate(args) -> int:
    state = load_checkpoint(args.checkpoint, evaluate_only=True)
    cfg = state.config.with_overrides(args.set or []).resolve()
    out = _outdir(args)
    cfg.to_json(out / "config.json")
    data = _load_data(args, cfg)
    report = evaluate(state.model, data.test, data.world.payloads, cfg.eval.ks, cfg.eval.subset_ks, cfg.eval.protocol)
    (out / "report.txt").write_text(report.to_text() + "\n")
    (out / "report.json").write_text(report.to_json() + "\n")
    print(report.to_text())
    return 0


def cmd_inspect_masks(args) -> int:
    state = load_checkpoint(args.checkpoint)
    cfg = state.config.with_overrides(args.set or []).resolve()
    out = _outdir(args)
    cfg.to_json(out / "config.json")
    data = _load_data(args, cfg)
    queries = data.test
    if any(t.changes is None for t in queries):
        raise ConfigError("mask inspection needs synthetic change annotations")
    dtype = next(state.model.parameters()).dtype
    gallery = torch.as_tensor(data.world.payloads, dtype=dtype)
    ref = gallery[[t.reference_id for t in queries]]
    tgt = gallery[[t.target_id for t in queries]]
    text = torch.as_tensor(np.stack([t.text for t in queries]), dtype=dtype)
    state.model.eval()
    student, teacher = state.model.masks(ref, text, tgt)
    A = cfg.world.num_latent_attributes
    changed = np.zeros((len(queries), A), dtype=bool)
    for i, t in enumerate(queries):
        for a, _ in t.changes:
            changed[i, a] = True
    with open(out / "masks.jsonl", "w") as fh:
        for i, t in enumerate(queries):
            fh.write(
                json.dumps(
                    {
                        "query": i,
                        "reference_id": data.world.ids[t.reference_id],
                        "target_id": data.world.ids[t.target_id],
                        "changed_attributes": [a for a, _ in t.changes],
                        "student_keep": student.keep[i].tolist(),
                        "student_replace": student.replace[i].tolist(),
                        "teacher_keep": teacher.keep[i].tolist(),
                        "teacher_replace": teacher.replace[i].tolist(),
                    }
                )
                + "\n"
            )
    summary = {}
    for name, masks in (("teacher", teacher), ("student", student)):
        rep = mask_alignment_report(masks.replace.numpy(), changed)
        summary[name] = {"score": rep.score, "assignment": {str(a): k for a, k in rep.assignment.items()}}
    (out / "alignment.json").write_text(json.dumps(summary, indent=2) + "\n")
    for name, s in summary.items():
        print(f"{name} replace-mask alignment = {s['score']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _outdir(args)
    cfg.to_json(out / "config.json")
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = args.rows.split(",") if args.rows else list(ABLATION_ROWS)
    unknown = set(rows) - set(ABLATION_ROWS)
    if unknown:
        raise ConfigError(f"unknown ablation rows {sorted(unknown)}; choose from {list(ABLATION_ROWS)}")
    results = run_ablation_matrix(cfg, seeds, rows)
    table = summarize(results)
    text = format_table(table)
    (out / "ablation.txt").write_text(text + "\n")
    (out / "ablation.json").write_text(json.dumps(table, indent=2) + "\n")
    dump_reports(out / "reports.json", results)
    print(text)
    return 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "inspect-masks": cmd_inspect_masks,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compose-retrieval", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, checkpoint=False, data=False):
        p.add_argument("--config", help="experiment config (JSON); built-in defaults when omitted")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. train.epochs=3 (repeatable)")
        p.add_argument("--out", help="run directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        else:
            p.add_argument("--seed", type=int, help="derive every model/optimizer seed from this value")
        if data:
            p.add_argument("--data", help="directory written by generate-data (regenerated from config when omitted)")
        return p

    common(sub.add_parser("generate-data", help="write a synthetic gallery and triplet files"))
    common(sub.add_parser("train", help="train and evaluate one model"), data=True)
    common(sub.add_parser("evaluate", help="evaluate a checkpoint"), checkpoint=True, data=True)
    common(sub.add_parser("inspect-masks", help="dump keep/replace masks and their alignment"), checkpoint=True, data=True)
    p = common(sub.add_parser("ablate", help="train the ablation matrix and print a comparison table"))
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--rows", help=f"comma-separated subset of {','.join(ABLATION_ROWS)}")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, TripletFormatError, CheckpointError, TrainingDivergedError, OSError, ValueError) as exc:
        print(f"compose-retrieval {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
