"""Command-line entry point: generate, train, evaluate, rank, grad-check.

Exit codes: 0 success, 1 invalid input/config/usage, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .dataset import DatasetError, Normalizer, load_manifest, save_manifest
from .loss import task_weight_schedule
from .metrics import MetricsReport, evaluate_model, rank_table, render_rank_table
from .model import init_model, load_checkpoint, save_checkpoint
from .numkernel import RngState
from .pipeline import (MODEL_SEED_KEY, ConfigError, RunConfig, load_config, make_synthetic, prepare,
                       select, train_model, write_training_log)
from .train import TrainingError, grad_check_report

log = logging.getLogger("moemos")

GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = make_synthetic(cfg)
    save_manifest(data.dataset, out / "dataset.jsonl", binary_name="embeddings.bin")
    save_manifest(data.shifted, out / "dataset_shifted.jsonl", binary_name="embeddings.bin")
    if len(data.aux):
        save_manifest(data.aux, out / "aux.jsonl", binary_name="aux_embeddings.bin")
    data.truth.save(out / "truth.jsonl")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    log.info("wrote %d target and %d auxiliary samples to %s", len(data.dataset), len(data.aux), out)
    return 0


def _report_dict(name: str, utt: MetricsReport, sysm: MetricsReport, acc: float) -> dict:
    return {"name": name, "utterance": utt.to_dict(), "system": sysm.to_dict(), "accuracy": acc,
            "n": utt.n}


def cmd_train(args) -> int:
    cfg = _config(args)
    data_dir, out = Path(args.data), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_manifest(data_dir / "dataset.jsonl", require_labels=True)
    aux = None
    if any(s.dataset_role == "aux" for s in cfg.stages):
        if not (data_dir / "aux.jsonl").exists():
            raise ConfigError(f"stage 1 uses the auxiliary set but {data_dir / 'aux.jsonl'} is missing")
        aux = load_manifest(data_dir / "aux.jsonl")
    t0 = time.perf_counter()
    prepared = prepare(dataset, cfg, aux)
    model, histories = train_model(cfg, prepared)
    elapsed = time.perf_counter() - t0

    save_checkpoint(model, out / "model.moem")
    (out / "normalizer.json").write_text(json.dumps(prepared.normalizer.to_dict()))
    (out / "splits.json").write_text(json.dumps(prepared.split_ids))
    write_training_log(histories, out / "training_log.csv")
    metrics = {}
    for split in ("val", "test"):
        metrics[split] = _report_dict(split, *evaluate_model(model, getattr(prepared, split)))
    summary = {
        "config": cfg.to_dict(),
        "stages": [{k: h.get(k) for k in ("stage", "epochs_run", "stop_reason", "best_epoch", "best_val_loss")}
                   for h in histories],
        "max_clipped_grad_norm": max((s["clipped_norm"] for h in histories for s in h["steps"]), default=0.0),
        "train_seconds": elapsed,
        "metrics": metrics,
    }
    (out / "run_summary.json").write_text(json.dumps(summary, indent=2))
    test = metrics["test"]
    print(f"test accuracy {test['accuracy']:.4f}  utterance srcc {test['utterance']['srcc']}  "
          f"system srcc {test['system']['srcc']}")
    return 0


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    model = load_checkpoint(run / "model.moem")
    norm = Normalizer.from_dict(json.loads((run / "normalizer.json").read_text()))
    dataset = load_manifest(args.manifest, require_labels=True)
    if args.split == "all":
        ids = dataset.utt_ids
    else:
        ids = json.loads((run / "splits.json").read_text())[args.split]
    data = select(dataset, ids, norm)
    utt, sysm, acc = evaluate_model(model, data)
    report = _report_dict(args.name or Path(args.manifest).stem, utt, sysm, acc)
    text = "\n\n".join(render_rank_table([(report["name"], r)]) for r in (utt, sysm))
    print(text)
    print(f"classification accuracy {acc:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    return 0


def _load_report(path: Path, level: str) -> tuple[str, MetricsReport]:
    d = json.loads(path.read_text())
    name = d.get("name", path.stem)
    if level in d:
        return name, MetricsReport.from_dict(d[level])
    if d.get("level") == level:
        return name, MetricsReport.from_dict(d)
    raise ConfigError(f"{path}: no {level}-level metrics")


def cmd_rank(args) -> int:
    levels = ("utterance", "system") if args.level == "both" else (args.level,)
    out_json = {}
    blocks = []
    for level in levels:
        entries = [_load_report(Path(p), level) for p in args.reports]
        blocks.append(render_rank_table(entries, level))
        out_json[level] = rank_table(entries)
    print("\n\n".join(blocks))
    if args.json:
        Path(args.json).write_text(json.dumps(out_json, indent=2))
    return 0


def cmd_grad_check(args) -> int:
    cfg = _config(args)
    t0 = time.perf_counter()
    data = make_synthetic(cfg)
    prepared = prepare(data.dataset, cfg)
    batch = prepared.train.subset(range(min(args.batch, len(prepared.train))))
    model = init_model(cfg.moe_config(batch.dim, len(batch.system_vocab)),
                       RngState(cfg.seed).spawn(MODEL_SEED_KEY))
    # mid-stage-2 weights exercise both task heads and the gate regularizers
    weights = cfg.loss.with_tasks(*task_weight_schedule(2, 1, 3))
    rep = grad_check_report(model, batch.embeddings, batch.mos, batch.labels, weights,
                            n_params=args.n_params, seed=cfg.seed)
    elapsed = time.perf_counter() - t0
    print(f"max relative error {rep['max_rel_error']:.3e} over {rep['n_checked']} parameters "
          f"in {len(rep['per_tensor'])} tensors ({elapsed:.1f}s)")
    if args.verbose:
        for name, err in rep["per_tensor"].items():
            print(f"  {name:<16} {err:.3e}")
    return 0 if rep["max_rel_error"] <= GRAD_TOL else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="moemos", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run the three-stage training pipeline")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--data", required=True, help="directory written by `generate`")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a trained run on a manifest")
    e.add_argument("--run", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--name")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("rank", help="leaderboard from report JSON files")
    r.add_argument("reports", nargs="+")
    r.add_argument("--level", choices=("utterance", "system", "both"), default="both")
    r.add_argument("--json")
    r.set_defaults(func=cmd_rank)

    c = sub.add_parser("grad-check", help="finite-difference gradient verification")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.add_argument("--n-params", type=int, default=200)
    c.add_argument("--batch", type=int, default=16)
    c.add_argument("--verbose", action="store_true")
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"moemos: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ValueError, FileNotFoundError) as exc:
        print(f"moemos: error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, ArithmeticError, RuntimeError) as exc:
        print(f"moemos: runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
