"""Command line entry points: gen-synth, train, eval, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure
(NaN/Inf loss), 5 file-system error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, load_config
from .evalkit import EvalReport, LMPredictor, TaskSetMismatch, difficulty_table, evaluate, render_table
from .gradcore import CheckpointError, load_checkpoint
from .hypernet import HyperNetwork
from .metatrain import NumericError, Trainer, prepare_tasks, validation_loss
from .seq2seq import Seq2SeqLM
from .synth import HELD_OUT_CATEGORIES, synth_suite
from .taskdata import (ConfigurationError, DataError, InstructionConfig, SplitSpec, Splits, english_only,
                       load_task_dir, make_splits, prefilter_instances, save_niv2, select_instances)
from .tokenizer import ByteTokenizer

OUTPUT_ENV = "METAINSTRUCT_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5

log = logging.getLogger("metainstruct")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- gen-synth ---------------------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    out = Path(args.out_dir)
    tasks = synth_suite(args.seed, args.tasks, args.instances, min_len=args.min_len, max_len=args.max_len)
    task_dir = out / "tasks"
    try:
        task_dir.mkdir(parents=True, exist_ok=True)
        for old in task_dir.glob("*.json"):
            old.unlink()
        for t in tasks:
            save_niv2(t, task_dir)
        spec = SplitSpec(strong_categories=HELD_OUT_CATEGORIES, weak_task_fraction=args.weak_fraction,
                         seed=args.seed)
        splits = make_splits(tasks, spec)
        splits.write(out / "splits.jsonl")
        (out / "run.ini").write_text(
            "[train]\nmethod = standard\nseed = {}\n\n[data]\ntasks = tasks\nsplits = splits.jsonl\n"
            "strong_categories = {}\n".format(args.seed, ", ".join(HELD_OUT_CATEGORIES)), encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write synthetic suite to {out}: {e}") from e
    print(f"wrote {len(tasks)} tasks to {task_dir}; splits: {len(splits.train_tasks)} train, "
          f"{len(splits.weak_eval_tasks)} weak eval, {len(splits.strong_eval_tasks)} strong eval")
    return EXIT_OK


# -- shared data loading -----------------------------------------------------------------------

def load_tasks(cfg: RunConfig, tokenizer: ByteTokenizer):
    if not cfg.data.tasks:
        raise ConfigurationError("data.tasks is not set")
    if not Path(cfg.data.tasks).is_dir():
        raise DataError(f"task directory not found: {cfg.data.tasks}")
    tasks = load_task_dir(cfg.data.tasks)
    if cfg.data.english_only:
        tasks = english_only(tasks)
    tasks = prefilter_instances(tasks, tokenizer, enc_limit=cfg.model.max_encoder_positions,
                                dec_limit=cfg.model.max_decoder_positions)
    if cfg.data.splits:
        if not Path(cfg.data.splits).is_file():
            raise DataError(f"split manifest not found: {cfg.data.splits}")
        splits = Splits.read(cfg.data.splits)
    else:
        splits = make_splits(tasks, SplitSpec(strong_categories=cfg.data.strong_categories,
                                              weak_task_fraction=cfg.data.weak_task_fraction,
                                              train_pool=cfg.data.train_pool, seed=cfg.data.split_seed))
    return {t.id: t for t in tasks}, splits


def data_fingerprint(by_id, splits: Splits, cfg: RunConfig) -> dict:
    h = hashlib.sha256()
    for tid in sorted(by_id):
        h.update(tid.encode())
        for inst in by_id[tid].instances:
            h.update(inst.id.encode())
            h.update(_sha(inst.input + "\x00" + "\x01".join(inst.references)).encode())
    return {"train_tasks": splits.train_tasks, "weak_eval_tasks": splits.weak_eval_tasks,
            "strong_eval_tasks": splits.strong_eval_tasks, "split_seed": splits.seed,
            "train_seed": cfg.train.seed, "content_sha256": h.hexdigest()}


def build_models(cfg: RunConfig):
    tok = ByteTokenizer()
    model = Seq2SeqLM(cfg.model, tokenizer=tok)
    hnet = HyperNetwork(cfg.model, cfg.hnet, tokenizer=tok) if cfg.needs_hnet() else None
    return tok, model, hnet


# -- train -------------------------------------------------------------------------------------

def _task_subset(by_id, splits: Splits, ids, part: str, cfg: RunConfig):
    present = [i for i in ids if i in by_id]
    return prepare_tasks([by_id[i] for i in present], cfg.train,
                         {i: splits.instances.get(i, {}).get(part, []) for i in present})


def _latest_checkpoint(ckpt_dir: Path) -> Path | None:
    stems = sorted(ckpt_dir.glob("epoch_*.ckpt"))
    stems = [s for s in stems if not s.name.endswith(".opt.ckpt")]
    return stems[-1] if stems else None


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    snapshot = dump_config(cfg)
    run_id = f"{cfg.train.method}_s{cfg.train.seed}_{_sha(snapshot)[:10]}"
    out = Path(args.out_dir) if args.out_dir else output_root() / run_id
    ckpt_dir = out / "checkpoints"
    try:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create run directory {out}: {e}") from e
    (out / "config.ini").write_text(snapshot, encoding="utf-8")

    tok, model, hnet = build_models(cfg)
    by_id, splits = load_tasks(cfg, tok)
    train = _task_subset(by_id, splits, splits.train_tasks, "train", cfg)
    train = [t for t in train if t.instances]
    if not train:
        raise DataError("no training instances left after filtering and splitting")
    val = [t for t in _task_subset(by_id, splits, splits.weak_eval_tasks, "val", cfg) if t.instances]

    rng = np.random.default_rng(cfg.train.seed)
    params = model.init_params(rng)
    if hnet is not None:
        params = params.merged(hnet.init_params(rng))
    metrics = out / "metrics.jsonl"
    trainer = Trainer(model, params, train, cfg.train, hnet=hnet, log_path=None)

    if args.resume:
        stem = _latest_checkpoint(ckpt_dir)
        if stem is None:
            raise DataError(f"--resume: no checkpoint in {ckpt_dir}")
        trainer.resume(stem)
        kept = []
        if metrics.exists():
            for line in metrics.read_text(encoding="utf-8").splitlines():
                r = json.loads(line)
                if r.get("epoch", 0) < trainer.state.epoch:
                    kept.append(line)
        metrics.write_text("".join(k + "\n" for k in kept), encoding="utf-8")
        print(f"resumed from {stem} at epoch {trainer.state.epoch}, step {trainer.state.global_step}")
    elif metrics.exists():
        metrics.unlink()
    trainer.log_path = metrics

    def on_epoch(tr: Trainer) -> None:
        done = tr.state.epoch - 1
        losses = [r["loss"] for r in tr.history if r["epoch"] == done]
        rec = {"type": "epoch", "epoch": done, "global_step": tr.state.global_step,
               "train_loss": float(np.mean(losses))}
        if val:
            rec["val_loss"] = validation_loss(model, params, val, hnet)
        with open(metrics, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec) + "\n")
        print(f"epoch {tr.state.epoch}/{cfg.train.epochs} step {tr.state.global_step} "
              f"loss {rec['train_loss']:.4f}" + (f" val {rec['val_loss']:.4f}" if val else ""), flush=True)

    target = cfg.train.epochs if args.stop_after is None else min(cfg.train.epochs, args.stop_after)
    try:
        trainer.train(epochs=target, checkpoint_dir=ckpt_dir, on_epoch=on_epoch)
    except NumericError as e:
        print(f"numeric failure at step {trainer.state.global_step} (epoch {trainer.state.epoch}): {e}",
              file=sys.stderr)
        return EXIT_NUMERIC

    checkpoints = sorted(str(p) for p in ckpt_dir.glob("epoch_*.ckpt") if not p.name.endswith(".opt.ckpt"))
    manifest = {
        "run_id": run_id,
        "config": snapshot,
        "data": data_fingerprint(by_id, splits, cfg),
        "checkpoints": checkpoints,
        "final_checkpoint": checkpoints[-1] if checkpoints else None,
        "metric_log": str(metrics),
        "completed_epochs": trainer.state.epoch,
        "global_step": trainer.state.global_step,
    }
    _write_json(out / "manifest.json", manifest)
    print(f"run {run_id}: {trainer.state.epoch} epochs, manifest {out / 'manifest.json'}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------------------------

def _find_config(checkpoint: Path) -> Path:
    for d in (checkpoint.parent, checkpoint.parent.parent):
        if (d / "config.ini").is_file():
            return d / "config.ini"
    raise ConfigurationError(f"no config.ini next to {checkpoint}; pass --config")


def cmd_eval(args) -> int:
    try:
        variant = InstructionConfig.parse(args.instruction_config)
    except ValueError as e:
        raise ConfigurationError(str(e)) from e
    checkpoint = Path(args.checkpoint)
    if not checkpoint.is_file():
        raise DataError(f"checkpoint not found: {checkpoint}")
    cfg = load_config(args.config or _find_config(checkpoint))
    if args.tasks:
        cfg.data = replace(cfg.data, tasks=str(Path(args.tasks).resolve()),
                           splits=str(Path(args.splits).resolve()) if args.splits else "")
    params = load_checkpoint(checkpoint, trainable=False)
    has_hnet = any(n.startswith("hnet.") for n in params)
    if has_hnet != cfg.needs_hnet():
        raise ConfigurationError(f"checkpoint {'has' if has_hnet else 'lacks'} hypernetwork parameters "
                                 f"but the config method is {cfg.train.method}")
    tok, model, hnet = build_models(cfg)
    by_id, splits = load_tasks(cfg, tok)

    if args.split == "all":
        tasks = [by_id[i] for i in sorted(by_id)]
    elif args.split == "train":
        tasks = [replace(by_id[i], instances=select_instances(by_id[i], splits.instances[i]["eval"]))
                 for i in splits.train_tasks if i in by_id]
    else:
        ids = splits.strong_eval_tasks if args.split == "strong_eval" else splits.weak_eval_tasks
        tasks = [by_id[i] for i in ids if i in by_id]
    if not tasks:
        raise DataError(f"no tasks in split {args.split}")

    predictor = LMPredictor(model, params, hnet=hnet)
    report = evaluate(predictor, tasks, variant, cap=args.cap, method=cfg.train.method)
    out = Path(args.out) if args.out else checkpoint.with_name(
        f"{checkpoint.stem}.eval.{args.split}.{variant.value}.jsonl")
    report.write(out, dump_instances=args.dump_instances)
    print(f"{len(report.tasks)} tasks, mean ROUGE-2F {report.mean_rouge2:.4f}, "
          f"ROUGE-L {report.mean_rougeL:.4f} -> {out}")
    return EXIT_OK


# -- report ------------------------------------------------------------------------------------

def cmd_report(args) -> int:
    baseline = EvalReport.read(args.baseline)
    names = args.names or [Path(p).stem for p in args.compare]
    if len(names) != len(args.compare):
        raise ConfigurationError("--names must match --compare one to one")
    compares = {n: EvalReport.read(p) for n, p in zip(names, args.compare)}
    rows = difficulty_table(baseline, compares)
    text = render_table(rows)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        Path(args.out).with_suffix(".jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows),
                                                        encoding="utf-8")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metainstruct", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic task suite and its split manifest")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tasks", type=int, default=8)
    g.add_argument("--instances", type=int, default=100)
    g.add_argument("--min-len", type=int, default=4)
    g.add_argument("--max-len", type=int, default=12)
    g.add_argument("--weak-fraction", type=float, default=0.0)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train one method from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", help=f"run directory (default ${OUTPUT_ENV}/<run id>)")
    t.add_argument("--resume", action="store_true", help="continue from the latest epoch checkpoint")
    t.add_argument("--stop-after", type=int, help="stop after this many completed epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="zero-shot evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="run config (default: config.ini next to the checkpoint)")
    e.add_argument("--tasks", help="task directory overriding the config's data.tasks")
    e.add_argument("--splits", help="split manifest to use with --tasks")
    e.add_argument("--split", default="strong_eval", choices=("strong_eval", "weak_eval", "train", "all"))
    e.add_argument("--instruction-config", default="desc_posex")
    e.add_argument("--cap", type=int, default=100)
    e.add_argument("--out")
    e.add_argument("--dump-instances")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="difficulty-binned percent-change table")
    r.add_argument("--baseline", required=True)
    r.add_argument("--compare", nargs="+", required=True)
    r.add_argument("--names", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TaskSetMismatch, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
