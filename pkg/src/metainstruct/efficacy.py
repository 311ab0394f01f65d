"""Desk-scale zero-shot experiment on the synthetic suite.

Trains every method with and without full instructions on the single-action
tasks and scores greedy predictions on the held-out composition tasks.
"""

from __future__ import annotations

import argparse
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .evalkit import LMPredictor, evaluate
from .hypernet import HNetConfig, HyperNetwork
from .metatrain import METHODS, Trainer, TrainConfig, prepare_tasks
from .seq2seq import ModelConfig, Seq2SeqLM
from .synth import HELD_OUT_CATEGORIES, synth_suite
from .taskdata import SplitSpec, make_splits, prefilter_instances
from .tokenizer import ByteTokenizer


@dataclass
class EfficacySetup:
    n_tasks: int = 8
    instances_per_task: int = 125
    min_len: int = 4
    max_len: int = 8
    eval_cap: int = 100
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ff_dim: int = 128
    max_encoder_positions: int = 192
    max_decoder_positions: int = 48
    hnet_hidden: int = 128
    lr: float = 1e-3
    epochs: int = 20
    hnet_maml_epochs: int = 10
    batch_size: int = 5
    encoder_positions: str = "segment"
    alternation_period: int = 10
    variants: tuple = ("desc_posex", "none")
    methods: tuple = METHODS

    def model_config(self) -> ModelConfig:
        return ModelConfig(vocab_size=ByteTokenizer().vocab_size, d_model=self.d_model, n_heads=self.n_heads,
                           n_encoder_layers=self.n_layers, n_decoder_layers=self.n_layers, ff_dim=self.ff_dim,
                           max_encoder_positions=self.max_encoder_positions,
                           max_decoder_positions=self.max_decoder_positions,
                           encoder_positions=self.encoder_positions)


@dataclass
class RunResult:
    method: str
    variant: str
    seed: int
    heldout_rouge2: float
    heldout_rougeL: float
    per_task: dict = field(default_factory=dict)
    final_loss: float = float("nan")
    seconds: float = 0.0


def run_one(method: str, variant: str, seed: int, setup: EfficacySetup) -> RunResult:
    t0 = time.time()
    mcfg = setup.model_config()
    tasks = synth_suite(seed, setup.n_tasks, setup.instances_per_task, min_len=setup.min_len,
                        max_len=setup.max_len)
    tasks = prefilter_instances(tasks, enc_limit=mcfg.max_encoder_positions, dec_limit=mcfg.max_decoder_positions)
    splits = make_splits(tasks, SplitSpec(strong_categories=HELD_OUT_CATEGORIES, weak_task_fraction=0.0,
                                          seed=seed))
    by_id = {t.id: t for t in tasks}
    tcfg = TrainConfig(method=method, outer_lr=setup.lr, seed=seed, batch_size=setup.batch_size,
                       inner_batch=setup.batch_size,
                       alternation_period=setup.alternation_period, instruction_config=variant,
                       epochs=setup.hnet_maml_epochs if method == "hnet_maml" else setup.epochs)
    train = prepare_tasks([by_id[i] for i in splits.train_tasks], tcfg,
                          {i: splits.instances[i]["train"] for i in splits.train_tasks})

    rng = np.random.default_rng(seed)
    model = Seq2SeqLM(mcfg)
    params = model.init_params(rng)
    hnet = None
    if method in ("hnet", "hnet_maml"):
        hnet = HyperNetwork(mcfg, HNetConfig(hidden_dim=setup.hnet_hidden))
        params = params.merged(hnet.init_params(rng))
    trainer = Trainer(model, params, train, tcfg, hnet=hnet)
    history = trainer.train()

    predictor = LMPredictor(model, params, hnet=hnet)
    report = evaluate(predictor, [by_id[i] for i in splits.strong_eval_tasks], variant, cap=setup.eval_cap,
                      method=method)
    tail = [r["loss"] for r in history[-20:]]
    return RunResult(method, variant, seed, report.mean_rouge2, report.mean_rougeL,
                     {t.task: t.rouge2_f for t in report.tasks}, float(np.mean(tail)), time.time() - t0)


def verdict(results: list[RunResult], seeds) -> dict:
    """(a) instructions beat None per method (mean over seeds);
    (b) hnet and hnet_maml beat standard with instructions on a majority of seeds."""
    score = {(r.method, r.variant, r.seed): r.heldout_rouge2 for r in results}
    methods = sorted({r.method for r in results})
    a = {}
    for m in methods:
        with_i = np.mean([score[(m, "desc_posex", s)] for s in seeds])
        without = np.mean([score[(m, "none", s)] for s in seeds])
        a[m] = {"desc_posex": float(with_i), "none": float(without), "pass": bool(with_i > without)}
    b = {}
    for m in ("hnet", "hnet_maml"):
        if m not in methods or "standard" not in methods:
            continue
        wins = [score[(m, "desc_posex", s)] > score[("standard", "desc_posex", s)] for s in seeds]
        b[m] = {"wins": int(sum(wins)), "seeds": len(seeds), "pass": sum(wins) * 2 > len(seeds)}
    return {"a": a, "b": b, "pass": all(v["pass"] for v in a.values()) and all(v["pass"] for v in b.values())}


def run_efficacy(seeds=(0, 1, 2), setup: EfficacySetup | None = None, log=print) -> tuple[list[RunResult], dict]:
    setup = setup or EfficacySetup()
    results = []
    for seed in seeds:
        for method in setup.methods:
            for variant in setup.variants:
                r = run_one(method, variant, seed, setup)
                log(f"seed={seed} method={method:<9} variant={variant:<10} heldout_rouge2={r.heldout_rouge2:.4f} "
                    f"rougeL={r.heldout_rougeL:.4f} loss={r.final_loss:.3f} ({r.seconds:.0f}s)")
                results.append(r)
    return results, verdict(results, seeds)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--methods", nargs="+", default=list(METHODS))
    ap.add_argument("--variants", nargs="+", default=["desc_posex", "none"])
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)
    setup = EfficacySetup(methods=tuple(args.methods), variants=tuple(args.variants))
    if args.epochs:
        setup.epochs = args.epochs
        setup.hnet_maml_epochs = max(1, args.epochs // 2)
    results, v = run_efficacy(tuple(args.seeds), setup)
    print(json.dumps(v, indent=1))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"setup": asdict(setup), "results": [asdict(r) for r in results], "verdict": v}, fh, indent=1)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
