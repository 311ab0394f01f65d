"""Standard multi-task training, first-order MAML, HNet and HNet-MAML.

Parameter groups are distinguished by name prefix: ``main.`` for the main LM
and ``hnet.`` for the hypernetwork (its LM and feed-forward heads). Freezing
a group flips the registry's trainable flags, so the optimizer never touches
it and the tape never records gradients for it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .gradcore import (ContractError, OptimizerState, ParamRegistry, adam, load_arrays, no_grad,
                       optimizer_step, save_checkpoint, sgd)
from .gradcore.tensor import Tensor
from .hypernet import HyperNetwork
from .seq2seq import Batch, Seq2SeqLM, make_batch
from .taskdata import (ConfigurationError, Instance, InstructionConfig, TaskSpec, build_decoder_prefix,
                       build_encoder_text, compose_instruction, input_start, sample_train_instances)

METHODS = ("standard", "maml", "hnet", "hnet_maml")
MAIN, HNET = "main.", "hnet."


class NumericError(FloatingPointError):
    """Loss became NaN or infinite."""


@dataclass
class TrainConfig:
    method: str = "standard"
    inner_lr: float = 5e-3
    outer_lr: float = 5e-4
    inner_steps: int = 3
    inner_batch: int = 10
    tasks_per_meta_step: int = 2
    alternation_period: int = 10
    grad_accumulation_steps: int = 1
    epochs: int | None = None
    seed: int = 0
    batch_size: int = 10
    hnet_schedule: str = "alternating"
    meta_reduction: str = "sum"
    instruction_config: str = "desc_posex"
    train_cap: int = 100
    warmup_steps: int = 0   # linear ramp of the outer learning rate over the first updates

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        for f in ("inner_batch", "tasks_per_meta_step", "alternation_period", "grad_accumulation_steps",
                  "batch_size", "train_cap"):
            if getattr(self, f) <= 0:
                raise ConfigurationError(f"{f} must be positive")
        if self.warmup_steps < 0:
            raise ConfigurationError("warmup_steps must be non-negative")
        if self.inner_steps < 0:
            raise ConfigurationError("inner_steps must be non-negative")
        if self.hnet_schedule not in ("alternating", "joint"):
            raise ConfigurationError(f"hnet_schedule must be alternating or joint, got {self.hnet_schedule!r}")
        if self.meta_reduction not in ("sum", "mean"):
            raise ConfigurationError(f"meta_reduction must be sum or mean, got {self.meta_reduction!r}")
        InstructionConfig.parse(self.instruction_config)
        if self.epochs is None:
            self.epochs = 10 if self.method == "hnet_maml" else 20
        if self.epochs <= 0:
            raise ConfigurationError("epochs must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train options: {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class Phase(str, Enum):
    HNET = "hnet"   # hypernetwork trainable, main LM frozen
    MAIN = "main"   # main LM trainable, hypernetwork frozen
    JOINT = "joint"


def alternation_phase(global_step: int, k: int) -> Phase:
    """Square wave of period 2k: k updates of HNet phase, then k of main phase."""
    if k < 1:
        raise ValueError("alternation period must be >= 1")
    return Phase.HNET if (global_step // k) % 2 == 0 else Phase.MAIN


def set_phase(params: ParamRegistry, phase: Phase) -> None:
    for name in params:
        if phase is Phase.JOINT:
            params[name].requires_grad = True
        elif phase is Phase.HNET:
            params[name].requires_grad = name.startswith(HNET)
        else:
            params[name].requires_grad = name.startswith(MAIN)


def group_names(params: ParamRegistry, prefix: str) -> list[str]:
    return [n for n in params if n.startswith(prefix)]


# -- data ----------------------------------------------------------------------------------

@dataclass
class TrainTask:
    id: str
    instruction: str
    instances: list[Instance]


@dataclass
class TaskBatch:
    """A mini-batch whose rows all come from ``task_ids`` (one id per row)."""

    task_ids: list[str]
    instruction: str
    batch: Batch

    @property
    def task_id(self) -> str:
        ids = set(self.task_ids)
        if len(ids) != 1:
            raise ContractError(f"batch mixes tasks: {sorted(ids)}")
        return self.task_ids[0]


@dataclass
class EpisodeBatch:
    support: list[TaskBatch]
    target: list[TaskBatch]

    def __post_init__(self):
        s = {b.task_id for b in self.support}
        t = {b.task_id for b in self.target}
        if s & t:
            raise ContractError(f"support and target tasks overlap: {sorted(s & t)}")


def prepare_tasks(tasks: Sequence[TaskSpec], cfg: TrainConfig,
                  instance_ids: dict[str, list[str]] | None = None) -> list[TrainTask]:
    """Attach instructions and draw the capped per-task training sample."""
    icfg = InstructionConfig.parse(cfg.instruction_config)
    out = []
    for t in tasks:
        pool = t.instances
        if instance_ids is not None and t.id in instance_ids:
            wanted = set(instance_ids[t.id])
            pool = [i for i in t.instances if i.id in wanted]
        if not pool:
            continue
        out.append(TrainTask(t.id, compose_instruction(t, icfg), sample_train_instances(t, cfg.train_cap,
                                                                                         cfg.seed, pool)))
    return out


def batch_for(model: Seq2SeqLM, rows: Sequence[tuple[TrainTask, Instance]]) -> TaskBatch:
    enc = [build_encoder_text(t.instruction, i.input) for t, i in rows]
    out = [i.references[0] for _, i in rows]
    starts = [input_start(model.tok, t.instruction) for t, _ in rows]
    return TaskBatch([t.id for t, _ in rows], rows[0][0].instruction,
                     make_batch(model.tok, enc, out, build_decoder_prefix(), starts))


def sample_episode(train_tasks: Sequence[TrainTask], cfg: TrainConfig, rng: np.random.Generator,
                   model: Seq2SeqLM) -> EpisodeBatch:
    """2K distinct tasks drawn uniformly; one same-task mini-batch each."""
    k = cfg.tasks_per_meta_step
    if len(train_tasks) < 2 * k:
        raise ConfigurationError(f"an episode needs {2 * k} tasks, only {len(train_tasks)} available")
    picked = rng.choice(len(train_tasks), size=2 * k, replace=False)
    batches = []
    for idx in picked:
        task = train_tasks[int(idx)]
        n = min(cfg.inner_batch, len(task.instances))
        rows = rng.choice(len(task.instances), size=n, replace=False)
        batches.append(batch_for(model, [(task, task.instances[int(r)]) for r in rows]))
    return EpisodeBatch(batches[:k], batches[k:])


# -- single updates --------------------------------------------------------------------------

def _check(loss: Tensor) -> float:
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    return value


def _add_grads(dst: ParamRegistry, src: ParamRegistry, names: Sequence[str], scale: float = 1.0) -> None:
    for n in names:
        g = src[n].grad
        if g is None:
            continue
        if scale != 1.0:
            g = g * np.asarray(scale, dtype=g.dtype)
        p = dst[n]
        p.grad = g.copy() if p.grad is None else p.grad + g


def standard_step(model: Seq2SeqLM, params: ParamRegistry, batches: Sequence[Batch],
                  opt: OptimizerState) -> float:
    """One optimizer update from the summed gradients of the given micro-batches."""
    losses = []
    for b in batches:
        loss = model.loss(params, b)
        losses.append(_check(loss))
        loss.backward()
    optimizer_step(opt, params)
    return float(np.mean(losses))


def fomaml_step(model: Seq2SeqLM, params: ParamRegistry, episode: EpisodeBatch, cfg: TrainConfig,
                opt: OptimizerState) -> float:
    """First-order MAML: adapt a clone per support task with SGD, then apply the
    gradient of the paired target loss (taken at the adapted clone) to ``params``."""
    names = params.trainable_names()
    scale = 1.0 / len(episode.target) if cfg.meta_reduction == "mean" else 1.0
    losses = []
    params.zero_grad()
    for sup, tgt in zip(episode.support, episode.target):
        clone = params.clone()
        inner = sgd(cfg.inner_lr)
        for _ in range(cfg.inner_steps):
            loss = model.loss(clone, sup.batch)
            _check(loss)
            loss.backward()
            optimizer_step(inner, clone)
        loss = model.loss(clone, tgt.batch)
        losses.append(_check(loss))
        loss.backward()
        _add_grads(params, clone, names, scale)
    optimizer_step(opt, params)
    return float(np.mean(losses))


def _hnet_loss(model: Seq2SeqLM, hnet: HyperNetwork, params, tb: TaskBatch) -> Tensor:
    tb.task_id  # noqa: B018 - raises on mixed-task batches
    view = hnet.task_adapt(params, params, tb.instruction)
    return model.loss(view, tb.batch)


def hnet_step(model: Seq2SeqLM, hnet: HyperNetwork, params: ParamRegistry, task_batches: Sequence[TaskBatch],
              phase: Phase, opt: OptimizerState) -> float:
    """Adapt per task batch, backprop the main-LM loss, update the phase's group."""
    for tb in task_batches:
        tb.task_id  # noqa: B018
    set_phase(params, phase)
    losses = []
    for tb in task_batches:
        loss = _hnet_loss(model, hnet, params, tb)
        losses.append(_check(loss))
        loss.backward()
    optimizer_step(opt, params)
    return float(np.mean(losses))


def hnet_maml_step(model: Seq2SeqLM, hnet: HyperNetwork, params: ParamRegistry, episode: EpisodeBatch,
                   cfg: TrainConfig, phase: Phase, opt: OptimizerState) -> float:
    """First-order MAML over the HNet model; only ``phase``'s group moves,
    in both the inner loop (on clones) and the outer update."""
    if phase is Phase.JOINT:
        raise ContractError("hnet_maml updates one group per meta-iteration")
    set_phase(params, phase)
    group = params.trainable_names()
    scale = 1.0 / len(episode.target) if cfg.meta_reduction == "mean" else 1.0
    losses = []
    params.zero_grad()
    for sup, tgt in zip(episode.support, episode.target):
        clone = ParamRegistry({})
        for n in group:
            clone.register(n, Tensor(params[n].data.copy()), trainable=True)
        view = dict(params)
        view.update(clone)
        inner = sgd(cfg.inner_lr)
        for _ in range(cfg.inner_steps):
            loss = _hnet_loss(model, hnet, view, sup)
            _check(loss)
            loss.backward()
            optimizer_step(inner, clone)
        loss = _hnet_loss(model, hnet, view, tgt)
        losses.append(_check(loss))
        loss.backward()
        _add_grads(params, clone, group, scale)
    optimizer_step(opt, params)
    return float(np.mean(losses))


# -- the training loop ------------------------------------------------------------------------

@dataclass
class TrainState:
    epoch: int = 0          # completed epochs
    global_step: int = 0    # optimizer updates (meta-iterations for MAML methods)


class Trainer:
    """Runs one of the four methods over prepared tasks, logging every update."""

    def __init__(self, model: Seq2SeqLM, params: ParamRegistry, train_tasks: Sequence[TrainTask],
                 cfg: TrainConfig, hnet: HyperNetwork | None = None, log_path=None,
                 verify_freeze: bool = False):
        if cfg.method in ("hnet", "hnet_maml") and hnet is None:
            raise ConfigurationError(f"method {cfg.method} needs a hypernetwork")
        if not train_tasks:
            raise ConfigurationError("no training tasks")
        self.model = model
        self.params = params
        self.tasks = list(train_tasks)
        self.cfg = cfg
        self.hnet = hnet
        self.opt = adam(cfg.outer_lr)
        self.rng = np.random.default_rng(cfg.seed)
        self.state = TrainState()
        self.log_path = Path(log_path) if log_path else None
        self.verify_freeze = verify_freeze
        self.history: list[dict] = []
        if cfg.method in ("standard", "maml"):
            params.set_trainable(trainable=True, prefix=MAIN)

    # -- bookkeeping --------------------------------------------------------------------------
    def _phase(self) -> Phase:
        if self.cfg.method in ("standard", "maml"):
            return Phase.MAIN
        if self.cfg.method == "hnet" and self.cfg.hnet_schedule == "joint":
            return Phase.JOINT
        return alternation_phase(self.state.global_step, self.cfg.alternation_period)

    def _hashes(self) -> dict:
        return {"main_hash": self.params.fingerprint(group_names(self.params, MAIN)),
                "hnet_hash": self.params.fingerprint(group_names(self.params, HNET))}

    def current_lr(self) -> float:
        w = self.cfg.warmup_steps
        if w and self.state.global_step < w:
            return self.cfg.outer_lr * (self.state.global_step + 1) / w
        return self.cfg.outer_lr

    def _record(self, phase: Phase, loss: float, before: dict | None) -> dict:
        rec = {"step": self.state.global_step, "epoch": self.state.epoch, "phase": phase.value,
               "loss": loss, "lr": self.opt.learning_rate}
        if before is not None:
            after = self._hashes()
            rec.update({"main_hash_before": before["main_hash"], "main_hash": after["main_hash"],
                        "hnet_hash_before": before["hnet_hash"], "hnet_hash": after["hnet_hash"]})
        self.history.append(rec)
        if self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        return rec

    # -- epoch structure -----------------------------------------------------------------------
    def _mixed_batches(self) -> list[TaskBatch]:
        rows = [(t, i) for t in self.tasks for i in t.instances]
        order = self.rng.permutation(len(rows))
        bs = self.cfg.batch_size
        return [batch_for(self.model, [rows[int(k)] for k in order[s:s + bs]]) for s in range(0, len(rows), bs)]

    def _task_batches(self) -> list[TaskBatch]:
        chunks = []
        for t in self.tasks:
            order = self.rng.permutation(len(t.instances))
            for s in range(0, len(order), self.cfg.batch_size):
                chunks.append([(t, t.instances[int(k)]) for k in order[s:s + self.cfg.batch_size]])
        order = self.rng.permutation(len(chunks))
        return [batch_for(self.model, chunks[int(k)]) for k in order]

    def meta_iterations_per_epoch(self) -> int:
        total = sum(len(t.instances) for t in self.tasks)
        per = 2 * self.cfg.tasks_per_meta_step * self.cfg.inner_batch
        return max(1, math.ceil(total / per))

    def run_epoch(self, max_updates: int | None = None) -> list[dict]:
        cfg = self.cfg
        recs = []
        acc = cfg.grad_accumulation_steps
        if cfg.method in ("standard", "hnet"):
            batches = self._mixed_batches() if cfg.method == "standard" else self._task_batches()
            for s in range(0, len(batches), acc):
                if max_updates is not None and len(recs) >= max_updates:
                    break
                group = batches[s:s + acc]
                phase = self._phase()
                self.opt.learning_rate = self.current_lr()
                before = self._hashes() if self.verify_freeze else None
                if cfg.method == "standard":
                    loss = standard_step(self.model, self.params, [g.batch for g in group], self.opt)
                else:
                    loss = hnet_step(self.model, self.hnet, self.params, group, phase, self.opt)
                recs.append(self._record(phase, loss, before))
                self.state.global_step += 1
        else:
            for _ in range(self.meta_iterations_per_epoch()):
                if max_updates is not None and len(recs) >= max_updates:
                    break
                episode = sample_episode(self.tasks, cfg, self.rng, self.model)
                phase = self._phase()
                self.opt.learning_rate = self.current_lr()
                before = self._hashes() if self.verify_freeze else None
                if cfg.method == "maml":
                    loss = fomaml_step(self.model, self.params, episode, cfg, self.opt)
                else:
                    loss = hnet_maml_step(self.model, self.hnet, self.params, episode, cfg, phase, self.opt)
                recs.append(self._record(phase, loss, before))
                self.state.global_step += 1
        self.state.epoch += 1
        return recs

    def train(self, epochs: int | None = None, checkpoint_dir=None,
              on_epoch: Callable[["Trainer"], None] | None = None) -> list[dict]:
        target = epochs if epochs is not None else self.cfg.epochs
        while self.state.epoch < target:
            self.run_epoch()
            if checkpoint_dir is not None:
                self.save(Path(checkpoint_dir) / f"epoch_{self.state.epoch:03d}")
            if on_epoch is not None:
                on_epoch(self)
        return self.history

    # -- checkpoint / resume -------------------------------------------------------------------
    def save(self, stem) -> Path:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(stem.with_suffix(".ckpt"), self.params)
        moments = {}
        for name, m in self.opt.m.items():
            moments[f"m.{name}"] = Tensor(m)
            moments[f"v.{name}"] = Tensor(self.opt.v[name])
        save_checkpoint(stem.with_suffix(".opt.ckpt"), moments)
        state = {"epoch": self.state.epoch, "global_step": self.state.global_step,
                 "opt_step_count": self.opt.step_count, "opt_t": self.opt.t,
                 "rng": self.rng.bit_generator.state,
                 "trainable": {n: self.params[n].requires_grad for n in self.params}}
        stem.with_suffix(".state.json").write_text(json.dumps(state, sort_keys=True))
        return stem.with_suffix(".ckpt")

    def resume(self, stem) -> None:
        stem = Path(str(stem).removesuffix(".ckpt"))
        for name, arr in load_arrays(stem.with_suffix(".ckpt")).items():
            np.copyto(self.params[name].data, arr.astype(self.params[name].dtype))
        state = json.loads(stem.with_suffix(".state.json").read_text())
        self.opt.m.clear()
        self.opt.v.clear()
        for key, arr in load_arrays(stem.with_suffix(".opt.ckpt")).items():
            kind, name = key.split(".", 1)
            (self.opt.m if kind == "m" else self.opt.v)[name] = arr.astype(self.params[name].dtype)
        self.opt.t = {k: int(v) for k, v in state["opt_t"].items()}
        self.opt.step_count = int(state["opt_step_count"])
        self.rng.bit_generator.state = state["rng"]
        for n, flag in state["trainable"].items():
            self.params[n].requires_grad = flag
        self.state = TrainState(int(state["epoch"]), int(state["global_step"]))


def validation_loss(model: Seq2SeqLM, params: ParamRegistry, tasks: Sequence[TrainTask],
                    hnet: HyperNetwork | None = None, batch_size: int = 50) -> float:
    """Mean per-instance loss over the given tasks, no tape."""
    losses = []
    with no_grad():
        for t in tasks:
            view = hnet.task_adapt(params, params, t.instruction) if hnet is not None else params
            for s in range(0, len(t.instances), batch_size):
                tb = batch_for(model, [(t, i) for i in t.instances[s:s + batch_size]])
                losses.extend(model.sequence_losses(view, tb.batch).tolist())
    return float(np.mean(losses))
