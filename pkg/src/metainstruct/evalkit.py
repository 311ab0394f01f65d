"""ROUGE scoring, zero-shot evaluation, difficulty bins and percent-change tables."""

from __future__ import annotations

import hashlib
import json
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .gradcore import ContractError, no_grad
from .seq2seq import pad_ids
from .taskdata import (InstructionConfig, TaskSpec, build_decoder_prefix, build_encoder_text, compose_instruction,
                       input_start)

TOKENIZATION = "lowercase; split on whitespace; strip punctuation; no stemming"
_PUNCT = str.maketrans("", "", string.punctuation)


def rouge_tokens(text: str) -> list[str]:
    out = []
    for w in text.lower().split():
        w = w.translate(_PUNCT)
        if w:
            out.append(w)
    return out


def _f(overlap: int, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p = overlap / n_cand
    r = overlap / n_ref
    return 2 * p * r / (p + r)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n_f(candidate: str, references: Sequence[str], n: int = 2) -> float:
    """ROUGE-N F-measure, max over references."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not references:
        raise ContractError("rouge needs at least one reference")
    cand = _ngrams(rouge_tokens(candidate), n)
    total_c = sum(cand.values())
    best = 0.0
    for ref in references:
        r = _ngrams(rouge_tokens(ref), n)
        overlap = sum((cand & r).values())
        best = max(best, _f(overlap, total_c, sum(r.values())))
    return best


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, references: Sequence[str]) -> float:
    """LCS-based F-measure over tokens, max over references."""
    if not references:
        raise ContractError("rouge needs at least one reference")
    cand = rouge_tokens(candidate)
    best = 0.0
    for ref in references:
        r = rouge_tokens(ref)
        best = max(best, _f(lcs_length(cand, r), len(cand), len(r)))
    return best


# -- evaluation ------------------------------------------------------------------------------

class Predictor(Protocol):
    def predict(self, task: TaskSpec, instruction: str, inputs: Sequence[str]) -> list[str]:
        ...


@dataclass
class InstanceScore:
    task: str
    input_hash: str
    prediction: str
    best_reference: str
    rouge2_f: float
    rougeL_f: float


@dataclass
class TaskScore:
    task: str
    categories: list[str]
    n: int
    rouge2_f: float
    rougeL_f: float


@dataclass
class EvalReport:
    tasks: list[TaskScore]
    instruction_config: str = ""
    method: str = ""
    tokenization: str = TOKENIZATION
    instances: list[InstanceScore] = field(default_factory=list)

    @property
    def mean_rouge2(self) -> float:
        return float(np.mean([t.rouge2_f for t in self.tasks])) if self.tasks else 0.0

    @property
    def mean_rougeL(self) -> float:
        return float(np.mean([t.rougeL_f for t in self.tasks])) if self.tasks else 0.0

    def by_task(self) -> dict[str, TaskScore]:
        return {t.task: t for t in self.tasks}

    def write(self, path, dump_instances: str | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"type": "header", "tokenization": self.tokenization,
                                 "instruction_config": self.instruction_config,
                                 "method": self.method}) + "\n")
            for t in self.tasks:
                fh.write(json.dumps({"type": "task", **asdict(t)}) + "\n")
            fh.write(json.dumps({"type": "summary", "n_tasks": len(self.tasks),
                                 "rouge2_f": self.mean_rouge2, "rougeL_f": self.mean_rougeL}) + "\n")
        if dump_instances:
            with open(dump_instances, "w", encoding="utf-8") as fh:
                for s in self.instances:
                    fh.write(json.dumps(asdict(s)) + "\n")

    @classmethod
    def read(cls, path) -> "EvalReport":
        rep = cls(tasks=[])
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                r = json.loads(line)
                kind = r.pop("type", "task")
                if kind == "header":
                    rep.tokenization = r.get("tokenization", TOKENIZATION)
                    rep.instruction_config = r.get("instruction_config", "")
                    rep.method = r.get("method", "")
                elif kind == "task":
                    rep.tasks.append(TaskScore(**r))
        return rep


def _hash(text: str) -> str:
    return hashlib.sha1(text.encode("utf-8")).hexdigest()[:16]


def evaluate(model, tasks: Iterable[TaskSpec], cfg: InstructionConfig | str,
             cap: int = 100, method: str = "") -> EvalReport:
    """Zero-shot scores: one prediction per instance, no parameter updates.

    ``model`` is anything with ``predict(task, instruction, inputs)``; the
    per-task score is the mean over instances of the max-over-references score.
    """
    cfg = InstructionConfig(cfg)
    scores, per_instance = [], []
    for task in tasks:
        instruction = compose_instruction(task, cfg)
        insts = task.instances[:cap]
        preds = model.predict(task, instruction, [i.input for i in insts])
        r2s, rls = [], []
        for inst, pred in zip(insts, preds):
            per_ref = [rouge_n_f(pred, [r], 2) for r in inst.references]
            best = int(np.argmax(per_ref))
            r2 = per_ref[best]
            rl = rouge_l(pred, inst.references)
            r2s.append(r2)
            rls.append(rl)
            per_instance.append(InstanceScore(task.id, _hash(inst.input), pred, inst.references[best], r2, rl))
        scores.append(TaskScore(task.id, list(task.categories), len(insts),
                                float(np.mean(r2s)) if r2s else 0.0, float(np.mean(rls)) if rls else 0.0))
    return EvalReport(scores, cfg.value, method, TOKENIZATION, per_instance)


class LMPredictor:
    """Greedy decoding with the main LM, optionally adapted once per task by a hypernetwork."""

    def __init__(self, model, params, hnet=None, hnet_params=None, max_len: int | None = None,
                 batch_size: int = 50):
        self.model = model
        self.params = params
        self.hnet = hnet
        self.hnet_params = hnet_params if hnet_params is not None else params
        self.max_len = max_len or model.config.max_decoder_positions - 1
        self.batch_size = batch_size

    def predict(self, task: TaskSpec, instruction: str, inputs: Sequence[str]) -> list[str]:
        tok = self.model.tok
        with no_grad():
            params = self.params
            if self.hnet is not None:
                params = self.hnet.task_adapt(self.hnet_params, self.params, instruction)
            prefix = tok.encode(build_decoder_prefix())
            out: list[str] = []
            for start in range(0, len(inputs), self.batch_size):
                chunk = inputs[start:start + self.batch_size]
                src = pad_ids([tok.encode(build_encoder_text(instruction, x)) for x in chunk], tok.PAD)
                starts = [input_start(tok, instruction)] * len(chunk)
                for ids in self.model.greedy_decode(params, src, prefix, self.max_len, starts):
                    out.append(tok.decode(ids))
        return out


# -- difficulty bins and percent change ----------------------------------------------

@dataclass
class DifficultyBin:
    label: str
    tasks: list[str]


def bin_by_difficulty(baseline: EvalReport) -> list[DifficultyBin]:
    """Hard / medium / easy thirds by ascending baseline ROUGE-2F (ties by task id)."""
    if len(baseline.tasks) < 3:
        raise ContractError("difficulty binning needs at least 3 tasks")
    ranked = [t.task for t in sorted(baseline.tasks, key=lambda t: (t.rouge2_f, t.task))]
    n = len(ranked)
    sizes = [n // 3] * 3
    for i in range(n % 3):
        sizes[i] += 1
    bins, start = [], 0
    for label, size in zip(("hard", "medium", "easy"), sizes):
        bins.append(DifficultyBin(label, ranked[start:start + size]))
        start += size
    return bins


def pct_change(baseline: float, value: float) -> float | None:
    """Percent change from ``baseline``; ``None`` when the baseline is not positive."""
    if not baseline > 0:
        return None
    return 100.0 * (value - baseline) / baseline


def fmt_pct(x: float | None) -> str:
    return "n/a" if x is None else f"{x:+.1f}"


class TaskSetMismatch(ValueError):
    pass


def difficulty_table(baseline: EvalReport, compares: dict[str, EvalReport]) -> list[dict]:
    """One record per (comparison, bin) plus an overall row, on mean ROUGE-2F."""
    base = baseline.by_task()
    for name, rep in compares.items():
        other = rep.by_task()
        diff = sorted(set(base) ^ set(other))
        if diff:
            raise TaskSetMismatch(f"{name}: task sets differ: {', '.join(diff)}")
    rows = []
    bins = bin_by_difficulty(baseline)
    groups = [(b.label, b.tasks) for b in bins] + [("overall", sorted(base))]
    for name, rep in compares.items():
        other = rep.by_task()
        for label, ids in groups:
            b = float(np.mean([base[i].rouge2_f for i in ids]))
            v = float(np.mean([other[i].rouge2_f for i in ids]))
            rows.append({"compare": name, "bin": label, "n_tasks": len(ids),
                         "baseline_rouge2_f": b, "rouge2_f": v, "pct_change": pct_change(b, v)})
    return rows


def render_table(rows: list[dict]) -> str:
    header = f"{'compare':<24} {'bin':<8} {'n':>4} {'baseline':>9} {'value':>9} {'%change':>9}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['compare']:<24} {r['bin']:<8} {r['n_tasks']:>4} {r['baseline_rouge2_f']:>9.4f} "
                     f"{r['rouge2_f']:>9.4f} {fmt_pct(r['pct_change']):>9}")
    return "\n".join(lines)
