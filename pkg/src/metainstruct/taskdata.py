"""Tasks, instructions, length filtering and train/eval splits."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tokenizer import ByteTokenizer

log = logging.getLogger(__name__)

DECODER_PREFIX = "[Output]:"
SEPARATOR = "\nNow complete the following.\n"
STRONG_CATEGORIES = ("Summarization", "Title Generation")
# categories that make a task a non-generation task
NON_GENERATION_CATEGORIES = (
    "Classification", "Text Categorization", "Sentiment Analysis", "Sequence Tagging",
    "Multiple Choice QA", "Answer Verification", "Textual Entailment", "Named Entity Recognition",
    "Coreference Resolution", "Toxic Language Detection", "Stereotype Detection",
)


class DataError(ValueError):
    """Malformed task data."""


class ConfigurationError(ValueError):
    """Impossible split or sampling configuration."""


@dataclass
class Example:
    input: str
    output: str
    explanation: str = ""


@dataclass
class Instance:
    id: str
    input: str
    references: list[str]

    def __post_init__(self):
        if not self.references:
            raise DataError(f"instance {self.id!r} has no reference outputs")


@dataclass
class TaskSpec:
    id: str
    categories: list[str]
    short_description: str
    long_description: str
    positive_examples: list[Example] = field(default_factory=list)
    negative_examples: list[Example] = field(default_factory=list)
    instances: list[Instance] = field(default_factory=list)
    language: str = "English"

    def __post_init__(self):
        if not self.categories:
            raise DataError(f"task {self.id!r} has no categories")


class InstructionConfig(str, Enum):
    NONE = "none"
    DESC = "desc"
    POSEX = "posex"
    DESC_POSEX = "desc_posex"

    @classmethod
    def parse(cls, text: str) -> "InstructionConfig":
        try:
            return cls(text.lower())
        except ValueError:
            valid = ", ".join(c.value for c in cls)
            raise ValueError(f"unknown instruction config {text!r}; valid: {valid}") from None


# -- NIV2-style JSON -------------------------------------------------------------------

_MANDATORY = ("Definition", "Positive Examples", "Negative Examples", "Instances", "Categories")


def _text(value) -> str:
    if isinstance(value, list):
        return " ".join(str(v) for v in value)
    return str(value)


def _examples(raw, field_name: str, task_id: str) -> list[Example]:
    if not isinstance(raw, list):
        raise DataError(f"{task_id}: '{field_name}' must be a list")
    return [Example(str(e.get("input", "")), _text(e.get("output", "")), str(e.get("explanation", "")))
            for e in raw]


def short_name(task_id: str) -> str:
    """Readable fallback short description from an NIV2 file stem such as
    ``task001_quoref_question_generation``."""
    stem = task_id.split("_", 1)[1] if task_id.startswith("task") and "_" in task_id else task_id
    return stem.replace("_", " ")


def parse_niv2(obj: dict, task_id: str) -> TaskSpec:
    if not isinstance(obj, dict):
        raise DataError(f"{task_id}: task file must hold a JSON object")
    for name in _MANDATORY:
        if name not in obj:
            raise DataError(f"{task_id}: missing mandatory field '{name}'")
    raw_instances = obj["Instances"]
    if not isinstance(raw_instances, list):
        raise DataError(f"{task_id}: 'Instances' must be a list")
    instances = []
    for k, inst in enumerate(raw_instances):
        out = inst.get("output", [])
        refs = [out] if isinstance(out, str) else [str(o) for o in out]
        instances.append(Instance(str(inst.get("id", f"{task_id}-{k}")), str(inst.get("input", "")), refs))
    lang = obj.get("Input_language", ["English"])
    return TaskSpec(
        id=task_id,
        categories=[str(c) for c in obj["Categories"]],
        short_description=str(obj.get("Short Description") or short_name(task_id)),
        long_description=_text(obj["Definition"]),
        positive_examples=_examples(obj["Positive Examples"], "Positive Examples", task_id),
        negative_examples=_examples(obj["Negative Examples"], "Negative Examples", task_id),
        instances=instances,
        language=_text(lang[0] if isinstance(lang, list) and lang else lang),
    )


def load_niv2(path) -> TaskSpec:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from e
    return parse_niv2(obj, path.stem)


def to_niv2(task: TaskSpec) -> dict:
    ex = lambda e: {"input": e.input, "output": e.output, "explanation": e.explanation}  # noqa: E731
    return {
        "Definition": [task.long_description],
        "Short Description": task.short_description,
        "Categories": list(task.categories),
        "Input_language": [task.language],
        "Positive Examples": [ex(e) for e in task.positive_examples],
        "Negative Examples": [ex(e) for e in task.negative_examples],
        "Instances": [{"id": i.id, "input": i.input, "output": list(i.references)} for i in task.instances],
    }


def save_niv2(task: TaskSpec, out_dir) -> Path:
    path = Path(out_dir) / f"{task.id}.json"
    path.write_text(json.dumps(to_niv2(task), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def load_task_dir(path) -> list[TaskSpec]:
    files = sorted(Path(path).glob("*.json"))
    if not files:
        raise DataError(f"no task files in {path}")
    return [load_niv2(f) for f in files]


def english_only(tasks: Iterable[TaskSpec]) -> list[TaskSpec]:
    return [t for t in tasks if t.language.lower() == "english"]


# -- instruction composition ------------------------------------------------------------

def render_example(e: Example) -> str:
    return f"Positive Example:\nInput: {e.input} Output: {e.output}"


def compose_instruction(task: TaskSpec, cfg: InstructionConfig) -> str:
    cfg = InstructionConfig(cfg)
    if cfg is InstructionConfig.NONE:
        return task.short_description
    if cfg is InstructionConfig.DESC:
        return f"Definition: {task.long_description}"
    if not task.positive_examples:
        raise DataError(f"{task.id}: instruction config {cfg.value} needs a positive example")
    example = render_example(task.positive_examples[0])
    if cfg is InstructionConfig.POSEX:
        return f"{task.short_description}\n{example}"
    return f"Definition: {task.long_description}\n{example}"


def build_encoder_text(instruction: str, instance_input: str) -> str:
    return instruction + SEPARATOR + instance_input


def input_start(tokenizer: ByteTokenizer, instruction: str) -> int:
    """Token index at which the instance input begins in the encoder text."""
    return tokenizer.count(instruction + SEPARATOR)


def build_decoder_prefix() -> str:
    return DECODER_PREFIX


def longest_config(task: TaskSpec) -> InstructionConfig:
    return InstructionConfig.DESC_POSEX if task.positive_examples else InstructionConfig.DESC


def prefilter_instances(tasks: Sequence[TaskSpec], tokenizer: ByteTokenizer | None = None,
                        enc_limit: int = 1024, dec_limit: int = 128) -> list[TaskSpec]:
    """Drop instances that do not fit under the longest instruction config.

    Encoder length is the token count of the composed encoder text; decoder
    length is BOS/EOS + prefix + longest reference. Tasks left empty are dropped.
    """
    if enc_limit <= 0 or dec_limit <= 0:
        raise ValueError("limits must be positive")
    tok = tokenizer or ByteTokenizer()
    prefix_len = tok.count(DECODER_PREFIX)
    out = []
    for task in tasks:
        instruction = compose_instruction(task, longest_config(task))
        kept = [
            inst for inst in task.instances
            if tok.count(build_encoder_text(instruction, inst.input)) <= enc_limit
            and 1 + prefix_len + max(tok.count(r) for r in inst.references) <= dec_limit
        ]
        if not kept:
            log.info("task %s completely filtered by length limits", task.id)
            continue
        out.append(replace(task, instances=kept))
    return out


# -- splits ---------------------------------------------------------------------------------

@dataclass
class SplitSpec:
    train_fraction: float = 0.80
    val_fraction: float = 0.10
    eval_fraction: float = 0.10
    weak_task_fraction: float = 0.10
    strong_categories: tuple = STRONG_CATEGORIES
    non_generation_categories: tuple = NON_GENERATION_CATEGORIES
    train_pool: str = "all"  # "all" or "generation"
    seed: int = 0

    def __post_init__(self):
        total = self.train_fraction + self.val_fraction + self.eval_fraction
        if abs(total - 1.0) > 1e-9:
            raise ConfigurationError(f"instance fractions sum to {total}, not 1")
        if not 0.0 <= self.weak_task_fraction < 1.0:
            raise ConfigurationError("weak_task_fraction must lie in [0, 1)")
        if self.train_pool not in ("all", "generation"):
            raise ConfigurationError(f"train_pool must be 'all' or 'generation', got {self.train_pool!r}")


@dataclass
class Splits:
    train_tasks: list[str]
    weak_eval_tasks: list[str]
    strong_eval_tasks: list[str]
    instances: dict[str, dict[str, list[str]]]  # task id -> {"train"|"val"|"eval": instance ids}
    seed: int

    def split_of(self, task_id: str) -> str:
        if task_id in self.strong_eval_tasks:
            return "strong_eval"
        if task_id in self.weak_eval_tasks:
            return "weak_eval"
        if task_id in self.train_tasks:
            return "train"
        return "unused"

    def to_records(self) -> list[dict]:
        recs = []
        for name, ids in (("train", self.train_tasks), ("weak_eval", self.weak_eval_tasks),
                          ("strong_eval", self.strong_eval_tasks)):
            for tid in ids:
                recs.append({"task": tid, "split": name, "seed": self.seed, "instances": self.instances.get(tid, {})})
        return recs

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.to_records():
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "Splits":
        groups: dict[str, list[str]] = {"train": [], "weak_eval": [], "strong_eval": []}
        instances, seed = {}, 0
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                r = json.loads(line)
                groups[r["split"]].append(r["task"])
                instances[r["task"]] = r.get("instances", {})
                seed = r.get("seed", seed)
        return cls(groups["train"], groups["weak_eval"], groups["strong_eval"], instances, seed)


def _task_rng(seed: int, task_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(task_id.encode("utf-8"))])


def is_generation(task: TaskSpec, spec: SplitSpec) -> bool:
    return not set(task.categories) & set(spec.non_generation_categories)


def instance_split(task: TaskSpec, spec: SplitSpec) -> dict[str, list[str]]:
    ids = [i.id for i in task.instances]
    order = _task_rng(spec.seed, task.id).permutation(len(ids))
    n_train = int(round(spec.train_fraction * len(ids)))
    n_val = int(round(spec.val_fraction * len(ids)))
    shuffled = [ids[k] for k in order]
    return {"train": shuffled[:n_train], "val": shuffled[n_train:n_train + n_val],
            "eval": shuffled[n_train + n_val:]}


def make_splits(tasks: Sequence[TaskSpec], spec: SplitSpec | None = None) -> Splits:
    """Strong set by category, weak set by seeded task sample, 80/10/10 instance split."""
    spec = spec or SplitSpec()
    strong_cats = set(spec.strong_categories)
    strong = sorted(t.id for t in tasks if set(t.categories) & strong_cats)
    rest = [t for t in tasks if t.id not in set(strong)]
    generation = sorted(t.id for t in rest if is_generation(t, spec))
    if not generation:
        raise ConfigurationError("no generation tasks left after removing the strong set")
    rng = np.random.default_rng(spec.seed)
    n_weak = int(round(spec.weak_task_fraction * len(generation)))
    weak = sorted(rng.choice(generation, size=n_weak, replace=False).tolist()) if n_weak else []
    pool = generation if spec.train_pool == "generation" else sorted(t.id for t in rest)
    train = [tid for tid in pool if tid not in set(weak)]
    if not train:
        raise ConfigurationError("training pool is empty")
    return Splits(train, weak, strong, {t.id: instance_split(t, spec) for t in tasks}, spec.seed)


def sample_train_instances(task: TaskSpec, cap: int = 100, seed: int = 0,
                           pool: Sequence[Instance] | None = None) -> list[Instance]:
    if cap <= 0:
        raise ValueError("cap must be positive")
    items = list(task.instances if pool is None else pool)
    if len(items) <= cap:
        return items
    idx = _task_rng(seed, task.id).choice(len(items), size=cap, replace=False)
    return [items[k] for k in idx]


def select_instances(task: TaskSpec, ids: Iterable[str]) -> list[Instance]:
    by_id = {i.id: i for i in task.instances}
    return [by_id[i] for i in ids if i in by_id]
