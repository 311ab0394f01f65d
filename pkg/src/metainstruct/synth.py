"""Synthetic string-transformation tasks in the NIV2 task schema.

Every task draws its inputs from the same distribution (random lowercase
strings, rendered one letter per word), so the instruction is the only thing
that tells tasks apart. The two-step "Composition" tasks chain actions that
appear on their own in other tasks and form the held-out category.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .taskdata import ConfigurationError, Example, Instance, TaskSpec

VOWELS = set("aeiou")
HELD_OUT_CATEGORIES = ("Composition",)


def reverse(s: str) -> str:
    return s[::-1]


def duplicate(s: str) -> str:
    return s + s


def rotate(s: str, k: int) -> str:
    """Rotate right by ``k``: the last ``k`` letters move to the front."""
    k %= len(s)
    return s[-k:] + s[:-k] if k else s


def sort_letters(s: str) -> str:
    return "".join(sorted(s))


def sort_desc(s: str) -> str:
    return "".join(sorted(s, reverse=True))


def drop_vowels(s: str) -> str:
    return "".join(c for c in s if c not in VOWELS)


def swap_case(s: str) -> str:
    return s.swapcase()


def first_half(s: str) -> str:
    return s[: max(1, len(s) // 2)]


def last_half(s: str) -> str:
    return s[len(s) - max(1, len(s) // 2):]


def interleave(s: str, marker: str) -> str:
    return "".join(c + marker for c in s)


@dataclass(frozen=True)
class Transform:
    name: str
    fn: Callable[[str], str]
    short: str
    action: str
    category: str


def _single(name, fn, short, action, category) -> Transform:
    return Transform(name, fn, short, action, category)


def _chain(first: Transform, second: Transform) -> Transform:
    return Transform(
        f"{first.name}_then_{second.name}",
        lambda s, f=first.fn, g=second.fn: g(f(s)),
        "Two-step letter edit",
        f"{first.action}, then {second.action}",
        "Composition",
    )


_REVERSE = _single("reverse", reverse, "Letter reversal", "reverse the order of the letters", "Reordering")
_SORT = _single("sort", sort_letters, "Alphabetical sorting", "sort the letters alphabetically", "Sorting")
_ROT1 = _single("rotate1", lambda s: rotate(s, 1), "Rotation",
                "move the last letter to the front", "Rotation")
_DROPV = _single("drop_vowels", drop_vowels, "Vowel removal", "remove every vowel", "Filtering")
_FIRST = _single("first_half", first_half, "Truncation", "keep only the first half of the letters",
                 "Truncation")
_DUP = _single("duplicate", duplicate, "Duplication", "write all the letters twice", "Repetition")

# Order matters: a suite of n tasks uses the first n entries, and the first
# eight hold six single-action tasks plus two held-out compositions.
CATALOGUE: tuple[Transform, ...] = (
    _REVERSE, _SORT, _ROT1, _DROPV, _FIRST, _DUP,
    _chain(_REVERSE, _DROPV),
    _chain(_SORT, _FIRST),
    _single("rotate2", lambda s: rotate(s, 2), "Rotation", "move the last two letters to the front", "Rotation"),
    _single("sort_desc", sort_desc, "Reverse alphabetical sorting",
            "sort the letters in reverse alphabetical order", "Sorting"),
    _single("last_half", last_half, "Truncation", "keep only the second half of the letters", "Truncation"),
    _single("swap_case", swap_case, "Case change", "write every letter in upper case", "Case"),
    _single("interleave_x", lambda s: interleave(s, "x"), "Interleaving",
            "write the letter x after every letter", "Interleaving"),
    _chain(_DUP, _REVERSE),
    _chain(_DROPV, _DUP),
    _single("rotate3", lambda s: rotate(s, 3), "Rotation", "move the last three letters to the front", "Rotation"),
    _single("interleave_z", lambda s: interleave(s, "z"), "Interleaving",
            "write the letter z after every letter", "Interleaving"),
    _chain(_ROT1, _FIRST),
)


def spaced(s: str) -> str:
    return " ".join(s)


def long_description(t: Transform) -> str:
    return f"{t.action[0].upper()}{t.action[1:]}."


def _draw_input(rng: np.random.Generator, transforms, min_len: int = 4, max_len: int = 12) -> str:
    letters = np.array(list(string.ascii_lowercase))
    while True:
        n = int(rng.integers(min_len, max_len + 1))
        s = "".join(rng.choice(letters, size=n))
        outs = [t.fn(s) for t in transforms]
        if drop_vowels(s) and len(set(outs)) == len(outs):
            return s


def synth_suite(seed: int, n_tasks: int = 8, instances_per_task: int = 100,
                n_positive: int = 2, min_len: int = 4, max_len: int = 12) -> list[TaskSpec]:
    if n_tasks < 2:
        raise ConfigurationError("a synthetic suite needs at least 2 tasks")
    if not 2 <= min_len <= max_len:
        raise ConfigurationError(f"bad input length range [{min_len}, {max_len}]")
    if n_tasks > len(CATALOGUE):
        raise ConfigurationError(f"only {len(CATALOGUE)} transform combinations are available, "
                                 f"asked for {n_tasks}")
    chosen = CATALOGUE[:n_tasks]
    tasks = []
    for idx, t in enumerate(chosen):
        rng = np.random.default_rng([seed, idx])
        tid = f"synth{idx:03d}_{t.name}"
        positives = []
        for _ in range(n_positive):
            s = _draw_input(rng, chosen, min_len, max_len)
            positives.append(Example(spaced(s), spaced(t.fn(s)), f"The rule is to {t.action}."))
        instances = []
        for k in range(instances_per_task):
            s = _draw_input(rng, chosen, min_len, max_len)
            instances.append(Instance(f"{tid}-{k:04d}", spaced(s), [spaced(t.fn(s))]))
        tasks.append(TaskSpec(
            id=tid,
            categories=[t.category],
            short_description=t.short,
            long_description=long_description(t),
            positive_examples=positives,
            negative_examples=[],
            instances=instances,
        ))
    return tasks
