"""Named parameter storage with per-entry trainable flags."""

from __future__ import annotations

import hashlib
from collections.abc import Mapping
from typing import Iterable, Iterator

import numpy as np

from .tensor import Tensor


class ParamRegistry(Mapping):
    """Ordered map from hierarchical name to a leaf :class:`Tensor`.

    A registry behaves as a read-only mapping for model code; mutation goes
    through :meth:`register`, :meth:`set_trainable` and the optimizers.
    """

    def __init__(self, entries: Mapping[str, Tensor] | None = None):
        self._entries: dict[str, Tensor] = {}
        for name, t in (entries or {}).items():
            self.register(name, t)

    def register(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"parameter {name!r} already registered")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = trainable
        t.name = name
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def is_trainable(self, name: str) -> bool:
        return self[name].requires_grad

    def set_trainable(self, names: Iterable[str] | str | None = None, trainable: bool = True,
                      prefix: str | None = None) -> None:
        """Flip the trainable flag of the selected entries; values are untouched."""
        if isinstance(names, str):
            names = [names]
        selected = list(names) if names is not None else list(self._entries)
        if prefix is not None:
            selected = [n for n in selected if n.startswith(prefix)]
        for n in selected:
            self[n].requires_grad = trainable

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._entries.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def subset(self, prefix: str) -> "ParamRegistry":
        """A registry sharing the tensors whose names start with ``prefix``."""
        out = ParamRegistry()
        out._entries = {n: t for n, t in self._entries.items() if n.startswith(prefix)}
        return out

    def merged(self, other: "ParamRegistry") -> "ParamRegistry":
        out = ParamRegistry()
        out._entries = dict(self._entries)
        for n, t in other._entries.items():
            if n in out._entries:
                raise KeyError(f"parameter {n!r} present in both registries")
            out._entries[n] = t
        return out

    def clone(self) -> "ParamRegistry":
        """Deep copy of values and flags; grads are not copied."""
        out = ParamRegistry()
        for n, t in self._entries.items():
            out.register(n, Tensor(t.data.copy()), trainable=t.requires_grad)
        return out

    def copy_values_from(self, other: Mapping[str, Tensor]) -> None:
        for n, t in self._entries.items():
            np.copyto(t.data, other[n].data)

    def astype(self, dtype) -> "ParamRegistry":
        out = ParamRegistry()
        for n, t in self._entries.items():
            out.register(n, Tensor(t.data.astype(dtype)), trainable=t.requires_grad)
        return out

    def num_values(self) -> int:
        return int(sum(t.size for t in self._entries.values()))

    def fingerprint(self, names: Iterable[str] | None = None) -> str:
        """SHA-256 over names and raw buffers; equal iff bitwise equal."""
        h = hashlib.sha256()
        for n in (names if names is not None else self._entries):
            t = self[n]
            h.update(n.encode())
            h.update(str(t.data.dtype).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()
