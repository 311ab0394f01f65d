"""Byte-level tokenizer shared by the main and hypernetwork LMs."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ByteTokenizer:
    """One token per UTF-8 byte, followed by PAD/BOS/EOS and reserved
    decoder-index tokens used by the hypernetwork."""

    n_index_tokens: int = 32

    PAD = 256
    BOS = 257
    EOS = 258
    FIRST_INDEX = 259

    @property
    def vocab_size(self) -> int:
        return self.FIRST_INDEX + self.n_index_tokens

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        raw = bytes(int(i) for i in ids if 0 <= int(i) < 256)
        return raw.decode("utf-8", errors="replace")

    def count(self, text: str) -> int:
        return len(text.encode("utf-8"))

    def index_token(self, n: int) -> int:
        """Reserved id for decoder index ``n`` (0-based)."""
        if not 0 <= n < self.n_index_tokens:
            raise IndexError(f"decoder index {n} outside the {self.n_index_tokens} reserved tokens")
        return self.FIRST_INDEX + n
