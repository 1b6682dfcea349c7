"""Token counters. The default is an approximation: ceil(characters / 4)."""

from __future__ import annotations

from typing import Any, Callable, Protocol


class TokenCounter(Protocol):
    name: str

    def count(self, text: str) -> int: ...


class ApproxCounter:
    """Approximate counter, one token per four characters (rounded up)."""

    name = "approx-chars/4"

    def count(self, text: str) -> int:
        return (len(text) + 3) // 4


class TokenizerCounter:
    """Adapter for an exact tokenizer, e.g. a Hugging Face tokenizer's ``encode``."""

    def __init__(self, encode: Callable[[str], Any], name: str = "tokenizer") -> None:
        self._encode = encode
        self.name = name

    def count(self, text: str) -> int:
        return len(self._encode(text)) if text else 0


DEFAULT_COUNTER = ApproxCounter()
