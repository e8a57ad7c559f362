"""Character stream over a 27-symbol alphabet.

Letters map to 0-25 after lowercasing; every other byte (digits, punctuation,
whitespace, bytes >= 128) collapses to symbol 26. Iteration wraps around the
end of the text, so any non-negative position indexes the stream.
"""

from __future__ import annotations

import importlib.resources

import numpy as np

ALPHABET = 27
OTHER = 26

_TABLE = np.full(256, OTHER, dtype=np.int64)
for _i in range(26):
    _TABLE[ord("a") + _i] = _i
    _TABLE[ord("A") + _i] = _i


def encode(text):
    """Text (str or bytes) to symbol indices in [0, 27)."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return _TABLE[np.frombuffer(text, dtype=np.uint8)]


def decode(symbols):
    """Symbols back to characters; the grouped symbol renders as a space."""
    chars = np.array(list("abcdefghijklmnopqrstuvwxyz "))
    return "".join(chars[np.asarray(symbols)])


class SymbolStream:
    """Immutable wrap-around view of an encoded text."""

    def __init__(self, symbols):
        symbols = np.asarray(symbols, dtype=np.int64)
        if symbols.size == 0:
            raise ValueError("empty corpus")
        if symbols.min() < 0 or symbols.max() >= ALPHABET:
            raise ValueError("symbols outside [0, 27)")
        self.symbols = symbols
        self.symbols.setflags(write=False)

    def __len__(self):
        return int(self.symbols.size)

    def window(self, t0, length):
        """Symbols at positions t0 .. t0+length-1 modulo the text length."""
        if length < 1:
            raise ValueError(f"window length must be >= 1, got {length}")
        idx = (t0 + np.arange(length)) % self.symbols.size
        return self.symbols[idx]

    def histogram(self):
        return np.bincount(self.symbols, minlength=ALPHABET)


def load_corpus(data):
    """Build a stream from raw text; empty input is an error."""
    if isinstance(data, (str, bytes)) and len(data) == 0:
        raise ValueError("empty corpus")
    return SymbolStream(encode(data))


def load_corpus_file(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data:
        raise ValueError(f"empty corpus file: {path}")
    return load_corpus(data)


def fallback_corpus():
    """Small bundled English text for tests and demos."""
    data = importlib.resources.files("plasticnet").joinpath("data/fallback_corpus.txt").read_bytes()
    return load_corpus(data)
