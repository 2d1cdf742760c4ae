"""Byte-level corpus: loading, a seeded synthetic text generator, and windowing.

A corpus path of the form ``builtin:synthetic`` (optionally
``builtin:synthetic:<n_bytes>:<seed>``) is generated in memory instead of
read from disk, so presets need no external data.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..numkernel import Rng

BUILTIN_PREFIX = "builtin:synthetic"
DEFAULT_SYNTHETIC_BYTES = 2_000_000
DEFAULT_SYNTHETIC_SEED = 1234


class CorpusError(ValueError):
    """The corpus cannot supply the requested windows."""


_NOUNS = ("river", "lantern", "garden", "merchant", "harbor", "mountain", "scholar", "window",
          "village", "engine", "letter", "forest", "captain", "bridge", "orchard", "signal",
          "teacher", "market", "valley", "kettle", "farmer", "tower", "ledger", "meadow")
_ADJS = ("quiet", "old", "bright", "narrow", "heavy", "patient", "distant", "small", "green",
         "careful", "broken", "warm", "silver", "early", "simple", "hollow")
_VERBS = (("watches", "watched"), ("finds", "found"), ("carries", "carried"), ("follows", "followed"),
          ("builds", "built"), ("remembers", "remembered"), ("opens", "opened"), ("crosses", "crossed"),
          ("counts", "counted"), ("mends", "mended"), ("paints", "painted"), ("leaves", "left"))
_PREPS = ("near", "under", "beyond", "beside", "across", "behind", "toward")
_ADVS = ("slowly", "again", "at dawn", "before noon", "in silence", "each winter", "without rest")
_CONJ = ("and", "but", "because", "while", "so")
_NUMBERS = ("two", "three", "four", "seven", "twelve", "forty")


def _noun_phrase(g: np.random.Generator) -> str:
    parts = ["the"]
    if g.random() < 0.5:
        parts.append(_ADJS[g.integers(len(_ADJS))])
    noun = _NOUNS[g.integers(len(_NOUNS))]
    if g.random() < 0.2:
        parts[0] = _NUMBERS[g.integers(len(_NUMBERS))]
        noun += "s"
    parts.append(noun)
    if g.random() < 0.25:
        parts += [_PREPS[g.integers(len(_PREPS))], "the", _NOUNS[g.integers(len(_NOUNS))]]
    return " ".join(parts)


def _clause(g: np.random.Generator, past: bool) -> str:
    verb = _VERBS[g.integers(len(_VERBS))][1 if past else 0]
    words = [_noun_phrase(g), verb, _noun_phrase(g)]
    if g.random() < 0.4:
        words.append(_ADVS[g.integers(len(_ADVS))])
    return " ".join(words)


def synthetic_text(n_bytes: int = DEFAULT_SYNTHETIC_BYTES, seed: int = DEFAULT_SYNTHETIC_SEED) -> bytes:
    """Deterministic English-like text from a small stochastic grammar."""
    g = Rng(seed, "corpus").generator
    chunks: list[str] = []
    size = 0
    while size < n_bytes:
        past = bool(g.random() < 0.5)
        sentence = _clause(g, past)
        if g.random() < 0.35:
            sentence += f", {_CONJ[g.integers(len(_CONJ))]} {_clause(g, past)}"
        sentence = sentence[0].upper() + sentence[1:] + ("." if g.random() < 0.85 else "?")
        end = "\n\n" if g.random() < 0.1 else " "
        piece = sentence + end
        chunks.append(piece)
        size += len(piece)
    return "".join(chunks).encode("ascii")[:n_bytes]


def load_corpus(path) -> np.ndarray:
    """Corpus bytes as an int64 token array."""
    spec = str(path)
    if spec.startswith(BUILTIN_PREFIX):
        parts = spec[len(BUILTIN_PREFIX):].strip(":").split(":") if spec != BUILTIN_PREFIX else []
        n_bytes = int(parts[0]) if parts and parts[0] else DEFAULT_SYNTHETIC_BYTES
        seed = int(parts[1]) if len(parts) > 1 else DEFAULT_SYNTHETIC_SEED
        raw = synthetic_text(n_bytes, seed)
    else:
        raw = Path(path).read_bytes()
    if not raw:
        raise CorpusError(f"corpus {spec!r} is empty")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


@dataclass(frozen=True)
class Windows:
    """Corpus tiled into windows of ``seq_len + 1`` tokens with stride ``seq_len``.

    Training windows come first; held-out windows come from the tail, after a
    one-window gap so no token is shared across the split.
    """

    tokens: np.ndarray
    seq_len: int
    train_idx: np.ndarray
    heldout_idx: np.ndarray

    def window(self, i: int) -> np.ndarray:
        start = i * self.seq_len
        return self.tokens[start:start + self.seq_len + 1]

    def batch(self, idx) -> np.ndarray:
        return np.stack([self.window(int(i)) for i in idx])

    def heldout(self, start: int, count: int) -> np.ndarray:
        if start + count > self.heldout_idx.size:
            raise CorpusError(f"held-out split has {self.heldout_idx.size} windows, need {start + count}")
        return self.batch(self.heldout_idx[start:start + count])


def make_windows(tokens: np.ndarray, seq_len: int, heldout_windows: int) -> Windows:
    if seq_len < 1:
        raise CorpusError(f"seq_len must be >= 1, got {seq_len}")
    total = (tokens.size - 1) // seq_len
    n_train = total - heldout_windows - 1
    if n_train < 1:
        raise CorpusError(f"corpus of {tokens.size} tokens gives {total} windows of length {seq_len + 1}; "
                          f"need at least {heldout_windows + 2}")
    train_idx = np.arange(n_train)
    heldout_idx = np.arange(n_train + 1, n_train + 1 + heldout_windows)
    return Windows(tokens, seq_len, train_idx, heldout_idx)
