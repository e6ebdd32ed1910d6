"""Small hand-built vocabularies used by the test-suite, the bundled data and examples."""
from __future__ import annotations

from importlib import resources
from pathlib import Path

from .vocab import Vocabulary, load_vocabulary

BUILTIN_VOCABS = ("revolution", "synthetic")

# Merge order that makes "revolution" a single canonical token while leaving
# "revol" and "volution" out of the vocabulary.
REVOLUTION_MERGES = [
    (b"r", b"e"),
    (b"o", b"l"),
    (b"o", b"n"),
    (b"i", b"on"),
    (b"u", b"t"),
    (b"ut", b"ion"),
    (b"ol", b"ution"),
    (b"re", b"v"),
    (b"rev", b"olution"),
    (b"v", b"ol"),
]


def revolution_vocab() -> Vocabulary:
    """Byte vocabulary extended with the subwords of "revolution" used in the examples."""
    return Vocabulary.build(_tokens_from_merges(REVOLUTION_MERGES), REVOLUTION_MERGES)


def background_vocab() -> Vocabulary:
    """Single letters plus re, v, ol, ution, revolution, without merge rules."""
    letters = [bytes([c]) for c in range(ord("a"), ord("z") + 1)]
    return Vocabulary.build(letters + [b"re", b"v", b"ol", b"ution", b"revolution"])


def chain_merges(word: bytes) -> list[tuple[bytes, bytes]]:
    """Left-branching merges that build ``word`` one byte at a time."""
    return [(word[:i], word[i:i + 1]) for i in range(1, len(word))]


def chain_vocab(words, extra=()) -> Vocabulary:
    """Vocabulary whose merges build every word left to right, plus unmerged ``extra`` tokens."""
    merges: list[tuple[bytes, bytes]] = []
    seen = set()
    for w in words:
        for m in chain_merges(w):
            if m not in seen:
                seen.add(m)
                merges.append(m)
    tokens = _tokens_from_merges(merges) + [t for t in extra if len(t) > 1]
    return Vocabulary.build(list(dict.fromkeys(tokens)), merges)


def all_substrings_vocab(words) -> Vocabulary:
    """Every substring of every word is a token; each word is its own canonical token."""
    subs = []
    for w in words:
        n = len(w)
        subs.extend(w[i:j] for i in range(n) for j in range(i + 2, n + 1))
    return chain_vocab(words, extra=subs)


def dyadic_vocab(word: bytes) -> Vocabulary:
    """Tokens are the aligned power-of-two blocks of ``word`` (length a power of two, distinct bytes).

    Every block splits only into its two halves, so a block of length 2**d
    stays splittable for d - 1 further levels.
    """
    n = len(word)
    if n & (n - 1) or len(set(word)) != n:
        raise ValueError("word needs a power-of-two length and distinct bytes")
    merges = []
    size = 1
    while size < n:
        merges.extend((word[a:a + size], word[a + size:a + 2 * size]) for a in range(0, n, 2 * size))
        size *= 2
    return Vocabulary.build(_tokens_from_merges(merges), merges)


def _tokens_from_merges(merges) -> list[bytes]:
    out = []
    for a, b in merges:
        out.extend([a, b, a + b])
    return list(dict.fromkeys(t for t in out if len(t) > 1))


def data_path(name: str) -> Path:
    return Path(str(resources.files("stoktok") / "data" / name))


def builtin_vocab(name: str) -> Vocabulary:
    """Load one of the bundled vocabularies (see ``BUILTIN_VOCABS``)."""
    if name not in BUILTIN_VOCABS:
        raise ValueError(f"unknown builtin vocabulary {name!r}")
    return load_vocabulary(data_path(f"{name}_vocab.json"), data_path(f"{name}_merges.txt"))


def synthetic_dataset():
    """The bundled 20-question multiple-choice set that goes with the ``synthetic`` vocabulary."""
    from .adversarial import load_dataset

    return load_dataset(data_path("synthetic_mcq.jsonl"))
