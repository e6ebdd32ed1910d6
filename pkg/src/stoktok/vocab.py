"""Byte-level BPE vocabulary, canonical encoding and decoding, split maps, BPE-dropout."""
from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


class VocabularyError(ValueError):
    """Raised for malformed vocabulary or merges input."""


# ---------------------------------------------------------------------------
# byte escaping used by vocab.json / merges.txt / CLI output

_ESCAPE_RE = re.compile(r"\\(x[0-9a-fA-F]{2}|\\)")


def escape_bytes(data: bytes) -> str:
    """Render bytes as printable ASCII; everything else becomes ``\\xHH``."""
    out = []
    for b in data:
        if b == 0x5C:
            out.append("\\\\")
        elif 0x21 <= b <= 0x7E:
            out.append(chr(b))
        else:
            out.append(f"\\x{b:02x}")
    return "".join(out)


def unescape_bytes(text: str) -> bytes:
    """Inverse of :func:`escape_bytes`. Non-ASCII characters are taken as UTF-8."""
    out = bytearray()
    pos = 0
    for m in _ESCAPE_RE.finditer(text):
        out += text[pos:m.start()].encode("utf-8")
        esc = m.group(1)
        out += b"\\" if esc == "\\" else bytes([int(esc[1:], 16)])
        pos = m.end()
    tail = text[pos:]
    if "\\" in tail:
        raise VocabularyError(f"bad escape in token {text!r}")
    out += tail.encode("utf-8")
    return bytes(out)


# ---------------------------------------------------------------------------
# core types


class Trie:
    """Byte trie over token strings, used to find every token starting at a position."""

    __slots__ = ("_root",)

    def __init__(self, items: Iterable[tuple[bytes, int]] = ()):
        self._root: dict = {}
        for key, value in items:
            self.insert(key, value)

    def insert(self, key: bytes, value: int) -> None:
        node = self._root
        for b in key:
            node = node.setdefault(b, {})
        node[None] = value

    def prefixes(self, data: bytes, start: int = 0, end: int | None = None):
        """Yield ``(stop, value)`` for every key equal to ``data[start:stop]``, shortest first."""
        end = len(data) if end is None else end
        node = self._root
        i = start
        while i < end:
            node = node.get(data[i])
            if node is None:
                return
            i += 1
            if None in node:
                yield i, node[None]


@dataclass(frozen=True)
class Vocabulary:
    """Token id <-> byte-string table plus ordered merge rules.

    Use :meth:`build` rather than the constructor; it validates and completes
    the 256 single-byte base tokens.
    """

    tokens: dict[int, bytes]
    ids: dict[bytes, int]
    merges: tuple[tuple[int, int, int], ...]
    byte_tokens: tuple[int, ...]
    trie: Trie = field(repr=False, compare=False)
    ranks: dict[tuple[int, int], tuple[int, int]] = field(repr=False, compare=False)
    max_token_len: int = 1

    @classmethod
    def build(
        cls,
        tokens: dict[bytes, int] | Iterable[bytes],
        merges: Sequence[tuple[bytes, bytes]] = (),
    ) -> "Vocabulary":
        if isinstance(tokens, dict):
            table = dict(tokens)
        else:
            table = {}
            for tok in tokens:
                if tok not in table:
                    table[tok] = len(table)
        by_id: dict[int, bytes] = {}
        for tok, idx in table.items():
            if not isinstance(tok, bytes) or not tok:
                raise VocabularyError(f"token must be non-empty bytes, got {tok!r}")
            if idx in by_id:
                raise VocabularyError(f"duplicate id {idx} for {tok!r} and {by_id[idx]!r}")
            by_id[idx] = tok
        next_id = max(by_id, default=-1) + 1
        byte_ids = []
        for b in range(256):
            key = bytes([b])
            if key not in table:
                table[key] = next_id
                by_id[next_id] = key
                next_id += 1
            byte_ids.append(table[key])

        derivable = {bytes([b]) for b in range(256)}
        merge_list = []
        ranks = {}
        for rank, (left, right) in enumerate(merges):
            for part in (left, right):
                if part not in table:
                    raise VocabularyError(f"merge {rank} references unknown token {part!r}")
                if part not in derivable:
                    raise VocabularyError(
                        f"merge {rank} uses {part!r} before any merge produces it"
                    )
            joined = left + right
            if joined not in table:
                raise VocabularyError(
                    f"merge {rank}: {left!r} + {right!r} = {joined!r} is not in the vocabulary"
                )
            pair = (table[left], table[right])
            if pair in ranks:
                raise VocabularyError(f"duplicate merge {left!r} {right!r} at line {rank}")
            ranks[pair] = (rank, table[joined])
            merge_list.append((pair[0], pair[1], table[joined]))
            derivable.add(joined)

        return cls(
            tokens=by_id,
            ids=table,
            merges=tuple(merge_list),
            byte_tokens=tuple(byte_ids),
            trie=Trie(table.items()),
            ranks=ranks,
            max_token_len=max(len(t) for t in table),
        )

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, item: bytes) -> bool:
        return item in self.ids

    def token_bytes(self, idx: int) -> bytes:
        try:
            return self.tokens[idx]
        except KeyError:
            raise VocabularyError(f"unknown token id {idx}") from None

    def to_json(self) -> str:
        return json.dumps({escape_bytes(t): i for i, t in sorted(self.tokens.items())}, indent=1)

    def merges_text(self) -> str:
        lines = [f"{escape_bytes(self.tokens[a])} {escape_bytes(self.tokens[b])}" for a, b, _ in self.merges]
        return "".join(line + "\n" for line in lines)


@dataclass(frozen=True)
class TokenSeq:
    """Token ids together with the half-open byte spans they cover."""

    ids: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]

    @classmethod
    def from_ids(cls, ids: Iterable[int], vocab: Vocabulary, offset: int = 0) -> "TokenSeq":
        ids = tuple(ids)
        spans = []
        pos = offset
        for i in ids:
            n = len(vocab.token_bytes(i))
            spans.append((pos, pos + n))
            pos += n
        return cls(ids, tuple(spans))

    @classmethod
    def concat(cls, parts: Iterable["TokenSeq"]) -> "TokenSeq":
        """Concatenate sequences, re-basing spans so they stay contiguous."""
        ids: list[int] = []
        spans: list[tuple[int, int]] = []
        pos = 0
        for part in parts:
            base = part.spans[0][0] if part.spans else 0
            for i, (s, e) in zip(part.ids, part.spans):
                ids.append(i)
                spans.append((pos + s - base, pos + e - base))
            if part.spans:
                pos += part.spans[-1][1] - base
        return cls(tuple(ids), tuple(spans))

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    @property
    def end(self) -> int:
        return self.spans[-1][1] if self.spans else 0

    def key(self) -> str:
        """Stable hyphen-joined id serialisation, used as histogram key."""
        return "-".join(map(str, self.ids))

    def boundaries(self) -> frozenset[int]:
        return frozenset(e for _, e in self.spans[:-1])

    def check(self, text: bytes, vocab: Vocabulary) -> None:
        """Assert the span invariants against ``text``."""
        pos = 0
        for i, (s, e) in zip(self.ids, self.spans):
            if s != pos or text[s:e] != vocab.token_bytes(i):
                raise AssertionError(f"token {i} at span {(s, e)} does not match text")
            pos = e
        if pos != len(text):
            raise AssertionError(f"spans cover {pos} of {len(text)} bytes")


@dataclass(frozen=True)
class SplitMap:
    """Every decomposition of each token into 2 (arity 2) or 2 and 3 (arity 3) tokens."""

    vocab: Vocabulary
    arity: int
    table: dict[int, tuple[tuple[int, ...], ...]]

    def __getitem__(self, token_id: int) -> tuple[tuple[int, ...], ...]:
        return self.table.get(token_id, ())


# ---------------------------------------------------------------------------
# file loading


def load_vocabulary(vocab_file: str | Path, merges_file: str | Path | None = None) -> Vocabulary:
    """Load a vocab.json (escaped token -> id) and merges.txt ("LEFT RIGHT" per line)."""
    with open(vocab_file, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise VocabularyError("vocab file must contain a JSON object")
    table: dict[bytes, int] = {}
    for key, idx in raw.items():
        if not isinstance(idx, int) or idx < 0:
            raise VocabularyError(f"id for {key!r} must be a non-negative integer")
        tok = unescape_bytes(key)
        if tok in table:
            raise VocabularyError(f"token {key!r} listed twice")
        table[tok] = idx
    merges: list[tuple[bytes, bytes]] = []
    if merges_file is not None:
        with open(merges_file, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\r\n")
                if not line.strip() or line.startswith("#"):
                    continue
                parts = line.split(" ")
                if len(parts) != 2 or not all(parts):
                    raise VocabularyError(f"{merges_file}:{lineno}: expected 'LEFT RIGHT'")
                merges.append((unescape_bytes(parts[0]), unescape_bytes(parts[1])))
    return Vocabulary.build(table, merges)


def save_vocabulary(vocab: Vocabulary, vocab_file: str | Path, merges_file: str | Path) -> None:
    Path(vocab_file).write_text(vocab.to_json() + "\n", encoding="utf-8")
    Path(merges_file).write_text(vocab.merges_text(), encoding="utf-8")


# ---------------------------------------------------------------------------
# pretokenisation

_PRETOKEN_RE = re.compile(rb"\s*\S+|\s+")


def pretokenise(text: bytes) -> list[tuple[int, int]]:
    """Whitespace-boundary chunks; whitespace attaches to the following word."""
    return [m.span() for m in _PRETOKEN_RE.finditer(text)]


def chunk_spans(text: bytes, enabled: bool) -> list[tuple[int, int]]:
    if not text:
        return []
    return pretokenise(text) if enabled else [(0, len(text))]


def chunk_boundaries(text: bytes, enabled: bool) -> frozenset[int]:
    return frozenset(e for _, e in chunk_spans(text, enabled)[:-1])


# ---------------------------------------------------------------------------
# encoding / decoding


def _bpe_chunk(chunk: bytes, vocab: Vocabulary, p_drop: float, rng: random.Random | None) -> list[int]:
    seq = [vocab.byte_tokens[b] for b in chunk]
    ranks = vocab.ranks
    while len(seq) > 1:
        best = None
        candidates = []
        for i in range(len(seq) - 1):
            r = ranks.get((seq[i], seq[i + 1]))
            if r is None:
                continue
            if p_drop > 0 and rng.random() < p_drop:
                continue
            candidates.append(i)
            if best is None or r[0] < best[0]:
                best = r
        if best is None:
            break
        pair_rank, merged = best
        allowed = set(candidates)
        out = []
        i = 0
        while i < len(seq):
            if (
                i in allowed
                and i + 1 < len(seq)
                and ranks.get((seq[i], seq[i + 1]), (None,))[0] == pair_rank
            ):
                out.append(merged)
                i += 2
            else:
                out.append(seq[i])
                i += 1
        seq = out
    return seq


def _encode(text: bytes, vocab: Vocabulary, pretokenise_: bool, p_drop: float, rng) -> TokenSeq:
    ids: list[int] = []
    for s, e in chunk_spans(text, pretokenise_):
        ids.extend(_bpe_chunk(text[s:e], vocab, p_drop, rng))
    return TokenSeq.from_ids(ids, vocab)


def encode_canonical(text: bytes, vocab: Vocabulary, pretokenise: bool = False) -> TokenSeq:
    """Deterministic BPE: repeatedly apply the highest-priority merge inside each chunk."""
    return _encode(text, vocab, pretokenise, 0.0, None)


def bpe_dropout_encode(
    text: bytes,
    p_drop: float,
    rng: random.Random,
    vocab: Vocabulary,
    pretokenise: bool = False,
) -> TokenSeq:
    """BPE where every applicable merge occurrence is skipped with probability ``p_drop``.

    Merging stops as soon as every candidate in a round was dropped, as in the
    original BPE-dropout procedure.
    """
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")
    return _encode(text, vocab, pretokenise, p_drop, rng)


def decode(seq: TokenSeq | Iterable[int], vocab: Vocabulary) -> bytes:
    ids = seq.ids if isinstance(seq, TokenSeq) else seq
    return b"".join(vocab.token_bytes(i) for i in ids)


# ---------------------------------------------------------------------------
# split maps


def build_split_map(vocab: Vocabulary, arity: int = 2) -> SplitMap:
    """All decompositions of each token into vocabulary tokens.

    ``arity=2`` gives pairs; ``arity=3`` gives pairs followed by triples.
    Decompositions are ordered by split point(s).
    """
    if arity not in (2, 3):
        raise ValueError("arity must be 2 or 3 (2-way plus 3-way)")
    ids = vocab.ids
    table: dict[int, tuple[tuple[int, ...], ...]] = {}
    for idx, tok in vocab.tokens.items():
        n = len(tok)
        if n < 2:
            continue
        found: list[tuple[int, ...]] = []
        for p in range(1, n):
            a = ids.get(tok[:p])
            if a is None:
                continue
            b = ids.get(tok[p:])
            if b is not None:
                found.append((a, b))
        if arity == 3:
            for p in range(1, n - 1):
                a = ids.get(tok[:p])
                if a is None:
                    continue
                for q in range(p + 1, n):
                    b = ids.get(tok[p:q])
                    if b is None:
                        continue
                    c = ids.get(tok[q:])
                    if c is not None:
                        found.append((a, b, c))
        if found:
            table[idx] = tuple(found)
    return SplitMap(vocab, arity, table)
