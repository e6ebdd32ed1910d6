"""Tokenisation neighbourhoods, greedy adversarial search and MCQ accuracy harness."""
from __future__ import annotations

import json
import random
import socket
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence, runtime_checkable

from .enumeration import build_dag, sample_uniform
from .metrics import span_distance
from .samplers import Sampler, SamplerSpec
from .seeding import MASK64, item_rng, mix, splitmix64
from .vocab import TokenSeq, Vocabulary, chunk_boundaries, encode_canonical


class ScorerError(RuntimeError):
    """The scorer failed or its transport broke."""


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class McqInstance:
    question: bytes
    options: tuple[bytes, ...]
    label: int

    def __post_init__(self):
        if len(self.options) < 2:
            raise ValueError("an MCQ needs at least two options")
        if any(not o for o in self.options):
            raise ValueError("options must be non-empty")
        if not 0 <= self.label < len(self.options):
            raise ValueError(f"label {self.label} out of range for {len(self.options)} options")

    @classmethod
    def from_json(cls, obj: dict) -> "McqInstance":
        return cls(
            obj["question"].encode("utf-8"),
            tuple(o.encode("utf-8") for o in obj["options"]),
            int(obj["label"]),
        )


def load_dataset(path: str | Path) -> list[McqInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(McqInstance.from_json(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


@dataclass(frozen=True)
class AttackConfig:
    max_steps: int = 10
    radius: int = 2
    init: str = "canonical"
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.radius < 2 or self.radius % 2:
            raise ValueError("radius must be an even number >= 2")
        if self.init not in ("canonical", "uniform-random"):
            raise ValueError("init must be 'canonical' or 'uniform-random'")


@dataclass
class AttackResult:
    start: TokenSeq
    final: TokenSeq
    margins: list[float]
    iterations: int
    success: bool
    clean_correct: bool
    adversarial_correct: bool
    distance_from_start: int
    distance_from_canonical: int

    def to_json(self, index: int | None = None) -> dict:
        out = {
            "v": 1,
            "final_ids": list(self.final.ids),
            "start_ids": list(self.start.ids),
            "margins": self.margins,
            "iterations": self.iterations,
            "success": self.success,
            "clean_correct": self.clean_correct,
            "adversarial_correct": self.adversarial_correct,
            "distance_from_start": self.distance_from_start,
            "distance_from_canonical": self.distance_from_canonical,
        }
        if index is not None:
            out = {"index": index, **out}
        return out


# ---------------------------------------------------------------------------
# scorers


@runtime_checkable
class Scorer(Protocol):
    """score(context ids, continuation ids) -> log-probability; must be deterministic."""

    single_flight: bool

    def score(self, context: Sequence[int], continuation: Sequence[int]) -> float: ...


class ConstantScorer:
    single_flight = False

    def __init__(self, value: float = 0.0):
        self.value = value

    def score(self, context, continuation) -> float:
        return self.value


class LengthPenaltyScorer:
    """Favoured continuations score ``bias - lam * len(context)``; all others score 0.

    A question is answered correctly while its tokenisation has fewer than
    ``bias / lam`` tokens, so splitting tokens is the attacker's best move.
    """

    single_flight = False

    def __init__(self, favoured: Iterable[Sequence[int]] = (), lam: float = 0.125, bias: float = 1.25):
        self.favoured = {tuple(f) for f in favoured}
        self.lam = lam
        self.bias = bias

    def score(self, context, continuation) -> float:
        if tuple(continuation) in self.favoured:
            return self.bias - self.lam * len(tuple(context))
        return 0.0


class HashNgramScorer:
    """Deterministic rugged landscape: hashed bigrams of context + continuation, keyed by seed."""

    single_flight = False

    def __init__(self, seed: int = 0):
        self.seed = seed

    def score(self, context, continuation) -> float:
        seq = list(context) + list(continuation)
        if len(seq) < 2:
            return 0.0
        head = splitmix64(mix(self.seed, *continuation))
        total = 0.0
        for a, b in zip(seq, seq[1:]):
            total += splitmix64(head ^ mix(a, b)) / (MASK64 + 1)
        return -total / (len(seq) - 1)


def toy_scorer(kind: str, seed: int = 0, **params) -> Scorer:
    if kind == "constant":
        return ConstantScorer(**params)
    if kind == "length-penalty":
        return LengthPenaltyScorer(**params)
    if kind == "hash-ngram":
        return HashNgramScorer(seed)
    raise ValueError(f"unknown toy scorer {kind!r}")


class _LineScorer:
    """Shared request/response loop for the JSON-lines scorer protocol."""

    single_flight = True

    def __init__(self):
        self._lock = threading.Lock()

    def _roundtrip(self, line: str) -> str:  # pragma: no cover - overridden
        raise NotImplementedError

    def score(self, context, continuation) -> float:
        request = json.dumps({"context": list(context), "continuation": list(continuation)})
        with self._lock:
            try:
                reply = self._roundtrip(request)
            except OSError as exc:
                raise ScorerError(f"scorer transport failed: {exc}") from exc
        if not reply:
            raise ScorerError("scorer closed the connection")
        try:
            value = float(json.loads(reply)["logprob"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ScorerError(f"bad scorer response {reply!r}") from exc
        return value


class ProcessScorer(_LineScorer):
    """Talks to a subprocess over stdin/stdout, one JSON object per line."""

    def __init__(self, cmd: Sequence[str]):
        super().__init__()
        try:
            self._proc = subprocess.Popen(
                list(cmd), stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
            )
        except OSError as exc:
            raise ScorerError(f"cannot start scorer {cmd!r}: {exc}") from exc

    def _roundtrip(self, line: str) -> str:
        self._proc.stdin.write(line + "\n")
        self._proc.stdin.flush()
        return self._proc.stdout.readline()

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)


class SocketScorer(_LineScorer):
    """Talks to a TCP server, one JSON object per line."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        super().__init__()
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ScorerError(f"cannot connect to scorer at {host}:{port}: {exc}") from exc
        self._rfile = self._sock.makefile("r", encoding="utf-8")
        self._wfile = self._sock.makefile("w", encoding="utf-8")

    def _roundtrip(self, line: str) -> str:
        self._wfile.write(line + "\n")
        self._wfile.flush()
        return self._rfile.readline()

    def close(self) -> None:
        self._sock.close()


def serve_lines(scorer: Scorer, infile, outfile) -> None:
    """Answer protocol requests from ``infile`` until EOF."""
    for line in infile:
        if not line.strip():
            continue
        try:
            req = json.loads(line)
            reply = {"logprob": scorer.score(tuple(req["context"]), tuple(req["continuation"]))}
        except (ValueError, KeyError, TypeError) as exc:
            reply = {"error": f"bad request: {exc}"}
        outfile.write(json.dumps(reply) + "\n")
        outfile.flush()


# ---------------------------------------------------------------------------
# neighbourhoods


def _crosses(boundaries: frozenset[int], start: int, stop: int) -> bool:
    return any(start < b < stop for b in boundaries)


def _radius2(v: TokenSeq, text: bytes, vocab: Vocabulary, boundaries: frozenset[int]) -> list[TokenSeq]:
    """Tokenisations within distance 2 of ``v`` via local moves, in deterministic order.

    Moves per start position i: merge a run v[i..j] into one token (distance 1);
    re-segment a run v[i..j] into two tokens that are not spans of v
    (distance 2, a split when j == i); merge two non-adjacent runs (distance 2).
    """
    ids, spans = v.ids, v.spans
    n = len(ids)
    lookup = vocab.ids.get
    maxlen = vocab.max_token_len
    out = [v]
    seen = {ids}

    def emit(new_ids: tuple[int, ...]) -> None:
        if new_ids not in seen:
            seen.add(new_ids)
            out.append(TokenSeq.from_ids(new_ids, vocab))

    merges: list[tuple[int, int, int]] = []
    for i in range(n):
        start = spans[i][0]
        for j in range(i + 1, n):
            stop = spans[j][1]
            if stop - start > maxlen or _crosses(boundaries, start, stop):
                break
            t = lookup(text[start:stop])
            if t is not None:
                merges.append((i, j, t))
    merges_at: dict[int, list[tuple[int, int, int]]] = {}
    for m in merges:
        merges_at.setdefault(m[0], []).append(m)

    for i in range(n):
        start = spans[i][0]
        for _, j, t in merges_at.get(i, ()):
            emit(ids[:i] + (t,) + ids[j + 1:])
        for j in range(i, n):
            stop = spans[j][1]
            if stop - start > 2 * maxlen or _crosses(boundaries, start, stop):
                break
            for p in range(max(start + 1, stop - maxlen), min(stop, start + maxlen + 1)):
                if (start, p) == spans[i] or (p, stop) == spans[j]:
                    continue
                a = lookup(text[start:p])
                if a is None:
                    continue
                b = lookup(text[p:stop])
                if b is not None:
                    emit(ids[:i] + (a, b) + ids[j + 1:])
        for _, j, t in merges_at.get(i, ()):
            for k in range(j + 2, n):
                for _, l, t2 in merges_at.get(k, ()):
                    emit(ids[:i] + (t,) + ids[j + 1:k] + (t2,) + ids[l + 1:])
    return out


def neighbourhood(
    v: TokenSeq,
    text: bytes,
    vocab: Vocabulary,
    radius: int = 2,
    pretokenise: bool = False,
) -> list[TokenSeq]:
    """All tokenisations within ``radius`` of ``v`` (``v`` itself first).

    Radius 2 is exact. Larger even radii are the deduplicated closure of
    radius/2 radius-2 steps.
    """
    if radius < 2 or radius % 2:
        raise ValueError("radius must be an even number >= 2")
    if v.end != len(text):
        raise ValueError("tokenisation does not cover the text")
    boundaries = chunk_boundaries(text, pretokenise)
    frontier = [v]
    out = [v]
    seen = {v.ids}
    for _ in range(radius // 2):
        nxt = []
        for u in frontier:
            for w in _radius2(u, text, vocab, boundaries):
                if w.ids not in seen:
                    seen.add(w.ids)
                    out.append(w)
                    nxt.append(w)
        frontier = nxt
    return out


# ---------------------------------------------------------------------------
# scoring and attack


def _context(v: TokenSeq, prefix: TokenSeq | None) -> tuple[int, ...]:
    return v.ids if prefix is None else prefix.ids + v.ids


def option_scores(scorer: Scorer, v: TokenSeq, option_seqs: Sequence[TokenSeq], prefix=None) -> list[float]:
    ctx = _context(v, prefix)
    return [scorer.score(ctx, o.ids) for o in option_seqs]


def predict(scorer: Scorer, v: TokenSeq, option_seqs: Sequence[TokenSeq], prefix=None) -> int:
    scores = option_scores(scorer, v, option_seqs, prefix)
    return max(range(len(scores)), key=lambda c: (scores[c], -c))


def margin(scorer: Scorer, v: TokenSeq, option_seqs: Sequence[TokenSeq], y: int, prefix=None) -> float:
    """Best wrong-option score minus true-option score; positive means misclassified."""
    if len(option_seqs) < 2:
        raise ValueError("need at least two options")
    scores = option_scores(scorer, v, option_seqs, prefix)
    return max(s for c, s in enumerate(scores) if c != y) - scores[y]


def greedy_attack(
    scorer: Scorer,
    instance: McqInstance,
    cfg: AttackConfig,
    vocab: Vocabulary,
    pretokenise: bool = False,
    rng: random.Random | None = None,
    prefix: TokenSeq | None = None,
) -> AttackResult:
    """Hill-climb the margin over tokenisation neighbourhoods of the question.

    Options keep their canonical tokenisation. Ties go to the first neighbour in
    enumeration order; the search stops after ``max_steps`` or at a local optimum.
    """
    x = instance.question
    y = instance.label
    canonical = encode_canonical(x, vocab, pretokenise)
    options = [encode_canonical(o, vocab, pretokenise) for o in instance.options]
    if cfg.init == "canonical":
        v0 = canonical
    else:
        rng = rng if rng is not None else random.Random(cfg.seed)
        v0 = sample_uniform(build_dag(x, vocab, pretokenise), rng, vocab)
    v = v0
    current = margin(scorer, v, options, y, prefix)
    margins = [current]
    iterations = 0
    for _ in range(cfg.max_steps):
        iterations += 1
        best, best_margin = None, None
        for u in neighbourhood(v, x, vocab, cfg.radius, pretokenise):
            m = margin(scorer, u, options, y, prefix)
            if best_margin is None or m > best_margin:
                best, best_margin = u, m
        if best_margin <= current:
            break
        v, current = best, best_margin
        margins.append(current)
    clean_ok = predict(scorer, canonical, options, prefix) == y
    start_ok = predict(scorer, v0, options, prefix) == y
    adv_ok = predict(scorer, v, options, prefix) == y
    return AttackResult(
        start=v0,
        final=v,
        margins=margins,
        iterations=iterations,
        success=start_ok and not adv_ok,
        clean_correct=clean_ok,
        adversarial_correct=adv_ok,
        distance_from_start=span_distance(v0, v),
        distance_from_canonical=span_distance(canonical, v),
    )


class _Serialised:
    """Wraps a single-flight scorer with a lock so concurrent attacks can share it."""

    single_flight = True

    def __init__(self, inner: Scorer):
        self.inner = inner
        self._lock = threading.Lock()

    def score(self, context, continuation) -> float:
        with self._lock:
            return self.inner.score(context, continuation)


def _fan_out(fn: Callable, items: list, parallel: int) -> list:
    if parallel <= 1 or len(items) <= 1:
        return [fn(i, item) for i, item in enumerate(items)]
    with ThreadPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(fn, range(len(items)), items))


def adversarial_accuracy(
    scorer: Scorer,
    dataset: Sequence[McqInstance],
    cfg: AttackConfig,
    vocab: Vocabulary,
    pretokenise: bool = False,
    parallel: int = 1,
) -> tuple[float, float, list[AttackResult]]:
    """Clean accuracy on canonical questions and accuracy after the greedy attack.

    Random initialisations use a per-instance generator derived from
    ``cfg.seed`` and the instance index, so results do not depend on ``parallel``.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if getattr(scorer, "single_flight", False) and parallel > 1:
        scorer = _Serialised(scorer)

    def run(i: int, inst: McqInstance) -> AttackResult:
        return greedy_attack(scorer, inst, cfg, vocab, pretokenise, rng=item_rng(cfg.seed, i))

    results = _fan_out(run, list(dataset), parallel)
    n = len(results)
    clean = sum(r.clean_correct for r in results) / n
    adv = sum(r.adversarial_correct for r in results) / n
    return clean, adv, results


def avg_accuracy(
    scorer: Scorer,
    dataset: Sequence[McqInstance],
    spec: SamplerSpec,
    draws: int,
    rng: random.Random,
    vocab: Vocabulary,
    pretokenise: bool = False,
) -> float:
    """Mean over instances of the fraction of ``draws`` sampled question tokenisations answered correctly."""
    if draws < 1 or not dataset:
        raise ValueError("need draws >= 1 and a non-empty dataset")
    sampler = Sampler(vocab, spec, pretokenise)
    total = 0.0
    for inst in dataset:
        options = [encode_canonical(o, vocab, pretokenise) for o in inst.options]
        hits = 0
        for _ in range(draws):
            v = sampler.draw(inst.question, rng).tokens
            hits += predict(scorer, v, options) == inst.label
        total += hits / draws
    return total / len(dataset)


def icl_prompt(
    context_pairs: Sequence[tuple[TokenSeq, TokenSeq]],
    query: TokenSeq,
    separator: TokenSeq,
) -> TokenSeq:
    """Lay out ``q_1 sep a_1 sep ... q_K sep a_K sep query`` with spans re-based."""
    parts: list[TokenSeq] = []
    for q, a in context_pairs:
        parts.extend([q, separator, a, separator])
    parts.append(query)
    return TokenSeq.concat(parts)
