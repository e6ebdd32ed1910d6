"""Stochastic tokenisation schemes: (text, parameters, rng) -> TokenSeq."""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, fields
from fractions import Fraction
from functools import lru_cache
from typing import Any, Mapping

from .enumeration import (
    ALL_SEGMENTATIONS,
    TREE_MODES,
    DistanceDag,
    InfeasibleError,
    SegmentationDag,
    SegmentForest,
    build_dag,
    build_distance_dag,
    sample_uniform,
    sample_uniform_distance,
    sample_uniform_segments,
)
from .metrics import SplitCounts, coeff, poly_mul, split_count_polynomials
from .vocab import (
    SplitMap,
    TokenSeq,
    Vocabulary,
    bpe_dropout_encode,
    build_split_map,
    encode_canonical,
)

SCHEMES = ("canonical", "stochastok", "stochastok-uni", "uniform-k", "uniform", "bpe-dropout")

# parameter -> schemes that use it
_RELEVANT = {
    "alpha": {"stochastok", "stochastok-uni"},
    "k": {"uniform-k"},
    "p_drop": {"bpe-dropout"},
    "k_max": {"stochastok"},
    "retry": {"stochastok"},
    "arity": {"stochastok"},
    "tree_mode": {"stochastok-uni"},
}
_REQUIRED = {"stochastok": ("alpha",), "stochastok-uni": ("alpha",), "uniform-k": ("k",), "bpe-dropout": ("p_drop",)}


@dataclass(frozen=True)
class SamplerSpec:
    scheme: str = "canonical"
    alpha: float | None = None
    k: int | None = None
    p_drop: float | None = None
    k_max: int | None = None
    tree_mode: str = ALL_SEGMENTATIONS
    arity: int = 2
    retry: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        defaults = {f.name: f.default for f in fields(self)}
        for name, schemes in _RELEVANT.items():
            value = getattr(self, name)
            if self.scheme not in schemes and value != defaults[name]:
                raise ValueError(f"{name} is not a parameter of scheme {self.scheme!r}")
        for name in _REQUIRED.get(self.scheme, ()):
            if getattr(self, name) is None:
                raise ValueError(f"scheme {self.scheme!r} requires {name}")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.p_drop is not None and not 0 <= self.p_drop <= 1:
            raise ValueError("p_drop must lie in [0, 1]")
        if self.k is not None and self.k < 0:
            raise ValueError("k must be >= 0")
        if self.k_max is not None and self.k_max < 0:
            raise ValueError("k_max must be >= 0")
        if self.tree_mode not in TREE_MODES:
            raise ValueError(f"tree_mode must be one of {TREE_MODES}")
        if self.arity not in (2, 3):
            raise ValueError("arity must be 2 or 3")

    def to_config(self) -> dict[str, str]:
        """Flat key/value form holding only the fields that differ from their defaults."""
        out = {"scheme": self.scheme}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name != "scheme" and value != f.default:
                out[f.name] = str(value).lower() if isinstance(value, bool) else str(value)
        return out

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "SamplerSpec":
        conv = {
            "alpha": float, "k": int, "p_drop": float, "k_max": int, "arity": int,
            "tree_mode": str, "scheme": str, "retry": _parse_bool,
        }
        kwargs = {}
        for key, value in cfg.items():
            key = key.replace("-", "_")
            if key not in conv:
                raise ValueError(f"unknown sampler key {key!r}")
            if value is None or value == "":
                continue
            kwargs[key] = conv[key](value)
        return cls(**kwargs)


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if str(value).lower() in ("1", "true", "yes", "on"):
        return True
    if str(value).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def n_splits(alpha: float | Fraction, m: int) -> int:
    """ceil(alpha * m), computed on the decimal value of ``alpha`` to avoid float round-up."""
    a = alpha if isinstance(alpha, Fraction) else Fraction(repr(float(alpha)))
    return math.ceil(a * m)


def _rebase(ids, vocab: Vocabulary, start: int) -> TokenSeq:
    return TokenSeq.from_ids(ids, vocab, offset=start)


# ---------------------------------------------------------------------------
# StochasTok


def stochastok(
    canonical: TokenSeq,
    alpha: float,
    k_max: int | None,
    split_map: SplitMap,
    rng: random.Random,
    retry: bool = False,
) -> TokenSeq:
    """Random pairwise splits of the canonical sequence.

    Each of the K = min(k_max, ceil(alpha * m)) iterations picks a position
    uniformly over the current sequence and replaces that token with a
    uniformly chosen decomposition; a token without decompositions is left as
    is and the iteration still counts. ``retry=True`` instead picks only among
    splittable positions (stopping early when none is left).
    """
    ids = list(canonical.ids)
    budget = n_splits(alpha, len(ids))
    if k_max is not None:
        budget = min(budget, k_max)
    table = split_map.table
    for _ in range(budget):
        if not ids:
            break
        if retry:
            cands = [i for i, t in enumerate(ids) if t in table]
            if not cands:
                break
            i = cands[rng.randrange(len(cands))]
        else:
            i = rng.randrange(len(ids))
        decs = table.get(ids[i])
        if decs:
            ids[i:i + 1] = decs[rng.randrange(len(decs))]
    start = canonical.spans[0][0] if canonical.spans else 0
    return _rebase(ids, split_map.vocab, start)


# ---------------------------------------------------------------------------
# split-count vectors


def sample_split_counts(n: int, m: int, rng: random.Random) -> SplitCounts:
    """Polya urn with one starting ball per token: the symmetric Dirichlet-multinomial."""
    if n < 0 or m < 1:
        raise ValueError("need n >= 0 and m >= 1")
    counts = [0] * m
    balls = m
    for _ in range(n):
        r = rng.randrange(balls)
        for i in range(m):
            r -= counts[i] + 1
            if r < 0:
                counts[i] += 1
                break
        balls += 1
    return SplitCounts(tuple(counts), requested=n)


def _feasible_splits(forest: SegmentForest, token_id: int, mode: str) -> list[int]:
    return sorted(length - 1 for length, c in forest.tree(token_id, mode).leaf_counts().items() if c)


def clamp_split_counts(draw: SplitCounts, feasible: list[list[int]], rng: random.Random) -> SplitCounts:
    """Make every S_i attainable, then hand the surplus back out through the urn.

    An infeasible S_i drops to the largest attainable value below it. Surplus
    units then go, one jump at a time, to tokens whose next attainable value
    fits in what is left, chosen with the urn weights (1 + S_i).
    """
    counts = list(draw.counts)
    surplus = 0
    for i, s in enumerate(counts):
        ok = [f for f in feasible[i] if f <= s]
        best = ok[-1] if ok else 0
        surplus += s - best
        counts[i] = best
    clamped = surplus > 0
    while surplus > 0:
        jumps = {}
        for i, s in enumerate(counts):
            nxt = next((f for f in feasible[i] if f > s), None)
            if nxt is not None and nxt - s <= surplus:
                jumps[i] = nxt
        if not jumps:
            break
        order = sorted(jumps)
        weights = [counts[i] + 1 for i in order]
        r = rng.randrange(sum(weights))
        for i, w in zip(order, weights):
            r -= w
            if r < 0:
                surplus -= jumps[i] - counts[i]
                counts[i] = jumps[i]
                break
    return SplitCounts(tuple(counts), requested=draw.requested, clamped=clamped)


def _expand(canonical: TokenSeq, counts, forest: SegmentForest, mode: str, rng) -> TokenSeq:
    ids: list[int] = []
    for tid, s in zip(canonical.ids, counts):
        if s == 0:
            ids.append(tid)
        else:
            ids.extend(sample_uniform_segments(forest.tree(tid, mode), s + 1, rng))
    start = canonical.spans[0][0] if canonical.spans else 0
    return _rebase(ids, forest.vocab, start)


def stochastok_uni(
    canonical: TokenSeq,
    alpha: float,
    forest: SegmentForest,
    rng: random.Random,
    tree_mode: str = ALL_SEGMENTATIONS,
) -> tuple[TokenSeq, SplitCounts]:
    """Draw split counts from the urn, then a uniform (S_i + 1)-segment tokenisation per token."""
    m = len(canonical)
    if m == 0:
        return canonical, SplitCounts((), requested=0)
    draw = sample_split_counts(n_splits(alpha, m), m, rng)
    feasible = [_feasible_splits(forest, t, tree_mode) for t in canonical.ids]
    counts = clamp_split_counts(draw, feasible, rng)
    return _expand(canonical, counts.counts, forest, tree_mode, rng), counts


# ---------------------------------------------------------------------------
# uniform schemes


def uniform_k(
    text: bytes,
    canonical: TokenSeq,
    k: int,
    rng: random.Random,
    vocab: Vocabulary,
    pretokenise: bool = False,
    ddag: DistanceDag | None = None,
    fallback: bool = True,
) -> tuple[TokenSeq, int]:
    """Uniform over tokenisations at edit distance ``k`` from the canonical one.

    When that layer is empty, the largest non-empty layer below ``k`` is used;
    the distance actually sampled is returned alongside the tokenisation.
    With ``fallback=False`` an empty layer raises :class:`InfeasibleError`.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if ddag is None:
        ddag = build_distance_dag(text, canonical, k, vocab, pretokenise)
    realised = k
    if not fallback and ddag.count(k) == 0:
        raise InfeasibleError(f"no tokenisation at distance {k}")
    while ddag.count(realised) == 0:
        realised -= 1
    return sample_uniform_distance(ddag, realised, rng, vocab), realised


def uniform_full(
    text: bytes,
    rng: random.Random,
    vocab: Vocabulary,
    pretokenise: bool = False,
    dag: SegmentationDag | None = None,
) -> TokenSeq:
    if dag is None:
        dag = build_dag(text, vocab, pretokenise)
    return sample_uniform(dag, rng, vocab)


def uniform_splits(
    canonical: TokenSeq,
    n: int,
    forest: SegmentForest,
    rng: random.Random,
    tree_mode: str = ALL_SEGMENTATIONS,
) -> TokenSeq:
    """Uniform over within-boundary tokenisations with exactly ``n`` splits in total.

    Split counts are drawn token by token from the generating-function
    conditionals, then each token is expanded uniformly at its count.
    """
    dist = split_count_polynomials(canonical, forest, tree_mode)
    if dist.count(n) == 0:
        raise ValueError(f"no within-boundary tokenisation has {n} splits")
    polys = dist.token_polys
    m = len(polys)
    suffix = [[1]] * (m + 1)
    for i in range(m - 1, -1, -1):
        suffix[i] = poly_mul(polys[i], suffix[i + 1])
    counts = []
    left = n
    for i in range(m):
        weights = [polys[i][s] * coeff(suffix[i + 1], left - s) for s in range(min(left, len(polys[i]) - 1) + 1)]
        r = rng.randrange(sum(weights))
        for s, w in enumerate(weights):
            r -= w
            if r < 0:
                counts.append(s)
                left -= s
                break
    return _expand(canonical, counts, forest, tree_mode, rng)


# ---------------------------------------------------------------------------
# dispatcher


@dataclass(frozen=True)
class Draw:
    tokens: TokenSeq
    canonical: TokenSeq
    meta: dict = field(default_factory=dict)

    @property
    def splits(self) -> int:
        return len(self.tokens) - len(self.canonical)

    @property
    def alpha_realised(self) -> Fraction:
        if not len(self.canonical):
            return Fraction(0)
        return Fraction(self.splits, len(self.canonical))


class Sampler:
    """Draws tokenisations for one scheme, caching per-text structures between draws."""

    def __init__(
        self,
        vocab: Vocabulary,
        spec: SamplerSpec,
        pretokenise: bool = False,
        split_map: SplitMap | None = None,
        forest: SegmentForest | None = None,
        cache_size: int = 256,
        fallback: bool = True,
    ):
        self.vocab = vocab
        self.fallback = fallback
        self.spec = spec
        self.pretokenise = pretokenise
        self._split_map = split_map
        self._forest = forest
        self.canonical = lru_cache(maxsize=cache_size)(self._canonical)
        self._dag = lru_cache(maxsize=cache_size)(self._build_dag)
        self._ddag = lru_cache(maxsize=cache_size)(self._build_ddag)

    @property
    def split_map(self) -> SplitMap:
        if self._split_map is None or self._split_map.arity != self.spec.arity:
            self._split_map = build_split_map(self.vocab, self.spec.arity)
        return self._split_map

    @property
    def forest(self) -> SegmentForest:
        if self._forest is None:
            sm = self._split_map if self._split_map is not None and self._split_map.arity == 2 else build_split_map(self.vocab, 2)
            self._forest = SegmentForest(self.vocab, sm)
        return self._forest

    def _canonical(self, text: bytes) -> TokenSeq:
        return encode_canonical(text, self.vocab, self.pretokenise)

    def _build_dag(self, text: bytes) -> SegmentationDag:
        return build_dag(text, self.vocab, self.pretokenise)

    def _build_ddag(self, text: bytes) -> DistanceDag:
        return build_distance_dag(text, self.canonical(text), self.spec.k, self.vocab, self.pretokenise)

    def draw(self, text: bytes, rng: random.Random) -> Draw:
        spec = self.spec
        canonical = self.canonical(text)
        meta: dict = {"scheme": spec.scheme}
        if spec.scheme == "canonical":
            tokens = canonical
        elif spec.scheme == "stochastok":
            tokens = stochastok(canonical, spec.alpha, spec.k_max, self.split_map, rng, spec.retry)
        elif spec.scheme == "stochastok-uni":
            tokens, counts = stochastok_uni(canonical, spec.alpha, self.forest, rng, spec.tree_mode)
            meta["requested_splits"] = counts.requested
            meta["clamped"] = counts.clamped
        elif spec.scheme == "uniform-k":
            tokens, realised = uniform_k(text, canonical, spec.k, rng, self.vocab, self.pretokenise, self._ddag(text), self.fallback)
            meta["k_realised"] = realised
        elif spec.scheme == "uniform":
            tokens = uniform_full(text, rng, self.vocab, self.pretokenise, self._dag(text))
        else:
            tokens = bpe_dropout_encode(text, spec.p_drop, rng, self.vocab, self.pretokenise)
        return Draw(tokens, canonical, meta)


def sample(
    text: bytes,
    spec: SamplerSpec,
    vocab: Vocabulary,
    rng: random.Random,
    pretokenise: bool = False,
) -> TokenSeq:
    return Sampler(vocab, spec, pretokenise).draw(text, rng).tokens
