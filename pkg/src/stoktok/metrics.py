"""Distances, split statistics, theoretical split-count laws and histogram comparison."""
from __future__ import annotations

import csv
import io
import json
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Mapping, Sequence

from .enumeration import ALL_SEGMENTATIONS, SegmentForest
from .vocab import TokenSeq, Vocabulary

if TYPE_CHECKING:
    from .samplers import SamplerSpec


class BoundaryCrossingError(ValueError):
    """A tokenisation crosses a canonical token boundary, so per-token split counts are undefined."""

    def __init__(self, span: tuple[int, int], aggregate_splits: int):
        self.span = span
        self.aggregate_splits = aggregate_splits
        super().__init__(
            f"token span {span} crosses a canonical boundary "
            f"(aggregate splits {aggregate_splits})"
        )


@dataclass(frozen=True)
class SplitCounts:
    """Per-canonical-token split counts S_1..S_m.

    ``requested`` is the target total when the vector came from a sampler;
    ``clamped`` records that infeasible entries were reduced.
    """

    counts: tuple[int, ...]
    requested: int | None = None
    clamped: bool = False

    @property
    def total(self) -> int:
        return sum(self.counts)

    def __len__(self) -> int:
        return len(self.counts)


# ---------------------------------------------------------------------------
# distances


def token_edit_distance(v: TokenSeq, u: TokenSeq, positional: bool = True) -> int:
    """Levenshtein distance from ``v`` to ``u`` with insertion 1, deletion 0, no substitution.

    With ``positional=True`` (default) two tokens are equal only when they are
    the same id at the same byte offset, which makes the result coincide with
    :func:`span_distance`. ``positional=False`` compares ids alone; the two
    differ when a token id repeats at different offsets.
    """
    if v.end != u.end:
        raise ValueError("tokenisations cover strings of different length")
    a = list(zip(v.ids, v.spans)) if positional else list(v.ids)
    b = list(zip(u.ids, u.spans)) if positional else list(u.ids)
    # D[j]: cost to turn the processed prefix of a into b[:j]
    prev = list(range(len(b) + 1))
    for x in a:
        cur = [0] * (len(b) + 1)
        cur[0] = prev[0]  # deleting x is free
        for j, y in enumerate(b, 1):
            best = min(prev[j], cur[j - 1] + 1)
            if x == y:
                best = min(best, prev[j - 1])
            cur[j] = best
        prev = cur
    return prev[-1]


def span_distance(v: TokenSeq, u: TokenSeq) -> int:
    """``|u|`` minus the number of ``u`` tokens whose span also occurs in ``v``."""
    shared = set(v.spans)
    return len(u) - sum(1 for s in u.spans if s in shared)


# ---------------------------------------------------------------------------
# split counts


def split_count_vector(canonical: TokenSeq, v: TokenSeq) -> SplitCounts:
    if canonical.end != v.end:
        raise ValueError("tokenisations cover strings of different length")
    counts = [0] * len(canonical)
    ci = 0
    for span in v.spans:
        s, e = span
        while ci < len(canonical) and canonical.spans[ci][1] <= s:
            ci += 1
        cs, ce = canonical.spans[ci]
        if s < cs or e > ce:
            raise BoundaryCrossingError(span, len(v) - len(canonical))
        counts[ci] += 1
    return SplitCounts(tuple(c - 1 for c in counts))


def normalised_splits(v: TokenSeq, canonical: TokenSeq, aggregate: bool = False) -> Fraction:
    """Average number of splits per canonical token, as an exact rational."""
    if not len(canonical):
        raise ValueError("canonical tokenisation is empty")
    if aggregate:
        return Fraction(len(v) - len(canonical), len(canonical))
    return Fraction(split_count_vector(canonical, v).total, len(canonical))


# ---------------------------------------------------------------------------
# closed-form laws


def dirmult_pmf(s: Sequence[int], n: int, m: int) -> Fraction:
    """Symmetric Dirichlet-multinomial with unit concentration: uniform over compositions."""
    if len(s) != m or any(x < 0 for x in s) or sum(s) != n:
        return Fraction(0)
    return Fraction(1, math.comb(n + m - 1, m - 1))


def dirmult_marginal_pmf(s: int, n: int, m: int) -> Fraction:
    """Marginal law of one coordinate under the same model (beta-binomial with a=1, b=m-1)."""
    if not 0 <= s <= n:
        return Fraction(0)
    if m == 1:
        return Fraction(int(s == n))
    return Fraction(math.comb(n - s + m - 2, m - 2), math.comb(n + m - 1, m - 1))


def binomial_split_pmf(s: int, token_len: int) -> Fraction:
    """Split count of a token under uniform sampling with an unrestricted vocabulary."""
    if token_len < 1 or not 0 <= s <= token_len - 1:
        return Fraction(0)
    return Fraction(math.comb(token_len - 1, s), 2 ** (token_len - 1))


# ---------------------------------------------------------------------------
# generating functions


def poly_mul(a: Sequence[int], b: Sequence[int]) -> list[int]:
    if not a or not b:
        return []
    out = [0] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        if x:
            for j, y in enumerate(b):
                out[i + j] += x * y
    return out


def poly_product(polys: Sequence[Sequence[int]]) -> list[int]:
    out = [1]
    for p in polys:
        out = poly_mul(out, p)
    return out


def coeff(poly: Sequence[int], k: int) -> int:
    return poly[k] if 0 <= k < len(poly) else 0


@dataclass
class SplitDistribution:
    """Per-token split-count polynomials A_i, their product G and leave-one-out products H_i."""

    token_polys: list[list[int]]
    product: list[int]
    leave_one_out: list[list[int]] = field(repr=False)

    def count(self, k: int) -> int:
        """Within-boundary tokenisations with exactly ``k`` splits in total."""
        return coeff(self.product, k)

    def conditional(self, i: int, k: int) -> dict[int, Fraction]:
        """Pr(S_i = s | sum S = k); empty when no tokenisation has ``k`` splits."""
        total = self.count(k)
        if total == 0:
            return {}
        a = self.token_polys[i]
        h = self.leave_one_out[i]
        out = {}
        for s in range(min(k, len(a) - 1) + 1):
            num = a[s] * coeff(h, k - s)
            if num:
                out[s] = Fraction(num, total)
        return out

    def feasible(self) -> list[int]:
        return [k for k, c in enumerate(self.product) if c]


def token_split_polynomial(forest: SegmentForest, token_id: int, mode: str = ALL_SEGMENTATIONS) -> list[int]:
    counts = forest.tree(token_id, mode).leaf_counts()
    top = max(counts)
    return [counts.get(s + 1, 0) for s in range(top)]


def split_count_polynomials(
    canonical: TokenSeq,
    forest: SegmentForest,
    mode: str = ALL_SEGMENTATIONS,
) -> SplitDistribution:
    """Generating functions for split counts that stay inside canonical boundaries."""
    polys = [token_split_polynomial(forest, t, mode) for t in canonical.ids]
    m = len(polys)
    prefix = [[1]]
    for p in polys:
        prefix.append(poly_mul(prefix[-1], p))
    suffix = [[1]] * (m + 1)
    for i in range(m - 1, -1, -1):
        suffix[i] = poly_mul(polys[i], suffix[i + 1])
    loo = [poly_mul(prefix[i], suffix[i + 1]) for i in range(m)]
    return SplitDistribution(polys, prefix[-1], loo)


# ---------------------------------------------------------------------------
# histograms


@dataclass
class Histogram:
    """Counts of serialised outcomes (``TokenSeq.key``)."""

    counts: Counter = field(default_factory=Counter)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def add(self, outcome: TokenSeq | str) -> None:
        self.counts[outcome if isinstance(outcome, str) else outcome.key()] += 1

    def merge(self, other: "Histogram") -> "Histogram":
        return Histogram(self.counts + other.counts)

    def pmf(self) -> dict[str, float]:
        n = self.total
        if n == 0:
            raise ValueError("empty histogram")
        return {k: c / n for k, c in sorted(self.counts.items())}

    def to_json(self) -> str:
        return json.dumps(self.pmf(), sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["outcome", "count", "probability"])
        n = self.total
        for k, c in sorted(self.counts.items()):
            w.writerow([k, c, repr(c / n)])
        return buf.getvalue()


def tv_distance(h: Histogram | Mapping[str, float], ref: Mapping[str, float]) -> float:
    """Total variation distance between an empirical histogram (or pmf) and a reference pmf."""
    p = h.pmf() if isinstance(h, Histogram) else dict(h)
    keys = set(p) | set(ref)
    return 0.5 * sum(abs(float(p.get(k, 0.0)) - float(ref.get(k, 0.0))) for k in keys)


def empirical_histogram(
    spec: "SamplerSpec",
    text: bytes,
    draws: int,
    rng: random.Random,
    vocab: Vocabulary,
    pretokenise: bool = False,
) -> Histogram:
    from .samplers import Sampler

    if draws <= 0:
        raise ValueError("draws must be positive")
    sampler = Sampler(vocab, spec, pretokenise=pretokenise)
    hist = Histogram()
    for _ in range(draws):
        hist.add(sampler.draw(text, rng).tokens)
    return hist


def chi_square_uniform(hist: Histogram, support: Sequence[str]) -> float:
    """p-value of Pearson's chi-square test against the uniform law on ``support``."""
    from scipy.stats import chisquare

    observed = [hist.counts.get(k, 0) for k in support]
    if sum(observed) != hist.total:
        raise ValueError("histogram has outcomes outside the support")
    return float(chisquare(observed).pvalue)
