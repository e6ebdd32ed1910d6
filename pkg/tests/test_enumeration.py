import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    as_seq,
    max_z,
    random_string,
    random_vocab,
    reachable_by_splits,
    segmentations,
)
from stoktok.enumeration import (
    ALL_SEGMENTATIONS,
    MERGE_REACHABLE,
    InfeasibleError,
    SegmentForest,
    build_dag,
    build_distance_dag,
    build_segment_tree,
    count_tokenisations,
    enumerate_all,
    enumerate_layer,
    sample_uniform,
    sample_uniform_distance,
    sample_uniform_segments,
)
from stoktok.fixtures import all_substrings_vocab
from stoktok.metrics import token_edit_distance
from stoktok.vocab import TokenSeq, Vocabulary, build_split_map, encode_canonical

REV = b"revolution"


def names(seqs, vocab):
    return {tuple(vocab.token_bytes(i) for i in s.ids) for s in seqs}


# --- enumerate_all / count --------------------------------------------------


def test_enumerate_small(ab_vocab):
    assert names(enumerate_all(b"ab", ab_vocab), ab_vocab) == {(b"ab",), (b"a", b"b")}
    assert count_tokenisations(b"ab", ab_vocab) == 2


def test_byte_only_vocab_has_one_tokenisation():
    v = Vocabulary.build([])
    assert len(enumerate_all(b"hello", v)) == 1
    assert count_tokenisations(b"hello", v) == 1


def test_revolution_enumeration(bg_vocab):
    seqs = names(enumerate_all(REV, bg_vocab), bg_vocab)
    assert (REV,) in seqs
    assert (b"re", b"v", b"ol", b"ution") in seqs
    assert tuple(bytes([c]) for c in REV) in seqs
    assert len(seqs) == count_tokenisations(REV, bg_vocab) == len(segmentations(REV, bg_vocab))


def test_enumeration_guard_and_limit(ab_vocab):
    with pytest.raises(ValueError, match="guarded"):
        enumerate_all(b"a" * 25, ab_vocab)
    assert len(enumerate_all(b"ab" * 13, ab_vocab, limit=5, override=True)) == 5


def test_empty_text(ab_vocab):
    assert enumerate_all(b"", ab_vocab) == [TokenSeq((), ())]
    assert count_tokenisations(b"", ab_vocab) == 1


@pytest.mark.parametrize("n", range(1, 11))
def test_all_substrings_gives_power_of_two(n):
    word = bytes(range(97, 97 + n))
    v = all_substrings_vocab([word])
    assert count_tokenisations(word, v) == 2 ** (n - 1)


def test_count_matches_oracle_on_random_inputs():
    rng = random.Random(7)
    for _ in range(100):
        v = random_vocab(rng)
        x = random_string(rng)
        seqs = enumerate_all(x, v)
        assert len(seqs) == count_tokenisations(x, v) == len(segmentations(x, v))
        assert len({s.ids for s in seqs}) == len(seqs)


def test_pretokenised_counting_respects_chunks():
    v = Vocabulary.build([b"a b", b" b", b"a "])
    assert count_tokenisations(b"a b", v) == 4
    assert count_tokenisations(b"a b", v, pretokenise=True) == 2  # chunks "a" and " b"


# --- segment trees -----------------------------------------------------------


def test_single_byte_tree(ab_vocab):
    t = build_segment_tree(ab_vocab.ids[b"a"], build_split_map(ab_vocab), ab_vocab)
    assert t.leaf_counts() == {1: 1}


def test_revolution_trees_against_oracle(rev_vocab):
    sm = build_split_map(rev_vocab)
    tid = rev_vocab.ids[REV]
    full = build_segment_tree(tid, sm, rev_vocab, ALL_SEGMENTATIONS)
    reach = build_segment_tree(tid, sm, rev_vocab, MERGE_REACHABLE)

    all_paths = {tuple(rev_vocab.token_bytes(i) for i in p) for p in full.paths()}
    reach_paths = {tuple(rev_vocab.token_bytes(i) for i in p) for p in reach.paths()}
    assert all_paths == set(segmentations(REV, rev_vocab))
    assert reach_paths == reachable_by_splits(REV, rev_vocab)
    assert reach_paths < all_paths

    # three-segment example: present in full mode, unreachable by two-way splits
    assert (b"re", b"vol", b"ution") in all_paths
    assert (b"re", b"vol", b"ution") not in reach_paths
    assert b"revol" not in rev_vocab and b"volution" not in rev_vocab

    by_len = Counter(len(p) for p in all_paths)
    assert full.leaf_counts() == dict(by_len)
    assert reach.leaf_counts() == dict(Counter(len(p) for p in reach_paths))
    for length in by_len:
        assert len(list(full.paths(length))) == by_len[length]


def test_segment_sampling_edges(rev_vocab):
    forest = SegmentForest(rev_vocab, build_split_map(rev_vocab))
    tree = forest.tree(rev_vocab.ids[REV])
    rng = random.Random(0)
    assert sample_uniform_segments(tree, 1, rng) == (rev_vocab.ids[REV],)
    with pytest.raises(InfeasibleError):
        sample_uniform_segments(tree, 11, rng)
    assert forest.tree(rev_vocab.ids[REV]) is tree


def test_segment_sampling_uniform_at_four(rev_vocab):
    tree = build_segment_tree(rev_vocab.ids[REV], build_split_map(rev_vocab), rev_vocab)
    support = [p for p in segmentations(REV, rev_vocab) if len(p) == 4]
    rng = random.Random(1)
    draws = 50000
    counts = Counter(
        tuple(rev_vocab.token_bytes(i) for i in sample_uniform_segments(tree, 4, rng)) for _ in range(draws)
    )
    assert set(counts) == set(support)
    for c in counts.values():
        assert abs(c / draws - 1 / len(support)) < 0.01


# --- uniform over all tokenisations ------------------------------------------


def test_uniform_sampler_two_outcomes(ab_vocab):
    dag = build_dag(b"ab", ab_vocab)
    rng = random.Random(2)
    counts = Counter(sample_uniform(dag, rng, ab_vocab).ids for _ in range(10000))
    assert len(counts) == 2
    assert all(abs(c / 10000 - 0.5) < 0.02 for c in counts.values())


def test_uniform_sampler_byte_only():
    v = Vocabulary.build([])
    dag = build_dag(b"xyz", v)
    assert sample_uniform(dag, random.Random(0), v).ids == tuple(v.byte_tokens[b] for b in b"xyz")


def test_uniform_sampler_exact_on_random_fixtures():
    rng = random.Random(3)
    for _ in range(5):
        v = random_vocab(rng, size=5)
        x = random_string(rng, max_len=8)
        support = [s.key() for s in enumerate_all(x, v)]
        draws = 20 * len(support) + 2000
        dag = build_dag(x, v)
        counts = Counter(sample_uniform(dag, rng, v).key() for _ in range(draws))
        assert max_z(counts, {k: 1 / len(support) for k in support}, draws) < 3.0


# --- distance DAG --------------------------------------------------------------


def test_distance_dag_examples(ab_vocab):
    ref = encode_canonical(b"ab", ab_vocab)
    dd = build_distance_dag(b"ab", ref, None, ab_vocab)
    assert dd.layer_counts() == {0: 1, 2: 1}
    rng = random.Random(0)
    assert sample_uniform_distance(dd, 0, rng, ab_vocab) == ref
    assert names([sample_uniform_distance(dd, 2, rng, ab_vocab)], ab_vocab) == {(b"a", b"b")}
    with pytest.raises(InfeasibleError):
        sample_uniform_distance(dd, 1, rng, ab_vocab)
    capped = build_distance_dag(b"ab", ref, 1, ab_vocab)
    with pytest.raises(ValueError):
        sample_uniform_distance(capped, 2, rng, ab_vocab)


def test_distance_layers_partition_and_agree(bg_vocab, rev_vocab):
    for vocab in (bg_vocab, rev_vocab):
        ref = encode_canonical(REV, vocab)
        dd = build_distance_dag(REV, ref, None, vocab)
        assert sum(dd.layer_counts().values()) == count_tokenisations(REV, vocab)
        every = enumerate_all(REV, vocab)
        by_k = Counter(token_edit_distance(ref, u) for u in every)
        assert dict(by_k) == dd.layer_counts()
        for k in by_k:
            layer = enumerate_layer(dd, k, vocab)
            assert len(layer) == by_k[k]
            assert all(token_edit_distance(ref, u) == k for u in layer)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32))
def test_distance_sampling_membership(seed):
    rng = random.Random(seed)
    v = random_vocab(rng)
    x = random_string(rng, max_len=10)
    segs = enumerate_all(x, v)
    ref = segs[rng.randrange(len(segs))]
    dd = build_distance_dag(x, ref, None, v)
    for k in dd.layer_counts():
        u = sample_uniform_distance(dd, k, rng, v)
        u.check(x, v)
        assert token_edit_distance(ref, u) == k


def test_distance_sampling_uniform_within_layer(rev_vocab):
    ref = encode_canonical(REV, rev_vocab)
    dd = build_distance_dag(REV, ref, None, rev_vocab)
    rng = random.Random(4)
    layer = [u.key() for u in enumerate_layer(dd, 6, rev_vocab)]
    draws = 20 * len(layer) + 5000
    counts = Counter(sample_uniform_distance(dd, 6, rng, rev_vocab).key() for _ in range(draws))
    assert max_z(counts, {k: 1 / len(layer) for k in layer}, draws) < 3.0


def test_sequence_helpers(rev_vocab):
    seq = as_seq((b"re", b"v", b"olution"), rev_vocab)
    assert seq.boundaries() == {2, 3}
    assert seq.key() == "-".join(str(rev_vocab.ids[t]) for t in (b"re", b"v", b"olution"))
