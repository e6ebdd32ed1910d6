import json
import random
import threading

import pytest

from oracles import random_string, random_vocab
from stoktok.adversarial import (
    AttackConfig,
    ConstantScorer,
    HashNgramScorer,
    LengthPenaltyScorer,
    McqInstance,
    ProcessScorer,
    ScorerError,
    adversarial_accuracy,
    avg_accuracy,
    greedy_attack,
    icl_prompt,
    load_dataset,
    margin,
    neighbourhood,
    predict,
    serve_lines,
    toy_scorer,
)
from stoktok.enumeration import build_distance_dag, enumerate_all, enumerate_layer
from stoktok.fixtures import builtin_vocab, data_path, synthetic_dataset
from stoktok.metrics import token_edit_distance
from stoktok.samplers import SamplerSpec
from stoktok.vocab import TokenSeq, Vocabulary, decode, encode_canonical

SYN = builtin_vocab("synthetic")


class TableScorer:
    """Scores looked up by continuation; used to build exact margins."""

    single_flight = False

    def __init__(self, table):
        self.table = table

    def score(self, context, continuation):
        return self.table[tuple(continuation)]


# --- neighbourhoods ---------------------------------------------------------------


def test_neighbourhood_merge_move(ab_vocab):
    v = TokenSeq.from_ids([ab_vocab.ids[b"a"], ab_vocab.ids[b"b"]], ab_vocab)
    ne = neighbourhood(v, b"ab", ab_vocab)
    assert ne[0] == v
    assert encode_canonical(b"ab", ab_vocab) in ne


def test_neighbourhood_byte_only():
    v = Vocabulary.build([])
    seq = encode_canonical(b"hello", v)
    assert neighbourhood(seq, b"hello", v) == [seq]


def test_neighbourhood_argument_checks(ab_vocab):
    seq = encode_canonical(b"ab", ab_vocab)
    with pytest.raises(ValueError):
        neighbourhood(seq, b"ab", ab_vocab, radius=3)
    with pytest.raises(ValueError):
        neighbourhood(seq, b"abab", ab_vocab)


def _ball(v, text, vocab, radius):
    dd = build_distance_dag(text, v, radius, vocab)
    return {u.ids for k in range(radius + 1) for u in enumerate_layer(dd, k, vocab)}


def test_neighbourhood_complete_on_random_fixtures():
    rng = random.Random(21)
    for _ in range(150):
        vocab = random_vocab(rng, size=rng.randint(3, 8))
        x = random_string(rng, max_len=12)
        segs = enumerate_all(x, vocab)
        v = rng.choice(segs)
        ne = neighbourhood(v, x, vocab)
        ids = [u.ids for u in ne]
        assert len(ids) == len(set(ids))
        assert set(ids) == _ball(v, x, vocab, 2)
        for u in ne:
            u.check(x, vocab)


def test_radius_four_is_two_step_closure():
    rng = random.Random(22)
    for _ in range(40):
        vocab = random_vocab(rng)
        x = random_string(rng, max_len=9)
        v = rng.choice(enumerate_all(x, vocab))
        r2 = neighbourhood(v, x, vocab, 2)
        closure = {w.ids for u in r2 for w in neighbourhood(u, x, vocab, 2)}
        r4 = {u.ids for u in neighbourhood(v, x, vocab, 4)}
        assert r4 == closure
        assert r4 <= _ball(v, x, vocab, 4)


def test_neighbourhood_respects_pretokens():
    v = Vocabulary.build([b"a b", b"a ", b" b"])
    seq = encode_canonical(b"a b", v, pretokenise=True)
    for u in neighbourhood(seq, b"a b", v, pretokenise=True):
        assert b"a b" not in [v.token_bytes(i) for i in u.ids]
        assert b"a " not in [v.token_bytes(i) for i in u.ids]


# --- margins and scorers ---------------------------------------------------------------


def test_margin_examples(ab_vocab):
    v = encode_canonical(b"ab", ab_vocab)
    opts = [encode_canonical(b"a", ab_vocab), encode_canonical(b"b", ab_vocab)]
    assert margin(ConstantScorer(), v, opts, 0) == 0
    scorer = TableScorer({opts[0].ids: 0.0, opts[1].ids: -1.0})
    assert margin(scorer, v, opts, 0) == -1.0
    assert predict(scorer, v, opts) == 0
    with pytest.raises(ValueError):
        margin(scorer, v, opts[:1], 0)


def test_margin_equals_brute_force():
    rng = random.Random(3)
    scorer = HashNgramScorer(5)
    for _ in range(200):
        ctx = TokenSeq.from_ids([rng.randrange(300) for _ in range(rng.randint(1, 6))], SYN)
        opts = [TokenSeq.from_ids([rng.randrange(300) for _ in range(rng.randint(1, 3))], SYN) for _ in range(4)]
        y = rng.randrange(4)
        scores = [scorer.score(ctx.ids, o.ids) for o in opts]
        pairwise = max(scores[c] - scores[y] for c in range(4) if c != y)
        assert margin(scorer, ctx, opts, y) == pytest.approx(pairwise)


def test_toy_scorers():
    c = toy_scorer("constant")
    assert c.score((1, 2), (3,)) == c.score((9,), (4, 5))
    h1, h2 = toy_scorer("hash-ngram", seed=3), toy_scorer("hash-ngram", seed=3)
    assert h1.score((1, 2, 3), (4,)) == h2.score((1, 2, 3), (4,))
    assert h1.score((1, 2, 3), (4,)) <= 0
    assert toy_scorer("hash-ngram", seed=4).score((1, 2, 3), (4,)) != h1.score((1, 2, 3), (4,))
    lp = toy_scorer("length-penalty", favoured=[(7,)], lam=0.5)
    assert lp.score((1, 2), (7,)) - lp.score((1, 2, 3), (7,)) == 0.5
    assert lp.score((1, 2), (8,)) == lp.score((1, 2, 3, 4), (8,))
    with pytest.raises(ValueError):
        toy_scorer("oracle")


# --- greedy attack ----------------------------------------------------------------------


INST = McqInstance(b"what is the opposite of hot?", (b"cold", b"warm", b"blue"), 0)


def test_constant_scorer_stops_immediately():
    res = greedy_attack(ConstantScorer(), INST, AttackConfig(), SYN)
    assert res.iterations == 1
    assert res.final == res.start == encode_canonical(INST.question, SYN)
    assert res.margins == [0]
    assert not res.success


def test_length_penalty_attack_splits_monotonically():
    opts = [encode_canonical(o, SYN).ids for o in INST.options]
    scorer = LengthPenaltyScorer([opts[0]], lam=0.1, bias=10.0)
    res = greedy_attack(scorer, INST, AttackConfig(max_steps=10), SYN)
    can_len = len(encode_canonical(INST.question, SYN))
    assert res.iterations == 10
    assert len(res.final) == can_len + 10
    assert all(b > a for a, b in zip(res.margins, res.margins[1:]))
    assert res.margins[-1] == pytest.approx(0.1 * (can_len + 10) - 10.0)


def test_attack_margins_monotone_and_decoding():
    rng = random.Random(0)
    dataset = synthetic_dataset()
    for trial in range(30):
        inst = dataset[trial % len(dataset)]
        scorer = HashNgramScorer(rng.randrange(2**32))
        cfg = AttackConfig(max_steps=4, radius=2, init=rng.choice(["canonical", "uniform-random"]), seed=trial)
        res = greedy_attack(scorer, inst, cfg, SYN, rng=random.Random(trial))
        assert all(b >= a for a, b in zip(res.margins, res.margins[1:]))
        assert len(res.margins) <= res.iterations + 1 <= cfg.max_steps + 1
        assert decode(res.final, SYN) == inst.question
        assert res.distance_from_start == token_edit_distance(res.start, res.final)
        again = greedy_attack(scorer, inst, cfg, SYN, rng=random.Random(trial))
        assert again.final == res.final and again.margins == res.margins


def test_random_init_uses_rng():
    inst = synthetic_dataset()[0]
    cfg = AttackConfig(max_steps=1, init="uniform-random", seed=1)
    starts = {greedy_attack(ConstantScorer(), inst, cfg, SYN, rng=random.Random(s)).start.ids for s in range(10)}
    assert len(starts) > 1


def test_attack_config_validation():
    assert AttackConfig() == AttackConfig(max_steps=10, radius=2, init="canonical")
    for bad in [dict(max_steps=0), dict(radius=3), dict(radius=0), dict(init="zero")]:
        with pytest.raises(ValueError):
            AttackConfig(**bad)


def test_attack_with_icl_prefix():
    sep = encode_canonical(b"\n", SYN)
    q1, a1 = encode_canonical(b"what is 1 plus 1?", SYN), encode_canonical(b"2", SYN)
    prefix = icl_prompt([(q1, a1)], TokenSeq((), ()), sep)
    res = greedy_attack(HashNgramScorer(1), INST, AttackConfig(max_steps=2), SYN, prefix=prefix)
    assert decode(res.final, SYN) == INST.question


# --- accuracies -------------------------------------------------------------------------


def test_adversarial_accuracy_constant():
    clean, adv, results = adversarial_accuracy(ConstantScorer(), synthetic_dataset(), AttackConfig(), SYN)
    assert clean == adv
    assert len(results) == 20


def test_adversarial_accuracy_length_penalty_and_parallel():
    data = synthetic_dataset()
    favoured = [encode_canonical(i.options[i.label], SYN).ids for i in data]
    scorer = LengthPenaltyScorer(favoured)
    clean, adv, results = adversarial_accuracy(scorer, data, AttackConfig(), SYN)
    assert clean == 1.0 and adv < clean
    for r in results:
        assert r.success == (not r.adversarial_correct)
    _, _, again = adversarial_accuracy(scorer, data, AttackConfig(), SYN, parallel=4)
    assert [r.to_json() for r in again] == [r.to_json() for r in results]


class _CountingSingleFlight:
    single_flight = True

    def __init__(self):
        self.active = 0
        self.overlap = False
        self.lock = threading.Lock()

    def score(self, context, continuation):
        with self.lock:
            self.active += 1
            if self.active > 1:
                self.overlap = True
        total = sum(context) % 7 - sum(continuation) % 5
        with self.lock:
            self.active -= 1
        return -float(abs(total))


def test_single_flight_scorers_are_serialised():
    s = _CountingSingleFlight()
    adversarial_accuracy(s, synthetic_dataset()[:8], AttackConfig(max_steps=2), SYN, parallel=4)
    assert not s.overlap


def test_avg_accuracy():
    data = synthetic_dataset()
    favoured = [encode_canonical(i.options[i.label], SYN).ids for i in data]
    oracle = LengthPenaltyScorer(favoured, lam=0.0, bias=1.0)
    anti = LengthPenaltyScorer(favoured, lam=0.0, bias=-1.0)
    rng = random.Random(0)
    stoch = SamplerSpec("stochastok", alpha=0.5)
    assert avg_accuracy(oracle, data, stoch, 3, rng, SYN) == 1.0
    assert avg_accuracy(anti, data, stoch, 3, rng, SYN) == 0.0
    hashy = HashNgramScorer(2)
    det = sum(
        predict(hashy, encode_canonical(i.question, SYN), [encode_canonical(o, SYN) for o in i.options]) == i.label
        for i in data
    ) / len(data)
    assert avg_accuracy(hashy, data, SamplerSpec(), 1, rng, SYN) == det


# --- ICL prompt layout --------------------------------------------------------------------


def test_icl_prompt_layout():
    enc = lambda s: encode_canonical(s, SYN)
    sep = enc(b"\n")
    q = enc(b"what is hot?")
    assert icl_prompt([], q, sep) == q
    pairs = [(enc(b"what is 1 plus 1?"), enc(b"2")), (enc(b"what is cold?"), enc(b"ice"))]
    prompt = icl_prompt(pairs, q, sep)
    assert decode(prompt, SYN) == b"what is 1 plus 1?\n2\nwhat is cold?\nice\nwhat is hot?"
    prompt.check(decode(prompt, SYN), SYN)


# --- datasets and transports -----------------------------------------------------------------


def test_bundled_dataset():
    data = load_dataset(data_path("synthetic_mcq.jsonl"))
    assert len(data) == 20
    assert all(len(i.options) >= 2 for i in data)


def test_dataset_validation(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(json.dumps({"question": "q", "options": ["a"], "label": 0}) + "\n")
    with pytest.raises(ValueError, match="two options"):
        load_dataset(p)
    p.write_text(json.dumps({"question": "q", "options": ["a", "b"], "label": 2}) + "\n")
    with pytest.raises(ValueError, match="out of range"):
        load_dataset(p)


def test_serve_lines_protocol():
    import io

    scorer = HashNgramScorer(3)
    req = json.dumps({"context": [1, 2], "continuation": [3]}) + "\n" + "not json\n"
    out = io.StringIO()
    serve_lines(scorer, io.StringIO(req), out)
    lines = [json.loads(l) for l in out.getvalue().splitlines()]
    assert lines[0] == {"logprob": scorer.score((1, 2), (3,))}
    assert "error" in lines[1]


def test_process_scorer_roundtrip():
    import sys

    proc = ProcessScorer([sys.executable, "-m", "stoktok", "serve-scorer", "--scorer", "toy:hash-ngram", "--seed", "3"])
    try:
        assert proc.score((1, 2), (3,)) == HashNgramScorer(3).score((1, 2), (3,))
    finally:
        proc.close()


def test_process_scorer_failure():
    proc = ProcessScorer(["false"])
    with pytest.raises(ScorerError):
        proc.score((1,), (2,))
    proc.close()
