"""Command-line front end.

Every command reads lines (text, or JSON for ``decode``/``distance``), writes
one JSON object per output line carrying ``"v": 1``, and is a pure function
of its inputs, flags and seed. Randomness for input line ``i`` comes from
``mix(seed, i)`` so ``--parallel`` never changes the output.

Exit codes: 0 ok, 2 bad input or flags, 3 infeasible request, 4 scorer transport failure.
"""
from __future__ import annotations

import argparse
import json
import os
import shlex
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

from . import adversarial as adv
from .enumeration import (
    TREE_MODES,
    InfeasibleError,
    SegmentForest,
    build_distance_dag,
    count_tokenisations,
    enumerate_all,
)
from .fixtures import BUILTIN_VOCABS, builtin_vocab, data_path
from .metrics import (
    BoundaryCrossingError,
    Histogram,
    span_distance,
    split_count_polynomials,
    split_count_vector,
    token_edit_distance,
    tv_distance,
)
from .samplers import SCHEMES, Sampler, SamplerSpec, _parse_bool
from .seeding import item_rng
from .vocab import (
    TokenSeq,
    Vocabulary,
    VocabularyError,
    build_split_map,
    decode,
    encode_canonical,
    escape_bytes,
    load_vocabulary,
)

SCHEMA_VERSION = 1
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3
EXIT_SCORER = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _dumps(obj) -> str:
    return json.dumps({"v": SCHEMA_VERSION, **obj}, separators=(",", ":"))


def _frac(x: Fraction) -> float:
    return float(x)


# ---------------------------------------------------------------------------
# per-line workers (module level so they pickle for process pools)

_STATE: dict = {}


def _init_worker(state: dict) -> None:
    _STATE.clear()
    _STATE.update(state)
    if "spec" in state:
        _STATE["sampler"] = Sampler(
            state["vocab"], state["spec"], state["pretokenise"], fallback=state.get("fallback", True)
        )


def _token_strings(seq: TokenSeq, vocab: Vocabulary) -> list[str]:
    return [escape_bytes(vocab.token_bytes(i)) for i in seq.ids]


def _work_encode(index: int, line: bytes) -> list[str]:
    vocab = _STATE["vocab"]
    seq = encode_canonical(line, vocab, _STATE["pretokenise"])
    return [_dumps({"ids": list(seq.ids), "tokens": _token_strings(seq, vocab)})]


def _work_sample(index: int, line: bytes) -> list[str]:
    sampler: Sampler = _STATE["sampler"]
    rng = item_rng(_STATE["seed"], index)
    out = []
    for d in range(_STATE["draws"]):
        draw = sampler.draw(line, rng)
        try:
            counts = list(split_count_vector(draw.canonical, draw.tokens).counts)
        except BoundaryCrossingError:
            counts = None
        rec = {
            "line": index,
            "draw": d,
            "scheme": draw.meta["scheme"],
            "ids": list(draw.tokens.ids),
            "splits": draw.splits,
            "split_counts": counts,
            "alpha_realised": _frac(draw.alpha_realised),
        }
        rec.update({k: v for k, v in draw.meta.items() if k != "scheme"})
        out.append(_dumps(rec))
    return out


def _work_count(index: int, line: bytes) -> list[str]:
    vocab = _STATE["vocab"]
    pre = _STATE["pretokenise"]
    rec = {"line": index, "count": count_tokenisations(line, vocab, pre)}
    if _STATE.get("by_distance"):
        ref = encode_canonical(line, vocab, pre)
        layers = build_distance_dag(line, ref, None, vocab, pre).layer_counts()
        rec["by_distance"] = {str(k): c for k, c in layers.items()}
    return [_dumps(rec)]


def _work_enumerate(index: int, line: bytes) -> list[str]:
    vocab = _STATE["vocab"]
    limit = _STATE["limit"]
    seqs = enumerate_all(line, vocab, None if limit is None else limit + 1,
                         _STATE["override"], _STATE["pretokenise"])
    truncated = limit is not None and len(seqs) > limit
    seqs = seqs[:limit] if limit is not None else seqs
    return [_dumps({"line": index, "tokenisations": [list(s.ids) for s in seqs], "truncated": truncated})]


def _work_splitdist(index: int, line: bytes) -> list[str]:
    vocab = _STATE["vocab"]
    forest = _STATE["forest"]
    canonical = encode_canonical(line, vocab, _STATE["pretokenise"])
    dist = split_count_polynomials(canonical, forest, _STATE["tree_mode"])
    ks = [_STATE["k"]] if _STATE["k"] is not None else dist.feasible()
    conditionals = {}
    for k in ks:
        conditionals[str(k)] = [
            {str(s): {"p": float(p), "exact": str(p)} for s, p in dist.conditional(i, k).items()}
            for i in range(len(canonical))
        ]
    rec = {
        "line": index,
        "canonical": list(canonical.ids),
        "token_polys": dist.token_polys,
        "product": dist.product,
        "conditionals": conditionals,
    }
    if _STATE["k"] is not None and dist.count(_STATE["k"]) == 0:
        rec["empty"] = True
    return [_dumps(rec)]


def _work_histogram(index: int, line: bytes) -> Histogram:
    sampler: Sampler = _STATE["sampler"]
    rng = item_rng(_STATE["seed"], index)
    hist = Histogram()
    for _ in range(_STATE["draws"]):
        hist.add(sampler.draw(line, rng).tokens)
    return hist


def _fan_out(fn, lines: list[bytes], state: dict, parallel: int) -> list:
    if parallel <= 1 or len(lines) <= 1:
        _init_worker(state)
        return [fn(i, line) for i, line in enumerate(lines)]
    with ProcessPoolExecutor(max_workers=parallel, initializer=_init_worker, initargs=(state,)) as pool:
        chunk = max(1, len(lines) // (parallel * 4))
        return list(pool.map(fn, range(len(lines)), lines, chunksize=chunk))


# ---------------------------------------------------------------------------
# argument handling


def _read_lines(path: str | None) -> list[bytes]:
    data = sys.stdin.buffer.read() if path in (None, "-") else Path(path).read_bytes()
    if not data:
        return []
    lines = data.split(b"\n")
    if lines[-1] == b"":
        lines.pop()
    return lines


class _Output:
    def __init__(self, path: str | None):
        self.path = path
        self._fh = None

    def __enter__(self):
        if self.path in (None, "-"):
            self._fh = sys.stdout.buffer
        else:
            self._fh = open(self.path, "wb")
        return self

    def line(self, text: str | bytes) -> None:
        self._fh.write(text if isinstance(text, bytes) else text.encode("utf-8"))
        self._fh.write(b"\n")

    def __exit__(self, *exc):
        self._fh.flush()
        if self.path not in (None, "-"):
            self._fh.close()


def _load_vocab(args) -> Vocabulary:
    if args.vocab:
        try:
            return load_vocabulary(args.vocab, args.merges)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read vocabulary: {exc}") from exc
    if args.builtin:
        return builtin_vocab(args.builtin)
    raise CliError("a vocabulary is required (--vocab/--merges or --builtin)")


def _seed(args, required: bool) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("STOKTOK_SEED")
    if env:
        try:
            return int(env, 0)
        except ValueError as exc:
            raise CliError(f"STOKTOK_SEED is not an integer: {env!r}") from exc
    if required:
        raise CliError("a seed is required for stochastic output (--seed or STOKTOK_SEED)")
    return None


def _spec(args) -> SamplerSpec:
    cfg = {
        "scheme": args.scheme,
        "alpha": args.alpha,
        "k": args.k,
        "p_drop": args.p_drop,
        "k_max": args.k_max,
        "tree_mode": args.tree_mode,
        "arity": args.arity,
        "retry": args.retry,
    }
    return SamplerSpec.from_config({k: v for k, v in cfg.items() if v is not None})


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--config", help="flat key=value file; keys mirror long flag names, flags win")
    g.add_argument("--vocab", help="vocab.json (escaped token -> id)")
    g.add_argument("--merges", help="merges.txt (LEFT RIGHT per line)")
    g.add_argument("--builtin", choices=BUILTIN_VOCABS, help="use a bundled vocabulary")
    g.add_argument("--input", "-i", help="input file (default stdin)")
    g.add_argument("--output", "-o", help="output file (default stdout)")
    g.add_argument("--seed", type=lambda s: int(s, 0), help="64-bit seed (fallback: STOKTOK_SEED)")
    g.add_argument("--parallel", type=int, default=1, help="worker processes")
    g.add_argument("--pretokenise", action="store_true", help="split input at whitespace boundaries")


def _sampler_flags(p: argparse.ArgumentParser, default_scheme: str | None = "canonical") -> None:
    g = p.add_argument_group("sampler")
    g.add_argument("--scheme", choices=SCHEMES, default=default_scheme)
    g.add_argument("--alpha", type=float)
    g.add_argument("--k", type=int)
    g.add_argument("--p-drop", dest="p_drop", type=float)
    g.add_argument("--k-max", dest="k_max", type=int)
    g.add_argument("--tree-mode", dest="tree_mode", choices=TREE_MODES)
    g.add_argument("--arity", type=int, choices=(2, 3))
    g.add_argument("--retry", action="store_const", const=True, default=None,
                   help="stochastok: choose only splittable positions")
    g.add_argument("--no-fallback", dest="fallback", action="store_false",
                   help="uniform-k: fail (exit 3) instead of falling back to a lower layer")
    g.add_argument("--draws", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stoktok", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="canonical BPE encoding, one JSON line per input line")
    _common(p)
    p = sub.add_parser("decode", help="JSON lines with 'ids' back to text")
    _common(p)
    p.add_argument("--raw", action="store_true", help="write raw bytes instead of JSON")
    p = sub.add_parser("sample", help="draw stochastic tokenisations")
    _common(p)
    _sampler_flags(p)
    p = sub.add_parser("count", help="number of valid tokenisations")
    _common(p)
    p.add_argument("--by-distance", action="store_true", help="also count per distance from canonical")
    p = sub.add_parser("enumerate", help="list every valid tokenisation")
    _common(p)
    p.add_argument("--limit", type=int)
    p.add_argument("--override", action="store_true", help="lift the 24-byte guard")
    p = sub.add_parser("distance", help="token edit distance for JSON lines {reference, candidate}")
    _common(p)
    p = sub.add_parser("splitdist", help="split-count generating functions and conditionals")
    _common(p)
    p.add_argument("--k", type=int, help="total split count to condition on (default: every feasible k)")
    p.add_argument("--tree-mode", dest="tree_mode", choices=TREE_MODES, default=TREE_MODES[0])
    p = sub.add_parser("histogram", help="empirical distribution of sampled tokenisations")
    _common(p)
    _sampler_flags(p)
    p.add_argument("--reference", help="JSON object outcome -> probability to compare against (TV)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p = sub.add_parser("attack", help="greedy adversarial tokenisation over an MCQ dataset")
    _common(p)
    p.add_argument("--dataset", help="JSONL {question, options, label} (default: bundled synthetic set)")
    p.add_argument("--scorer", default="toy:constant",
                   help="toy:<constant|length-penalty|hash-ngram>, proto:<command>, or proto:<host>:<port>")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--init", choices=("canonical", "uniform-random"), default="canonical")
    p.add_argument("--report", help="per-instance JSONL report (default: stdout, before the summary)")
    p = sub.add_parser("accuracy", help="Monte-Carlo accuracy under a stochastic scheme")
    _common(p)
    _sampler_flags(p)
    p.add_argument("--dataset")
    p.add_argument("--scorer", default="toy:constant")
    p = sub.add_parser("serve-scorer", help="answer scorer protocol requests on stdin/stdout or TCP")
    p.add_argument("--scorer", default="toy:hash-ngram")
    p.add_argument("--seed", type=lambda s: int(s, 0), default=0)
    p.add_argument("--port", type=int, help="listen on TCP instead of stdin/stdout")
    p.add_argument("--config")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}") from exc
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("["):
            continue
        if "=" not in line:
            raise CliError(f"{args.config}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    # re-parse with config values prepended so explicit flags override them
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    subparser = sub_action.choices[args.command]
    prefix: list[str] = []
    known = {a.dest: a for a in subparser._actions}
    for key, value in values.items():
        action = known.get(key)
        if action is None:
            raise CliError(f"{args.config}: unknown key {key!r}")
        flag = action.option_strings[-1] if action.option_strings[-1].startswith("--") else action.option_strings[0]
        if action.nargs == 0:
            try:
                wanted = _parse_bool(value)
            except ValueError as exc:
                raise CliError(f"{args.config}: {key}: {exc}") from exc
            if wanted == action.const:
                prefix.append(flag)
        else:
            prefix.extend([flag, value])
    return parser.parse_args([args.command, *prefix, *argv[argv.index(args.command) + 1:]])


def _make_scorer(desc: str, seed: int, vocab: Vocabulary | None = None, dataset=None):
    kind, _, rest = desc.partition(":")
    if kind == "toy":
        if rest == "length-penalty":
            if dataset is None or vocab is None:
                raise CliError("length-penalty scorer needs a dataset and vocabulary")
            favoured = [
                encode_canonical(inst.options[inst.label], vocab).ids for inst in dataset
            ]
            return adv.toy_scorer("length-penalty", seed, favoured=favoured)
        try:
            return adv.toy_scorer(rest, seed)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
    if kind == "proto":
        host, _, port = rest.rpartition(":")
        if host and port.isdigit() and " " not in rest:
            return adv.SocketScorer(host, int(port))
        return adv.ProcessScorer(shlex.split(rest))
    raise CliError(f"unknown scorer {desc!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_encode(args) -> None:
    vocab = _load_vocab(args)
    lines = _read_lines(args.input)
    state = {"vocab": vocab, "pretokenise": args.pretokenise}
    with _Output(args.output) as out:
        for chunk in _fan_out(_work_encode, lines, state, args.parallel):
            for rec in chunk:
                out.line(rec)


def cmd_decode(args) -> None:
    vocab = _load_vocab(args)
    with _Output(args.output) as out:
        for lineno, line in enumerate(_read_lines(args.input), 1):
            try:
                ids = json.loads(line)["ids"]
                text = decode(ids, vocab)
            except (ValueError, KeyError, TypeError) as exc:
                raise CliError(f"line {lineno}: {exc}") from exc
            if args.raw:
                out.line(text)
            else:
                out.line(_dumps({"text": text.decode("utf-8", errors="backslashreplace")}))


def _sampling_state(args, vocab) -> dict:
    spec = _spec(args)
    stochastic = spec.scheme != "canonical"
    if args.draws < 1:
        raise CliError("--draws must be >= 1")
    return {
        "vocab": vocab,
        "spec": spec,
        "pretokenise": args.pretokenise,
        "seed": _seed(args, stochastic) or 0,
        "draws": args.draws,
        "fallback": args.fallback,
    }


def cmd_sample(args) -> None:
    vocab = _load_vocab(args)
    state = _sampling_state(args, vocab)
    lines = _read_lines(args.input)
    with _Output(args.output) as out:
        for chunk in _fan_out(_work_sample, lines, state, args.parallel):
            for rec in chunk:
                out.line(rec)


def cmd_count(args) -> None:
    vocab = _load_vocab(args)
    state = {"vocab": vocab, "pretokenise": args.pretokenise, "by_distance": args.by_distance}
    with _Output(args.output) as out:
        for chunk in _fan_out(_work_count, _read_lines(args.input), state, args.parallel):
            for rec in chunk:
                out.line(rec)


def cmd_enumerate(args) -> None:
    vocab = _load_vocab(args)
    state = {"vocab": vocab, "pretokenise": args.pretokenise, "limit": args.limit, "override": args.override}
    with _Output(args.output) as out:
        for chunk in _fan_out(_work_enumerate, _read_lines(args.input), state, args.parallel):
            for rec in chunk:
                out.line(rec)


def cmd_distance(args) -> None:
    vocab = _load_vocab(args)
    with _Output(args.output) as out:
        for lineno, line in enumerate(_read_lines(args.input), 1):
            try:
                obj = json.loads(line)
                ref = TokenSeq.from_ids(obj["reference"], vocab)
                cand = TokenSeq.from_ids(obj["candidate"], vocab)
            except (ValueError, KeyError, TypeError) as exc:
                raise CliError(f"line {lineno}: {exc}") from exc
            if decode(ref, vocab) != decode(cand, vocab):
                raise CliError(f"line {lineno}: reference and candidate decode to different strings")
            d = token_edit_distance(ref, cand)
            out.line(_dumps({
                "line": lineno - 1,
                "distance": d,
                "span_distance": span_distance(ref, cand),
                "id_distance": token_edit_distance(ref, cand, positional=False),
                "matched": len(cand) - d,
                "reference_len": len(ref),
                "candidate_len": len(cand),
            }))


def cmd_splitdist(args) -> None:
    vocab = _load_vocab(args)
    forest = SegmentForest(vocab, build_split_map(vocab, 2))
    state = {"vocab": vocab, "forest": forest, "pretokenise": args.pretokenise,
             "k": args.k, "tree_mode": args.tree_mode}
    with _Output(args.output) as out:
        for chunk in _fan_out(_work_splitdist, _read_lines(args.input), state, args.parallel):
            for rec in chunk:
                out.line(rec)


def cmd_histogram(args) -> None:
    vocab = _load_vocab(args)
    state = _sampling_state(args, vocab)
    reference = None
    if args.reference:
        try:
            reference = json.loads(Path(args.reference).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read reference pmf: {exc}") from exc
    hists = _fan_out(_work_histogram, _read_lines(args.input), state, args.parallel)
    with _Output(args.output) as out:
        for index, hist in enumerate(hists):
            if args.format == "csv":
                out.line(f"# line {index}")
                out.line(hist.to_csv().rstrip("\n"))
                continue
            rec = {"line": index, "draws": hist.total, "pmf": hist.pmf()}
            if reference is not None:
                rec["tv"] = tv_distance(hist, reference)
            out.line(_dumps(rec))


def _dataset(args):
    path = args.dataset or data_path("synthetic_mcq.jsonl")
    try:
        return adv.load_dataset(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read dataset: {exc}") from exc


def cmd_attack(args) -> None:
    if not args.vocab and not args.builtin:
        args.builtin = "synthetic"
    vocab = _load_vocab(args)
    dataset = _dataset(args)
    seed = _seed(args, args.init != "canonical") or 0
    try:
        cfg = adv.AttackConfig(max_steps=args.steps, radius=args.radius, init=args.init, seed=seed)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    scorer = _make_scorer(args.scorer, seed, vocab, dataset)
    try:
        clean, adv_acc, results = adv.adversarial_accuracy(
            scorer, dataset, cfg, vocab, args.pretokenise, args.parallel
        )
    finally:
        if hasattr(scorer, "close"):
            scorer.close()
    summary = _dumps({
        "summary": True,
        "n": len(results),
        "clean_accuracy": clean,
        "adversarial_accuracy": adv_acc,
        "successes": sum(r.success for r in results),
        "steps": cfg.max_steps,
        "radius": cfg.radius,
        "init": cfg.init,
    })
    lines = [json.dumps({"v": SCHEMA_VERSION, **r.to_json(i)}, separators=(",", ":")) for i, r in enumerate(results)]
    if args.report:
        with _Output(args.report) as rep:
            for line in lines:
                rep.line(line)
        lines = []
    with _Output(args.output) as out:
        for line in lines:
            out.line(line)
        out.line(summary)


def cmd_accuracy(args) -> None:
    if not args.vocab and not args.builtin:
        args.builtin = "synthetic"
    vocab = _load_vocab(args)
    dataset = _dataset(args)
    spec = _spec(args)
    seed = _seed(args, spec.scheme != "canonical") or 0
    scorer = _make_scorer(args.scorer, seed, vocab, dataset)
    import random

    try:
        acc = adv.avg_accuracy(scorer, dataset, spec, args.draws, random.Random(seed), vocab, args.pretokenise)
    finally:
        if hasattr(scorer, "close"):
            scorer.close()
    with _Output(args.output) as out:
        out.line(_dumps({"accuracy": acc, "n": len(dataset), "draws": args.draws, "scheme": spec.scheme}))


def cmd_serve_scorer(args) -> None:
    kind, _, rest = args.scorer.partition(":")
    if kind != "toy" or rest == "length-penalty":
        raise CliError("serve-scorer supports toy:constant and toy:hash-ngram")
    scorer = adv.toy_scorer(rest, args.seed)
    if args.port is None:
        adv.serve_lines(scorer, sys.stdin, sys.stdout)
        return
    import socketserver

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            import io

            adv.serve_lines(scorer, io.TextIOWrapper(self.rfile, encoding="utf-8"),
                            io.TextIOWrapper(self.wfile, encoding="utf-8", write_through=True))

    with socketserver.ThreadingTCPServer(("127.0.0.1", args.port), Handler) as server:
        print(json.dumps({"listening": server.server_address[1]}), flush=True)
        server.serve_forever()


COMMANDS = {
    "encode": cmd_encode,
    "decode": cmd_decode,
    "sample": cmd_sample,
    "count": cmd_count,
    "enumerate": cmd_enumerate,
    "distance": cmd_distance,
    "splitdist": cmd_splitdist,
    "histogram": cmd_histogram,
    "attack": cmd_attack,
    "accuracy": cmd_accuracy,
    "serve-scorer": cmd_serve_scorer,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        COMMANDS[args.command](args)
    except CliError as exc:
        print(f"stoktok: {exc}", file=sys.stderr)
        return exc.code
    except InfeasibleError as exc:
        print(f"stoktok: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except adv.ScorerError as exc:
        print(f"stoktok: scorer: {exc}", file=sys.stderr)
        return EXIT_SCORER
    except (VocabularyError, ValueError) as exc:
        print(f"stoktok: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
