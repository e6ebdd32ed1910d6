"""Stochastic and adversarial tokenisation over byte-level BPE vocabularies."""
from .enumeration import (
    InfeasibleError,
    SegmentForest,
    build_dag,
    build_distance_dag,
    count_tokenisations,
    enumerate_all,
)
from .fixtures import builtin_vocab
from .metrics import (
    Histogram,
    normalised_splits,
    span_distance,
    split_count_polynomials,
    split_count_vector,
    token_edit_distance,
    tv_distance,
)
from .samplers import SCHEMES, Draw, Sampler, SamplerSpec, sample
from .vocab import (
    TokenSeq,
    Vocabulary,
    VocabularyError,
    bpe_dropout_encode,
    build_split_map,
    decode,
    encode_canonical,
    load_vocabulary,
)

__all__ = [
    "SCHEMES", "Draw", "Histogram", "InfeasibleError", "Sampler", "SamplerSpec",
    "SegmentForest", "TokenSeq", "Vocabulary", "VocabularyError", "bpe_dropout_encode",
    "build_dag", "build_distance_dag", "builtin_vocab", "build_split_map", "count_tokenisations", "decode",
    "encode_canonical", "enumerate_all", "load_vocabulary", "normalised_splits", "sample",
    "span_distance", "split_count_polynomials", "split_count_vector", "token_edit_distance",
    "tv_distance",
]
__version__ = "0.1.0"
