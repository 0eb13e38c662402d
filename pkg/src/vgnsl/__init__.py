"""Grounded constituency parsing from paired captions and image features."""

from .errors import (
    BracketParseError,
    ConfigError,
    DataError,
    DegenerateInputError,
    FormatError,
    VgnslError,
)
from .trees import (
    BinaryTree,
    LabeledTree,
    Leaf,
    Node,
    SpanPolicy,
    format_binary,
    labeled_spans,
    parse_binary,
    parse_bracketed,
    spans_of,
)
from .corpus import (
    Caption,
    PairedExample,
    Vocabulary,
    batches,
    build_vocab,
    load_captions,
    load_features,
    pair_examples,
    write_features,
)
from .parser import ModelParams, ParseResult, combine, embed_tokens, init_params, parse, score_pairs, select_pair
from .vse import EncodedCaption, GradientSet, VseHyper, abstractness, concreteness, match_score, reward, reward_hi, vse_backward, vse_loss
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train
from .evaluation import EvalReport, corpus_f1, label_recall, pearson, select_checkpoints, self_f1, tune_objective

__version__ = "0.1.0"
