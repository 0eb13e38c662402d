"""Constituency trees and the bracket algebra used for evaluation.

Two tree flavors live here: unlabeled binary trees (what the parser and the
baselines produce) and labeled n-ary trees (what gold files contain).  Both
reduce to sets of half-open token spans, which is the currency all metrics
are computed in.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import List, Set, Tuple, Union

from .errors import BracketParseError, DataError

Span = Tuple[int, int]
SpanSet = Set[Span]


@dataclass(frozen=True)
class Leaf:
    index: int


@dataclass(frozen=True)
class Node:
    left: "BinaryTree"
    right: "BinaryTree"


BinaryTree = Union[Leaf, Node]


@dataclass
class LabeledTree:
    label: str
    children: list  # LabeledTree or str terminals, in order


class SpanPolicy(Enum):
    # Spans of length >= 2, excluding the whole-sentence span.  Trivial
    # brackets match for any binary predictor, so counting them only
    # inflates every system uniformly.
    EXCLUDE_TRIVIAL = "exclude-trivial"
    # Every constituent span, single tokens and the root included.
    ALL = "all"


def leaf_count(tree: BinaryTree) -> int:
    if isinstance(tree, Leaf):
        return 1
    return leaf_count(tree.left) + leaf_count(tree.right)


def token_count(tree) -> int:
    """Number of terminals under a binary or labeled tree."""
    if isinstance(tree, (Leaf, Node)):
        return leaf_count(tree)
    return len(terminals(tree))


def terminals(tree: LabeledTree) -> List[str]:
    out: List[str] = []

    def walk(node):
        for child in node.children:
            if isinstance(child, LabeledTree):
                walk(child)
            else:
                out.append(child)

    walk(tree)
    return out


def _collect_binary_spans(tree: BinaryTree, start: int, out: List[Span]) -> int:
    if isinstance(tree, Leaf):
        if tree.index != start:
            raise DataError(
                f"leaf index {tree.index} out of order (expected {start})"
            )
        out.append((start, start + 1))
        return start + 1
    mid = _collect_binary_spans(tree.left, start, out)
    end = _collect_binary_spans(tree.right, mid, out)
    out.append((start, end))
    return end


def _collect_labeled_spans(
    tree: LabeledTree, start: int, out: List[Tuple[str, Span]]
) -> int:
    pos = start
    for child in tree.children:
        if isinstance(child, LabeledTree):
            pos = _collect_labeled_spans(child, pos, out)
        else:
            out.append(("", (pos, pos + 1)))
            pos += 1
    out.append((tree.label, (start, pos)))
    return pos


def all_spans(tree) -> List[Span]:
    """Spans of every constituent (leaves and root included), in tree order."""
    if isinstance(tree, (Leaf, Node)):
        out: List[Span] = []
        _collect_binary_spans(tree, 0, out)
        return out
    labeled: List[Tuple[str, Span]] = []
    _collect_labeled_spans(tree, 0, labeled)
    return [span for _, span in labeled]


def spans_of(tree, policy: SpanPolicy = SpanPolicy.EXCLUDE_TRIVIAL) -> SpanSet:
    """Constituent spans retained by the given policy."""
    spans = all_spans(tree)
    if policy is SpanPolicy.ALL:
        return set(spans)
    n = max(end for _, end in spans)
    return {s for s in spans if s[1] - s[0] >= 2 and s != (0, n)}


def labeled_spans(tree: LabeledTree, label: str) -> SpanSet:
    """Spans of all constituents carrying exactly `label`.

    Length-1 spans are kept: gold phrases may dominate a single token, and a
    binary prediction trivially contains every length-1 span.
    """
    collected: List[Tuple[str, Span]] = []
    _collect_labeled_spans(tree, 0, collected)
    return {span for lab, span in collected if lab == label}


def format_binary(tree: BinaryTree, tokens: List[str]) -> str:
    """Render a binary tree as a whitespace-tokenized unlabeled bracketing."""
    n = leaf_count(tree)
    if n != len(tokens):
        raise DataError(f"tree has {n} leaves but {len(tokens)} tokens given")
    for tok in tokens:
        if not tok or re.search(r"[\s()]", tok):
            raise DataError(f"token {tok!r} cannot be bracketed")

    def render(node: BinaryTree) -> str:
        if isinstance(node, Leaf):
            return tokens[node.index]
        return f"( {render(node.left)} {render(node.right)} )"

    return render(tree)


def parse_binary(line: str) -> Tuple[BinaryTree, List[str]]:
    """Read one line of the unlabeled binary bracketing format.

    Inverse of format_binary: parentheses stand alone, tokens are
    whitespace-separated, and a bare token is a single-leaf tree.
    """
    items = [(m.group(), m.start()) for m in re.finditer(r"\S+", line)]
    if not items:
        raise BracketParseError("empty line", 0)
    tokens: List[str] = []
    pos = 0

    def parse_item() -> BinaryTree:
        nonlocal pos
        if pos >= len(items):
            raise BracketParseError("unbalanced parentheses", len(line))
        text, offset = items[pos]
        if text == ")":
            raise BracketParseError("unexpected ')'", offset)
        if text == "(":
            pos += 1
            left = parse_item()
            right = parse_item()
            if pos >= len(items):
                raise BracketParseError("unbalanced parentheses", len(line))
            text, offset = items[pos]
            if text != ")":
                raise BracketParseError("binary node needs exactly 2 children", offset)
            pos += 1
            return Node(left, right)
        if "(" in text or ")" in text:
            raise BracketParseError(f"malformed item {text!r}", offset)
        tokens.append(text)
        pos += 1
        return Leaf(len(tokens) - 1)

    tree = parse_item()
    if pos != len(items):
        raise BracketParseError("trailing text after tree", items[pos][1])
    return tree, tokens


_LABEL_BREAK = (" ", "\t", "(", ")")


def parse_bracketed(line: str) -> LabeledTree:
    """Read one PTB-style bracketed labeled tree.

    Labels follow '(' immediately; terminals are bare tokens.  Escaped
    parentheses inside tokens are rejected.
    """
    pos = _skip_ws(line, 0)
    if pos >= len(line):
        raise BracketParseError("empty line", pos)
    if line[pos] != "(":
        raise BracketParseError("expected '('", pos)
    tree, pos = _parse_labeled(line, pos)
    pos = _skip_ws(line, pos)
    if pos != len(line):
        raise BracketParseError("trailing text after tree", pos)
    return tree


def _skip_ws(line: str, pos: int) -> int:
    while pos < len(line) and line[pos].isspace():
        pos += 1
    return pos


def _parse_labeled(line: str, pos: int) -> Tuple[LabeledTree, int]:
    # caller guarantees line[pos] == "("
    open_at = pos
    pos += 1
    start = pos
    while pos < len(line) and line[pos] not in _LABEL_BREAK:
        pos += 1
    label = line[start:pos]
    if not label:
        raise BracketParseError("missing constituent label", open_at + 1)
    children: list = []
    while True:
        pos = _skip_ws(line, pos)
        if pos >= len(line):
            raise BracketParseError("unbalanced parentheses", len(line))
        ch = line[pos]
        if ch == ")":
            if not children:
                raise BracketParseError("empty constituent", pos)
            return LabeledTree(label, children), pos + 1
        if ch == "(":
            child, pos = _parse_labeled(line, pos)
            children.append(child)
            continue
        start = pos
        while pos < len(line) and line[pos] not in _LABEL_BREAK:
            pos += 1
        token = line[start:pos]
        if token.endswith("\\") and pos < len(line) and line[pos] in "()":
            raise BracketParseError("escaped parentheses are not supported", pos - 1)
        children.append(token)


def read_binary_file(path) -> List[Tuple[BinaryTree, List[str]]]:
    """One predicted (tree, tokens) pair per line."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            try:
                out.append(parse_binary(line))
            except BracketParseError as exc:
                raise BracketParseError(f"line {lineno}: {exc.message}", exc.offset)
    return out


def read_labeled_file(path) -> List[LabeledTree]:
    """One gold bracketed labeled tree per line."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            try:
                out.append(parse_bracketed(line))
            except BracketParseError as exc:
                raise BracketParseError(f"line {lineno}: {exc.message}", exc.offset)
    return out
