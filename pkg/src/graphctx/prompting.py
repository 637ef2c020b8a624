"""Prompt templates for in-context node classification, label-visibility policies, and answer parsing."""

from __future__ import annotations

import math
import re
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .graph import Split, TextAttributedGraph
from .retrieval import RETRIEVERS, ContextBundle, Member

STRATEGY_KINDS = ("zero-shot", "one-shot", "few-shot", "rag", "query-rag", "label-rag", "fewshot-rag")
LABEL_POLICIES = ("train-only", "all", "pseudo")

# which parts of each context member a strategy shows: (text, label)
CONTEXT_CONTENT = {
    "zero-shot": (False, False),
    "one-shot": (True, True),
    "few-shot": (True, True),
    "rag": (True, False),
    "query-rag": (True, False),
    "label-rag": (False, True),
    "fewshot-rag": (True, True),
}

SYSTEM_MESSAGE = "You are a helpful text classifier."

_GUIDANCE = (
    "Make your decision based on the main topic and overall content of the text. "
    "If the text is ambiguous or does not clearly fit into any category, choose the closest match. "
    "Provide only the category name as the output."
)
_ZERO_SHOT_TASK = "Task: Classify the following text into one of the predefined categories: {categories}. " + _GUIDANCE
_CONTEXT_TASK = "Task: Classify the above text into one of the predefined categories: {categories}. {use} " + _GUIDANCE

_USE_SENTENCE = {
    "few-shot": "Use the provided few-shot examples to enhance your understanding of the topic and context for accurate classification.",
    "rag": "Use the provided references to enhance your understanding of the topic and context for accurate classification.",
    "query-rag": "Use the provided references to enhance your understanding of the topic and context for accurate classification.",
    "label-rag": "Use the provided category of reference texts to enhance your understanding of the topic and context for accurate classification.",
    "fewshot-rag": "Use the provided references and corresponding categories to enhance your understanding of the topic and context for accurate classification.",
}
_USE_SENTENCE["one-shot"] = _USE_SENTENCE["few-shot"]

_BLOCK_HEADER = {"one-shot": "Examples:", "few-shot": "Examples:"}

CHARS_PER_TOKEN = 4


class MissingLabelsError(ValueError):
    """The strategy shows labels but the label-visibility policy left no labeled context."""


@dataclass(frozen=True)
class Strategy:
    kind: str
    k: Optional[int] = None
    retriever: str = "graph"
    label_visibility: str = "train-only"
    hops: int = 1
    match_degree: bool = False

    def __post_init__(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGY_KINDS}")
        if self.retriever not in RETRIEVERS:
            raise ValueError(f"unknown retriever {self.retriever!r}")
        if self.label_visibility not in LABEL_POLICIES:
            raise ValueError(f"unknown label visibility {self.label_visibility!r}")
        if self.kind == "one-shot":
            if self.k not in (None, 1) or self.match_degree:
                raise ValueError("one-shot uses exactly one demonstration")
            object.__setattr__(self, "k", 1)
        if self.kind == "zero-shot" and self.k:
            raise ValueError("zero-shot takes no context")
        if self.k is not None and self.match_degree:
            raise ValueError("k and match_degree are mutually exclusive")
        if self.k is not None and self.k < 0:
            raise ValueError("k must be >= 0")

    @property
    def shows_text(self) -> bool:
        return CONTEXT_CONTENT[self.kind][0]

    @property
    def shows_labels(self) -> bool:
        return CONTEXT_CONTENT[self.kind][1]

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "k": self.k,
            "retriever": self.retriever,
            "label_visibility": self.label_visibility,
            "hops": self.hops,
            "match_degree": self.match_degree,
        }


@dataclass(frozen=True)
class PromptRecord:
    query_node: int
    strategy: Strategy
    rendered: str
    context: ContextBundle  # members actually rendered
    categories: tuple[str, ...]
    truncated: int = 0
    gold: Optional[int] = field(default=None, compare=False)


def _clean(text: str) -> str:
    # one record per line: embedded newlines would break the Text:/Answer: structure
    return " ".join(text.splitlines()).strip()


def render(kind: str, categories: Sequence[str], query_text: str, members: Sequence[Member]) -> str:
    """Render the template for ``kind``; an empty context renders the zero-shot prompt."""
    cats = ", ".join(categories)
    if kind == "zero-shot" or not members:
        lines = [_ZERO_SHOT_TASK.format(categories=cats)]
    else:
        show_text, show_label = CONTEXT_CONTENT[kind]
        lines = [
            _CONTEXT_TASK.format(categories=cats, use=_USE_SENTENCE[kind]),
            _BLOCK_HEADER.get(kind, "Reference:"),
        ]
        for m in members:
            if show_text:
                lines.append(f"Text: {_clean(m.text)}")
            if show_label:
                lines.append(f"Answer: {_clean(m.label or '')}")
    lines.append(f"Text: {_clean(query_text)}")
    lines.append("Answer:")
    return "\n".join(lines)


def build_prompt(
    g: TextAttributedGraph,
    v: int,
    strategy: Strategy,
    bundle: ContextBundle,
    *,
    token_budget: Optional[int] = None,
    fallback_zero_shot: bool = False,
) -> PromptRecord:
    """Render the prompt for node ``v`` from an already-assembled context bundle.

    Strategies that show labels refuse an empty bundle (unless it was requested empty,
    ``k=0``) and raise :class:`MissingLabelsError`; ``fallback_zero_shot`` renders the
    zero-shot prompt instead.  With ``token_budget`` (approximated as 4 characters per
    token) trailing context members are dropped until the prompt fits.
    """
    if bundle.query_node != v:
        raise ValueError(f"bundle is for node {bundle.query_node}, not {v}")
    members = list(bundle.members) if strategy.kind != "zero-shot" else []
    if strategy.shows_labels:
        if any(m.label is None for m in members):
            raise MissingLabelsError(f"{strategy.kind} context for node {v} has unlabeled members")
        requested_empty = bundle.k_requested == 0
        if not members and not requested_empty and not fallback_zero_shot:
            raise MissingLabelsError(f"no labeled context for node {v} under {strategy.label_visibility!r}")

    text = render(strategy.kind, g.categories, g.texts[v], members)
    truncated = 0
    if token_budget is not None:
        while members and len(text) > token_budget * CHARS_PER_TOKEN:
            members.pop()
            truncated += 1
            text = render(strategy.kind, g.categories, g.texts[v], members)

    return PromptRecord(
        query_node=v,
        strategy=strategy,
        rendered=text,
        context=bundle.with_members(members),
        categories=g.categories,
        truncated=truncated,
        gold=g.label_of(v),
    )


def assemble_bundle_labels(
    bundle: ContextBundle,
    g: TextAttributedGraph,
    split: Optional[Split],
    policy: str,
    responses: Optional[Mapping[int, str]] = None,
) -> ContextBundle:
    """Attach labels to context members according to the label-visibility policy.

    ``train-only`` keeps training members with their gold labels; ``all`` keeps every
    labeled member; ``pseudo`` uses gold labels for training members and cached model
    responses for the rest.  Members left without a label are dropped.
    """
    if policy not in LABEL_POLICIES:
        raise ValueError(f"unknown label policy {policy!r}")
    if policy == "pseudo" and responses is None:
        raise ValueError("pseudo label policy needs a response cache")
    if policy in ("train-only", "pseudo") and split is None:
        raise ValueError(f"{policy} label policy needs a split")
    train = frozenset(split.train) if split is not None else frozenset()

    kept: list[Member] = []
    for m in bundle.members:
        label: Optional[str] = None
        if policy == "all":
            label = g.label_name(m.node)
        elif m.node in train:
            label = g.label_name(m.node)
        elif policy == "pseudo":
            label = responses.get(m.node)  # type: ignore[union-attr]
        if label is not None:
            kept.append(Member(m.node, m.text, label, m.score))
    return bundle.with_members(kept, dropped=len(bundle.members) - len(kept))


@dataclass(frozen=True)
class ParsedAnswer:
    label: Optional[int]
    method: Optional[str]
    raw: str


_STRIP_CHARS = " \t\"'`“”‘’"
_TRAILING_PUNCT = ".,;:!?"


def _normalize(s: str) -> str:
    return " ".join(s.replace("_", " ").replace("-", " ").lower().split())


def _first_line(raw: str) -> str:
    for line in raw.splitlines():
        line = line.strip(_STRIP_CHARS)
        while line and line[-1] in _TRAILING_PUNCT:
            line = line[:-1].strip(_STRIP_CHARS)
        if line:
            return line
    return ""


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _contains_words(haystack: str, needle: str) -> bool:
    return bool(needle) and re.search(rf"(?<!\w){re.escape(needle)}(?!\w)", haystack) is not None


def parse_answer(raw: str, categories: Sequence[str]) -> ParsedAnswer:
    """Map a model reply onto a category index.

    Tries, in order: exact name, case/separator-insensitive name, a unique whole-word
    containment in either direction, and the closest name by edit distance when it is
    within a quarter of the name's length.
    """
    if not categories:
        raise ValueError("categories must be non-empty")
    answer = _first_line(raw)
    if not answer:
        return ParsedAnswer(None, None, raw)
    for i, c in enumerate(categories):
        if answer == c:
            return ParsedAnswer(i, "exact", raw)

    norm = _normalize(answer)
    norm_cats = [_normalize(c) for c in categories]
    for i, c in enumerate(norm_cats):
        if norm == c:
            return ParsedAnswer(i, "normalized", raw)

    hits = [i for i, c in enumerate(norm_cats) if _contains_words(norm, c) or _contains_words(c, norm)]
    if len(hits) == 1:
        return ParsedAnswer(hits[0], "substring", raw)

    best, best_d = None, None
    for i, c in enumerate(norm_cats):
        d = levenshtein(norm, c)
        if d <= math.ceil(0.25 * len(c)) and (best_d is None or d < best_d):
            best, best_d = i, d
    if best is not None:
        return ParsedAnswer(best, "edit-distance", raw)
    return ParsedAnswer(None, None, raw)
