"""Greedy candidate-span generation from n-grams and dependency subtrees."""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import Excerpt


class SuggesterError(Exception):
    pass


@dataclass(frozen=True)
class SuggesterConfig:
    max_ngram_len: int = 12
    use_subtrees: bool = True
    restrict_ngrams_to_sentence: bool = True

    def __post_init__(self):
        if self.max_ngram_len < 1:
            raise ValueError(f"max_ngram_len must be >= 1, got {self.max_ngram_len}")


@dataclass
class RecallReport:
    found: int
    total: int
    recall: float | None  # None when there are no gold spans
    mean_candidates: float


def ngram_spans(excerpt: Excerpt, config: SuggesterConfig) -> list[tuple[int, int]]:
    """All token intervals of length 1..max_ngram_len, sorted by (start, end)."""
    spans: list[tuple[int, int]] = []
    if config.restrict_ngrams_to_sentence:
        regions = excerpt.sentence_bounds
    else:
        regions = [(0, len(excerpt.tokens))] if excerpt.tokens else []
    for lo, hi in regions:
        for start in range(lo, hi):
            for end in range(start + 1, min(start + config.max_ngram_len, hi) + 1):
                spans.append((start, end))
    spans.sort()
    return spans


def subtree_spans(excerpt: Excerpt) -> list[tuple[int, int]]:
    """Covering intervals of contiguous dependency subtrees, deduplicated.

    The subtree of token t is t plus every token whose head chain passes
    through t; non-contiguous subtrees are skipped entirely.
    """
    if excerpt.deps is None:
        raise SuggesterError(
            f"excerpt {excerpt.id!r} has no dependency parse; "
            "disable subtrees or supply parses"
        )
    n = len(excerpt.tokens)
    children: list[list[int]] = [[] for _ in range(n)]
    for i, arc in enumerate(excerpt.deps):
        if arc.head != i:
            children[arc.head].append(i)

    spans: set[tuple[int, int]] = set()
    for t in range(n):
        lo = hi = t
        size = 1
        stack = list(children[t])
        while stack:
            u = stack.pop()
            size += 1
            if u < lo:
                lo = u
            if u > hi:
                hi = u
            stack.extend(children[u])
        if size == hi - lo + 1:
            spans.add((lo, hi + 1))
    return sorted(spans)


def suggest_candidates(excerpt: Excerpt, config: SuggesterConfig) -> list[tuple[int, int]]:
    """Union of n-gram and (when enabled and a parse exists) subtree spans."""
    cands = set(ngram_spans(excerpt, config))
    if config.use_subtrees and excerpt.deps is not None:
        cands.update(subtree_spans(excerpt))
    return sorted(cands)


def suggester_recall(corpus: list[Excerpt], config: SuggesterConfig) -> RecallReport:
    """Fraction of gold spans whose exact interval the suggester produces."""
    found = 0
    total = 0
    n_candidates = 0
    for ex in corpus:
        cands = set(suggest_candidates(ex, config))
        n_candidates += len(cands)
        for sp in ex.spans:
            total += 1
            if (sp.start_tok, sp.end_tok) in cands:
                found += 1
    recall = (found / total) if total > 0 else None
    mean_c = n_candidates / len(corpus) if corpus else 0.0
    return RecallReport(found=found, total=total, recall=recall, mean_candidates=mean_c)
