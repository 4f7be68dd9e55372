"""Corpus handling for engagement span annotation data.

An excerpt is a short multi-sentence text unit carrying tokenization,
sentence boundaries, an optional dependency parse, and labeled token
spans.  All operations here are pure: loaded corpora are treated as
immutable and transformations return new values.

Canonical serialization is JSON-lines, one excerpt per line:

    {"id": str, "source": str, "text": str,
     "tokens": [{"s": int, "e": int}, ...],
     "sentences": [[int, int], ...],
     "deps": [{"head": int, "rel": str}, ...] | null,
     "spans": [{"s": int, "e": int, "label": str, "annotator": str}, ...]}

Text is normalized to NFC; token offsets are byte offsets into its UTF-8
encoding.  Span offsets are half-open token indices.
"""

from __future__ import annotations

import json
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

# Canonical label scheme, in report row order.
LABELS = (
    "ATTRIBUTION",
    "COUNTER",
    "DENY",
    "ENTERTAIN",
    "MONOGLOSS",
    "PROCLAIM",
    "CITATION",
    "ENDOPHORIC",
    "JUSTIFYING",
    "SOURCES",
)

# Pre-collapse categories accepted on input.  CONTRIBUTION is an alias
# some exports use for the merged attribution class.
RAW_LABELS = ("ATTRIBUTE", "ENDORSE", "CONCUR", "PRONOUNCE", "CONTRIBUTION")

KNOWN_LABELS = frozenset(LABELS) | frozenset(RAW_LABELS)

# Evaluation-only sentinel for "no span on this side"; never stored.
EMPTY = "EMPTY"

COLLAPSE_MAP = {
    "CONCUR": "PROCLAIM",
    "PRONOUNCE": "PROCLAIM",
    "ENDORSE": "ATTRIBUTION",
    "ATTRIBUTE": "ATTRIBUTION",
    "CONTRIBUTION": "ATTRIBUTION",
}


class CorpusError(Exception):
    pass


class CorpusFormatError(CorpusError):
    """Unparseable input (bad JSON, malformed TSV row)."""


class CorpusValidationError(CorpusError):
    """Parsed input violating an excerpt or corpus invariant."""


@dataclass(frozen=True)
class Token:
    surface: str
    char_start: int
    char_end: int


@dataclass(frozen=True)
class DepArc:
    head: int
    relation: str


@dataclass(frozen=True)
class SpanAnnotation:
    start_tok: int
    end_tok: int
    label: str
    annotator: str

    @property
    def interval(self) -> tuple[int, int]:
        return (self.start_tok, self.end_tok)


@dataclass
class Excerpt:
    id: str
    source: str
    text: str
    tokens: list[Token]
    sentence_bounds: list[tuple[int, int]]
    deps: list[DepArc] | None
    spans: list[SpanAnnotation]

    def __len__(self) -> int:
        return len(self.tokens)

    def sentence_of(self, tok_idx: int) -> int:
        for i, (s, e) in enumerate(self.sentence_bounds):
            if s <= tok_idx < e:
                return i
        raise IndexError(f"token index {tok_idx} outside sentence bounds")


Corpus = list  # list[Excerpt]


@dataclass
class TagStats:
    counts: dict[str, int]
    total_spans: int
    total_tokens: int
    total_excerpts: int


@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    dev: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class FoldSet:
    folds: tuple[Fold, ...]
    seed: int


@dataclass(frozen=True)
class AuditRule:
    id: str
    pattern: tuple[str, ...]  # lowercased surface matchers; "*" matches any token
    condition: str  # span_must_exclude_prefix | span_crosses_sentence | label_unknown
    labels: tuple[str, ...] = ()  # restrict to these span labels; empty = all

    def __post_init__(self):
        if not self.pattern:
            raise ValueError(f"audit rule {self.id!r} has an empty pattern")
        if self.condition not in (
            "span_must_exclude_prefix",
            "span_crosses_sentence",
            "label_unknown",
        ):
            raise ValueError(f"audit rule {self.id!r}: unknown condition {self.condition!r}")


@dataclass(frozen=True)
class AuditFinding:
    excerpt_id: str
    span: SpanAnnotation
    rule_id: str


DEFAULT_AUDIT_RULES = (
    AuditRule(id="there-is-no", pattern=("there", "is"), condition="span_must_exclude_prefix", labels=("DENY",)),
    AuditRule(id="cross-sentence", pattern=("*",), condition="span_crosses_sentence"),
    AuditRule(id="unknown-label", pattern=("*",), condition="label_unknown"),
)


# --- validation ---------------------------------------------------------


def validate_excerpt(ex: Excerpt, strict_labels: bool = True) -> None:
    """Check every excerpt invariant; raise CorpusValidationError naming the field."""
    eid = ex.id
    n = len(ex.tokens)
    nbytes = len(ex.text.encode("utf-8"))

    prev_end = 0
    for i, tok in enumerate(ex.tokens):
        if not (0 <= tok.char_start < tok.char_end <= nbytes):
            raise CorpusValidationError(
                f"excerpt {eid!r}: token {i} offsets [{tok.char_start},{tok.char_end}) out of range"
            )
        if tok.char_start < prev_end:
            raise CorpusValidationError(f"excerpt {eid!r}: token {i} overlaps or disorders tokens")
        prev_end = tok.char_end

    bounds = ex.sentence_bounds
    pos = 0
    for j, (s, e) in enumerate(bounds):
        if s != pos or e <= s:
            raise CorpusValidationError(f"excerpt {eid!r}: sentence_bounds do not tile tokens at sentence {j}")
        pos = e
    if pos != n:
        raise CorpusValidationError(f"excerpt {eid!r}: sentence_bounds cover {pos} of {n} tokens")

    if ex.deps is not None:
        if len(ex.deps) != n:
            raise CorpusValidationError(f"excerpt {eid!r}: deps length {len(ex.deps)} != token count {n}")
        for i, arc in enumerate(ex.deps):
            if not (0 <= arc.head < n):
                raise CorpusValidationError(f"excerpt {eid!r}: deps[{i}].head {arc.head} out of range")
        # every head chain must end at a self-loop root
        state = [0] * n  # 0 unvisited, 1 on current path, 2 cleared
        for start in range(n):
            path = []
            u = start
            while state[u] == 0:
                state[u] = 1
                path.append(u)
                h = ex.deps[u].head
                if h == u:
                    break
                u = h
            if state[u] == 1 and ex.deps[u].head != u and (not path or path[-1] != u):
                raise CorpusValidationError(f"excerpt {eid!r}: dependency cycle through token {u}")
            for v in path:
                state[v] = 2

    seen_spans = set()
    for sp in ex.spans:
        if not (0 <= sp.start_tok < sp.end_tok <= n):
            raise CorpusValidationError(
                f"excerpt {eid!r}: span [{sp.start_tok},{sp.end_tok}) outside token range 0..{n}"
            )
        if sp.label == EMPTY:
            raise CorpusValidationError(f"excerpt {eid!r}: span labeled with reserved sentinel {EMPTY}")
        if strict_labels and sp.label not in KNOWN_LABELS:
            raise CorpusValidationError(f"excerpt {eid!r}: unknown label {sp.label!r} (strict mode)")
        key = (sp.start_tok, sp.end_tok, sp.label, sp.annotator)
        if key in seen_spans:
            raise CorpusValidationError(f"excerpt {eid!r}: duplicate span {key}")
        seen_spans.add(key)


def validate_corpus(corpus: list[Excerpt], strict_labels: bool = True) -> None:
    seen_ids = set()
    for ex in corpus:
        if ex.id in seen_ids:
            raise CorpusValidationError(f"duplicate excerpt id {ex.id!r}")
        seen_ids.add(ex.id)
        validate_excerpt(ex, strict_labels=strict_labels)


# --- JSONL import/export ------------------------------------------------


def _excerpt_from_obj(obj: dict, lineno: int) -> Excerpt:
    try:
        eid = obj["id"]
        text = unicodedata.normalize("NFC", obj["text"])
        tbytes = text.encode("utf-8")
        tokens = []
        for t in obj["tokens"]:
            s, e = int(t["s"]), int(t["e"])
            try:
                surface = tbytes[s:e].decode("utf-8")
            except (UnicodeDecodeError, ValueError) as err:
                raise CorpusValidationError(
                    f"excerpt {eid!r}: token bytes [{s},{e}) are not valid UTF-8: {err}"
                ) from None
            tokens.append(Token(surface=surface, char_start=s, char_end=e))
        sentences = [(int(a), int(b)) for a, b in obj["sentences"]]
        deps_obj = obj.get("deps")
        deps = None
        if deps_obj is not None:
            deps = [DepArc(head=int(d["head"]), relation=str(d.get("rel", ""))) for d in deps_obj]
        spans = [
            SpanAnnotation(
                start_tok=int(s["s"]),
                end_tok=int(s["e"]),
                label=str(s["label"]),
                annotator=str(s.get("annotator", "gold")),
            )
            for s in obj.get("spans", [])
        ]
        return Excerpt(
            id=str(eid),
            source=str(obj.get("source", "")),
            text=text,
            tokens=tokens,
            sentence_bounds=sentences,
            deps=deps,
            spans=spans,
        )
    except (KeyError, TypeError) as err:
        raise CorpusFormatError(f"line {lineno}: missing or malformed field: {err}") from None


def import_jsonl(path: str | Path, strict_labels: bool = True) -> list[Excerpt]:
    """Load and validate a corpus from canonical JSON-lines."""
    corpus: list[Excerpt] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise CorpusFormatError(f"line {lineno}: invalid JSON: {err}") from None
            ex = _excerpt_from_obj(obj, lineno)
            if ex.id in seen_ids:
                raise CorpusValidationError(f"line {lineno}: duplicate excerpt id {ex.id!r}")
            seen_ids.add(ex.id)
            validate_excerpt(ex, strict_labels=strict_labels)
            corpus.append(ex)
    return corpus


def excerpt_to_obj(ex: Excerpt) -> dict:
    return {
        "id": ex.id,
        "source": ex.source,
        "text": ex.text,
        "tokens": [{"s": t.char_start, "e": t.char_end} for t in ex.tokens],
        "sentences": [[s, e] for s, e in ex.sentence_bounds],
        "deps": None if ex.deps is None else [{"head": d.head, "rel": d.relation} for d in ex.deps],
        "spans": [
            {"s": sp.start_tok, "e": sp.end_tok, "label": sp.label, "annotator": sp.annotator}
            for sp in ex.spans
        ],
    }


def export_jsonl(corpus: list[Excerpt], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus:
            fh.write(json.dumps(excerpt_to_obj(ex), ensure_ascii=False) + "\n")


# --- TSV import ---------------------------------------------------------


def import_tsv(path: str | Path, column_map: dict, strict_labels: bool = True) -> list[Excerpt]:
    """Best-effort import of token-per-row TSV with `label[id]` span notation.

    `column_map` names zero-based column indices: {"surface": int,
    "label": int, optional "annotator": int}.  Blank lines separate
    sentences; `#id=<name>` lines start a new excerpt.  Span entries in
    the label column are pipe-separated `LABEL[id]` items (a bare LABEL
    is a single-token span); rows carrying the same id must be
    contiguous.
    """
    surface_col = int(column_map["surface"])
    label_col = int(column_map["label"])
    annot_col = int(column_map["annotator"]) if column_map.get("annotator") is not None else None
    default_annot = column_map.get("annotator_default", "gold")

    path = Path(path)
    corpus: list[Excerpt] = []
    auto_idx = 0

    cur_id: str | None = None
    rows: list[tuple[str, list[tuple[str, str | None]], str]] = []  # surface, [(label, span_id)], annotator
    sentence_breaks: list[int] = []

    def flush():
        nonlocal cur_id, rows, sentence_breaks, auto_idx
        if not rows:
            cur_id = None
            sentence_breaks = []
            return
        eid = cur_id if cur_id is not None else f"{path.stem}-{auto_idx}"
        auto_idx += 1
        corpus.append(_excerpt_from_rows(eid, rows, sentence_breaks, strict_labels))
        cur_id = None
        rows = []
        sentence_breaks = []

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if line.startswith("#id="):
                flush()
                cur_id = line[len("#id=") :].strip()
                continue
            if line.startswith("#"):
                continue
            if not line.strip():
                if rows and (not sentence_breaks or sentence_breaks[-1] != len(rows)):
                    sentence_breaks.append(len(rows))
                continue
            cols = line.split("\t")
            needed = max(surface_col, label_col, annot_col if annot_col is not None else 0)
            if len(cols) <= needed:
                raise CorpusFormatError(f"{path.name} line {lineno}: expected {needed + 1} columns, got {len(cols)}")
            surface = cols[surface_col]
            if not surface:
                raise CorpusFormatError(f"{path.name} line {lineno}: empty surface form")
            annotator = cols[annot_col] if annot_col is not None else default_annot
            rows.append((surface, _parse_label_cell(cols[label_col], path.name, lineno), annotator))
    flush()

    validate_corpus(corpus, strict_labels=strict_labels)
    return corpus


def _parse_label_cell(cell: str, fname: str, lineno: int) -> list[tuple[str, str | None]]:
    cell = cell.strip()
    if cell in ("", "_", "O", "*"):
        return []
    entries = []
    for item in cell.split("|"):
        item = item.strip()
        if not item:
            continue
        if item.endswith("]") and "[" in item:
            label, _, sid = item[:-1].partition("[")
            if not label or not sid:
                raise CorpusFormatError(f"{fname} line {lineno}: malformed span entry {item!r}")
            entries.append((label, sid))
        else:
            entries.append((item, None))
    return entries


def _excerpt_from_rows(eid, rows, sentence_breaks, strict_labels) -> Excerpt:
    # rebuild text with single-space separators; offsets are UTF-8 byte positions
    tokens: list[Token] = []
    pieces: list[str] = []
    pos = 0
    for i, (surface, _labels, _annot) in enumerate(rows):
        surface = unicodedata.normalize("NFC", surface)
        if i > 0:
            pos += 1  # the joining space
        b = len(surface.encode("utf-8"))
        tokens.append(Token(surface=surface, char_start=pos, char_end=pos + b))
        pieces.append(surface)
        pos += b
    text = " ".join(pieces)

    bounds: list[tuple[int, int]] = []
    start = 0
    for brk in sentence_breaks:
        if brk > start:
            bounds.append((start, brk))
            start = brk
    if start < len(rows):
        bounds.append((start, len(rows)))

    spans: list[SpanAnnotation] = []
    open_spans: dict[str, dict] = {}  # span id -> {label, start, end, annotator}
    closed_ids: set[str] = set()
    for i, (_surface, labels, annot) in enumerate(rows):
        seen_here = set()
        for label, sid in labels:
            if sid is None:
                spans.append(SpanAnnotation(start_tok=i, end_tok=i + 1, label=label, annotator=annot))
                continue
            seen_here.add(sid)
            if sid in open_spans:
                rec = open_spans[sid]
                if rec["end"] != i:
                    raise CorpusFormatError(f"excerpt {eid!r}: span id {sid!r} is non-contiguous at row {i}")
                if rec["label"] != label:
                    raise CorpusFormatError(f"excerpt {eid!r}: span id {sid!r} changes label at row {i}")
                rec["end"] = i + 1
            else:
                if sid in closed_ids:
                    raise CorpusFormatError(f"excerpt {eid!r}: span id {sid!r} is non-contiguous at row {i}")
                open_spans[sid] = {"label": label, "start": i, "end": i + 1, "annotator": annot}
        for sid in list(open_spans):
            if sid not in seen_here:
                rec = open_spans.pop(sid)
                closed_ids.add(sid)
                spans.append(
                    SpanAnnotation(rec["start"], rec["end"], rec["label"], rec["annotator"])
                )
    for sid, rec in open_spans.items():
        spans.append(SpanAnnotation(rec["start"], rec["end"], rec["label"], rec["annotator"]))
    spans.sort(key=lambda sp: (sp.start_tok, sp.end_tok, sp.label, sp.annotator))

    return Excerpt(
        id=str(eid),
        source="tsv",
        text=text,
        tokens=tokens,
        sentence_bounds=bounds,
        deps=None,
        spans=spans,
    )


# --- label collapsing ---------------------------------------------------


def collapse_labels(corpus: list[Excerpt]) -> list[Excerpt]:
    """Map pre-collapse categories onto the canonical scheme (idempotent)."""
    out = []
    for ex in corpus:
        spans = [
            replace(sp, label=COLLAPSE_MAP.get(sp.label, sp.label)) if sp.label in COLLAPSE_MAP else sp
            for sp in ex.spans
        ]
        # collapsing can merge previously distinct tuples; keep one copy
        seen = set()
        deduped = []
        for sp in spans:
            key = (sp.start_tok, sp.end_tok, sp.label, sp.annotator)
            if key not in seen:
                seen.add(key)
                deduped.append(sp)
        out.append(replace(ex, spans=deduped))
    return out


# --- statistics ---------------------------------------------------------


def tag_stats(corpus: list[Excerpt]) -> TagStats:
    counts: Counter[str] = Counter()
    total_tokens = 0
    for ex in corpus:
        total_tokens += len(ex.tokens)
        counts.update(sp.label for sp in ex.spans)
    return TagStats(
        counts=dict(counts),
        total_spans=sum(counts.values()),
        total_tokens=total_tokens,
        total_excerpts=len(corpus),
    )


# --- convention audits --------------------------------------------------


def _pattern_matches(pattern: tuple[str, ...], tokens: list[Token], start: int) -> bool:
    if start + len(pattern) > len(tokens):
        return False
    for off, matcher in enumerate(pattern):
        if matcher == "*":
            continue
        if tokens[start + off].surface.lower() != matcher.lower():
            return False
    return True


def audit_conventions(
    corpus: list[Excerpt], rules: tuple[AuditRule, ...] = DEFAULT_AUDIT_RULES
) -> list[AuditFinding]:
    """Run advisory consistency queries; the corpus is never modified."""
    findings: list[AuditFinding] = []
    for ex in corpus:
        for sp in ex.spans:
            for rule in rules:
                if rule.condition != "label_unknown" and rule.labels and sp.label not in rule.labels:
                    continue
                if rule.condition == "span_must_exclude_prefix":
                    if _pattern_matches(rule.pattern, ex.tokens, sp.start_tok):
                        findings.append(AuditFinding(ex.id, sp, rule.id))
                elif rule.condition == "span_crosses_sentence":
                    if ex.sentence_of(sp.start_tok) != ex.sentence_of(sp.end_tok - 1):
                        findings.append(AuditFinding(ex.id, sp, rule.id))
                elif rule.condition == "label_unknown":
                    allowed = KNOWN_LABELS | set(rule.labels)
                    if sp.label not in allowed:
                        findings.append(AuditFinding(ex.id, sp, rule.id))
    findings.sort(key=lambda f: (f.excerpt_id, f.span.start_tok, f.span.end_tok, f.rule_id))
    return findings


def load_audit_rules(path: str | Path) -> tuple[AuditRule, ...]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return tuple(
        AuditRule(
            id=r["id"],
            pattern=tuple(r["pattern"]),
            condition=r["condition"],
            labels=tuple(r.get("labels", ())),
        )
        for r in raw
    )


# --- cross-validation folds ---------------------------------------------


def make_folds(corpus: list[Excerpt], seed: int) -> FoldSet:
    """Five 80/10/10 splits with disjoint test and dev blocks across folds.

    Excerpt ids are shuffled by `seed` and cut into 10 contiguous blocks;
    fold i uses block 2i as test, block 2i+1 as dev, the rest as train.
    """
    n = len(corpus)
    if n < 10:
        raise CorpusValidationError(f"need at least 10 excerpts to build folds, got {n}")
    ids = [ex.id for ex in corpus]
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    shuffled = [ids[i] for i in order]

    base, extra = divmod(n, 10)
    blocks: list[list[str]] = []
    pos = 0
    for b in range(10):
        size = base + (1 if b < extra else 0)
        blocks.append(shuffled[pos : pos + size])
        pos += size

    folds = []
    for i in range(5):
        test_b, dev_b = 2 * i, 2 * i + 1
        train = [x for b in range(10) if b not in (test_b, dev_b) for x in blocks[b]]
        folds.append(Fold(train=tuple(train), dev=tuple(blocks[dev_b]), test=tuple(blocks[test_b])))
    return FoldSet(folds=tuple(folds), seed=seed)


def split_excerpts(corpus: list[Excerpt], fold: Fold) -> tuple[list[Excerpt], list[Excerpt], list[Excerpt]]:
    by_id = {ex.id: ex for ex in corpus}
    return (
        [by_id[i] for i in fold.train],
        [by_id[i] for i in fold.dev],
        [by_id[i] for i in fold.test],
    )


# --- minority oversampling ----------------------------------------------


def oversample_training(train_excerpts: list[Excerpt], alpha: float = 0.5) -> list[Excerpt]:
    """Duplicate whole excerpts carrying minority labels.

    A label L with count c_L < alpha * c_max gets multiplier
    ceil(alpha * c_max / c_L); each excerpt is emitted 1 + (largest
    multiplier among its minority labels - 1) times.  Apply to training
    splits only; dev/test must never pass through here.
    """
    if not train_excerpts:
        raise CorpusValidationError("oversample_training: empty training set")
    if not (0 < alpha <= 1):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    counts: Counter[str] = Counter()
    for ex in train_excerpts:
        counts.update(sp.label for sp in ex.spans)
    if not counts:
        return list(train_excerpts)
    c_max = max(counts.values())
    multipliers = {
        label: math.ceil(alpha * c_max / c)
        for label, c in counts.items()
        if c < alpha * c_max
    }
    out: list[Excerpt] = []
    for ex in train_excerpts:
        m = max((multipliers.get(sp.label, 1) for sp in ex.spans), default=1)
        out.extend([ex] * m)
    return out
