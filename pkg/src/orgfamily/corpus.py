"""Turn harvested pages into entity-tagged, relevance-filtered text chunks."""

from __future__ import annotations

import json
import logging
import re
import subprocess
from dataclasses import dataclass, field, replace
from html.parser import HTMLParser
from typing import Iterable, Protocol, Sequence

from .harvest import STATUS_OK, HarvestDocument
from .names import DEFAULT_STOP_TOKENS, Token, normalize, short_ambiguous_token, tokenize, unglue
from .registry import OrgRecord

log = logging.getLogger(__name__)

DEFAULT_MAX_CHUNK_CHARS = 1000
DEFAULT_OVERLAP_CHARS = 100

_SKIP_TAGS = {"script", "style", "noscript", "template", "svg", "iframe", "head"}
_BLOCK_TAGS = {
    "address", "article", "aside", "blockquote", "br", "dd", "div", "dl", "dt",
    "figcaption", "footer", "form", "h1", "h2", "h3", "h4", "h5", "h6", "header",
    "hr", "li", "main", "nav", "ol", "p", "pre", "section", "table", "td", "th",
    "title", "tr", "ul",
}


class _TextExtractor(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self._skip = 0
        self._in_title = False

    def handle_starttag(self, tag, attrs):
        if tag == "title":
            self._in_title = True
        elif tag in _SKIP_TAGS:
            self._skip += 1
        if tag in _BLOCK_TAGS:
            self.parts.append("\n")

    def handle_startendtag(self, tag, attrs):
        if tag in _BLOCK_TAGS:
            self.parts.append("\n")

    def handle_endtag(self, tag):
        if tag == "title":
            self._in_title = False
        elif tag in _SKIP_TAGS and self._skip:
            self._skip -= 1
        if tag in _BLOCK_TAGS:
            self.parts.append("\n")

    def handle_data(self, data):
        # <title> sits inside <head>, which is otherwise skipped
        if self._in_title or not self._skip:
            self.parts.append(data)


_SPACES = re.compile(r"[ \t\r\f\v\xa0]+")


def _decode(body: bytes, content_type: str = "") -> str:
    m = re.search(r"charset=([\w-]+)", content_type or "")
    if m:
        try:
            return body.decode(m.group(1), errors="replace")
        except LookupError:
            pass
    return body.decode("utf-8", errors="replace")


def extract_text(body: bytes, content_type: str = "text/html") -> str:
    """Visible text with one blank line between blocks."""
    raw = _decode(body, content_type)
    if "html" in (content_type or "") or raw.lstrip().startswith("<"):
        p = _TextExtractor()
        p.feed(raw)
        p.close()
        raw = "".join(p.parts)
    lines = (_SPACES.sub(" ", ln).strip() for ln in raw.splitlines())
    return "\n\n".join(ln for ln in lines if ln)


# ------------------------------------------------------------------ chunks


@dataclass(frozen=True)
class TextChunk:
    chunk_id: str
    org_record_id: str
    doc_id: str
    url: str
    text: str
    char_span: tuple[int, int]
    entity_mentions: frozenset[str] = frozenset()

    def to_dict(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "org_record_id": self.org_record_id,
            "doc_id": self.doc_id,
            "url": self.url,
            "text": self.text,
            "char_span": list(self.char_span),
            "entity_mentions": sorted(self.entity_mentions),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TextChunk":
        return cls(
            d["chunk_id"], d["org_record_id"], d["doc_id"], d.get("url", ""), d["text"],
            tuple(d["char_span"]), frozenset(d.get("entity_mentions", ())),
        )


_PARA_BREAK = re.compile(r"\n\s*\n")
_SENTENCE_BREAK = re.compile(r"[.!?][\"')\]]?\s|\n")
_SPACE_BREAK = re.compile(r"\s")


def split_text(text: str, max_chunk_chars: int = DEFAULT_MAX_CHUNK_CHARS,
               overlap_chars: int = DEFAULT_OVERLAP_CHARS) -> list[tuple[int, int]]:
    """Character spans covering ``text``; neighbours share ``overlap_chars``.

    A chunk ends at the last paragraph break inside its size budget, else the
    last sentence end, else the last whitespace, else a hard cut.  Breaks in
    the first half of the window are ignored so that chunks stay sizeable.
    """
    if max_chunk_chars <= 0 or not 0 <= overlap_chars < max_chunk_chars:
        raise ValueError("need max_chunk_chars > overlap_chars >= 0")
    spans: list[tuple[int, int]] = []
    n = len(text)
    start = 0
    min_len = max(overlap_chars + 1, max_chunk_chars // 2)
    while start < n:
        limit = start + max_chunk_chars
        if limit >= n:
            spans.append((start, n))
            break
        end = limit
        window = text[start + min_len : limit]
        for pattern in (_PARA_BREAK, _SENTENCE_BREAK, _SPACE_BREAK):
            last = None
            for m in pattern.finditer(window):
                last = m
            if last is not None:
                end = start + min_len + last.end()
                break
        spans.append((start, end))
        start = end - overlap_chars
    return spans


def split_chunks(doc: HarvestDocument, max_chunk_chars: int = DEFAULT_MAX_CHUNK_CHARS,
                 overlap_chars: int = DEFAULT_OVERLAP_CHARS) -> list[TextChunk]:
    if doc.status != STATUS_OK:
        raise ValueError(f"document {doc.doc_id} has status {doc.status}")
    text = extract_text(doc.body, doc.content_type)
    return [
        TextChunk(f"{doc.doc_id}-{i:04d}", doc.org_record_id, doc.doc_id, doc.url, text[a:b], (a, b))
        for i, (a, b) in enumerate(split_text(text, max_chunk_chars, overlap_chars))
    ]


# ------------------------------------------------------------ entity names


def _occurs(name_norm: list[str], exact: str | None, tokens: Sequence[Token]) -> bool:
    L = len(name_norm)
    if not L:
        return False
    for i in range(len(tokens) - L + 1):
        if all(tokens[i + j].norm == name_norm[j] for j in range(L)):
            if exact is None or unglue(tokens[i].raw) == exact:
                return True
    return False


@dataclass
class GlobalNameList:
    names: set[str]
    stop_tokens: frozenset[str] = DEFAULT_STOP_TOKENS
    normalized_index: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.stop_tokens = frozenset(self.stop_tokens)
        index: dict[str, set[str]] = {}
        for name in self.names:
            key = normalize(name, self.stop_tokens)
            if key:
                index.setdefault(key, set()).add(name)
        self.normalized_index = {k: sorted(v) for k, v in index.items()}
        self._lengths = sorted({k.count(" ") + 1 for k in index}, reverse=True)

    @classmethod
    def from_records(cls, records: Iterable[OrgRecord], stop_tokens=DEFAULT_STOP_TOKENS) -> "GlobalNameList":
        return cls({r.canonical_name for r in records}, stop_tokens)

    def tokens(self, text: str) -> list[Token]:
        return tokenize(text, self.stop_tokens)

    def occurs(self, name: str, tokens: Sequence[Token]) -> bool:
        """Whole-token occurrence of ``name`` (exact case for short names)."""
        return _occurs(
            normalize(name, self.stop_tokens).split(),
            short_ambiguous_token(name, self.stop_tokens),
            tokens,
        )

    def lookup(self, span: str) -> list[str]:
        return self.normalized_index.get(normalize(span, self.stop_tokens), [])

    def scan(self, text: str) -> list[str]:
        """Surface spans in ``text`` whose normalized form is a listed name."""
        tokens = self.tokens(text)
        norms = [t.norm for t in tokens]
        spans = []
        for i in range(len(tokens)):
            for L in self._lengths:
                if i + L <= len(tokens) and " ".join(norms[i : i + L]) in self.normalized_index:
                    spans.append(text[tokens[i].start : tokens[i + L - 1].end])
        return spans


class EntityExtractor(Protocol):
    def extract(self, text: str) -> list[str]: ...


class DictionaryExtractor:
    """Default extractor: whole-token dictionary lookup over the name list."""

    def __init__(self, names: GlobalNameList):
        self.names = names

    def extract(self, text: str) -> list[str]:
        return self.names.scan(text)


class SubprocessExtractor:
    """External extractor speaking JSON lines: ``{"text": ...}`` -> ``{"spans": [...]}``."""

    def __init__(self, command: Sequence[str]):
        self.proc = subprocess.Popen(
            list(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, encoding="utf-8", bufsize=1,
        )

    def extract(self, text: str) -> list[str]:
        assert self.proc.stdin and self.proc.stdout
        self.proc.stdin.write(json.dumps({"text": text}) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise RuntimeError("entity extractor process exited")
        return [s for s in json.loads(line).get("spans", []) if isinstance(s, str)]

    def close(self) -> None:
        if self.proc.stdin:
            self.proc.stdin.close()
        self.proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def extract_entities(chunk: TextChunk, names: GlobalNameList, extractor: EntityExtractor) -> set[str]:
    """Listed names behind the extractor's spans that really occur in the chunk."""
    tokens = names.tokens(chunk.text)
    found: set[str] = set()
    for span in extractor.extract(chunk.text):
        for name in names.lookup(span):
            if name not in found and names.occurs(name, tokens):
                found.add(name)
    return found


def tag_chunks(chunks: Iterable[TextChunk], names: GlobalNameList,
               extractor: EntityExtractor) -> list[TextChunk]:
    return [replace(c, entity_mentions=frozenset(extract_entities(c, names, extractor))) for c in chunks]


def mentions_target(chunk: TextChunk, target: OrgRecord, names: GlobalNameList) -> bool:
    tokens = names.tokens(chunk.text)
    return any(names.occurs(n, tokens) for n in target.target_names() if n)


def filter_relevant(chunks: Iterable[TextChunk], target: OrgRecord,
                    names: GlobalNameList) -> tuple[list[TextChunk], list[str]]:
    """Keep chunks naming the target and at least one other listed organization.

    ``target.candidate_orgs`` is extended with the co-mentioned names.
    """
    kept: list[TextChunk] = []
    candidates: list[str] = []
    for chunk in chunks:
        others = sorted(chunk.entity_mentions - {target.canonical_name})
        if not others or not mentions_target(chunk, target, names):
            continue
        kept.append(chunk)
        for name in others:
            if name not in candidates:
                candidates.append(name)
    for name in candidates:
        if name not in target.candidate_orgs:
            target.candidate_orgs.append(name)
    return kept, candidates
