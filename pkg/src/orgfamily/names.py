"""Organization-name normalization and token similarity.

Shared by the corpus filter (dictionary matching against chunk text) and
the family builder (alias clustering).  A name is normalized by

* splitting into alphanumeric tokens, joining across inner ``.`` and
  apostrophes so that ``S.A.`` becomes ``sa`` and ``d'Ivoire`` ``divoire``,
* folding accents and case,
* dropping legal-suffix stop tokens (``inc``, ``llc``, ``ltd`` ...).
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from typing import Iterable

DEFAULT_STOP_TOKENS: frozenset[str] = frozenset(
    {"inc", "llc", "ltd", "llp", "corp", "co", "sa", "ag", "gmbh", "pvt", "plc"}
)

# a token is a run of letters/digits, optionally glued by "." or apostrophes
_TOKEN_RE = re.compile(r"[^\W_]+(?:[.'’][^\W_]+)*")
_GLUE_RE = re.compile(r"[.'’]")


@dataclass(frozen=True)
class Token:
    norm: str
    raw: str
    start: int
    end: int


def unglue(raw: str) -> str:
    return _GLUE_RE.sub("", raw)


def fold(raw: str) -> str:
    text = _GLUE_RE.sub("", raw)
    text = unicodedata.normalize("NFKD", text)
    text = "".join(c for c in text if not unicodedata.combining(c))
    return text.casefold()


def tokenize(text: str, stop_tokens: Iterable[str] = DEFAULT_STOP_TOKENS) -> list[Token]:
    """Tokenize ``text`` keeping character offsets into the original string."""
    stop = stop_tokens if isinstance(stop_tokens, (set, frozenset)) else frozenset(stop_tokens)
    out = []
    for m in _TOKEN_RE.finditer(text):
        norm = fold(m.group())
        if norm and norm not in stop:
            out.append(Token(norm, m.group(), m.start(), m.end()))
    return out


def name_tokens(name: str, stop_tokens: Iterable[str] = DEFAULT_STOP_TOKENS) -> list[str]:
    return [t.norm for t in tokenize(name, stop_tokens)]


def normalize(name: str, stop_tokens: Iterable[str] = DEFAULT_STOP_TOKENS) -> str:
    """``"Limelight Networks, Inc."`` -> ``"limelight networks"``."""
    return " ".join(name_tokens(name, stop_tokens))


def name_key(name: str, stop_tokens: Iterable[str] = DEFAULT_STOP_TOKENS) -> str:
    """Equality key for alias strings.

    Falls back to the trimmed, case-folded raw string when normalization
    leaves nothing (e.g. a name made only of suffixes such as ``"Co."``).
    """
    return normalize(name, stop_tokens) or name.strip().casefold()


def jaccard(a: str, b: str, stop_tokens: Iterable[str] = DEFAULT_STOP_TOKENS) -> float:
    ta = set(name_tokens(a, stop_tokens))
    tb = set(name_tokens(b, stop_tokens))
    if not ta and not tb:
        return 1.0 if a == b else 0.0
    return len(ta & tb) / len(ta | tb)


def short_ambiguous_token(name: str, stop_tokens: Iterable[str] = DEFAULT_STOP_TOKENS) -> str | None:
    """Return the raw token if ``name`` reduces to one token of <= 3 chars.

    Such names (``"BT plc"``, ``"IBM"``) collide with ordinary words once
    case-folded, so matchers must find them with their original casing.
    """
    toks = tokenize(name, stop_tokens)
    if len(toks) == 1 and len(toks[0].norm) <= 3:
        return unglue(toks[0].raw)
    return None
