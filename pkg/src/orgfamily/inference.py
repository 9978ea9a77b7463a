"""Relationship classification of (target, candidate) organization pairs."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Protocol, Sequence

import httpx
import yaml

from .corpus import TextChunk
from .errors import BackendError, VerdictParseError
from .registry import OrgRecord
from .store import DEFAULT_PAIR_K, ChunkIndex

log = logging.getLogger(__name__)

DEFAULT_RETRIES = 2

PROMPT_TEMPLATE = """\
You are an expert at determining how organizations that own or control Autonomous System (AS) numbers in computer
networks are related, using the provided context.

You will receive:
1) A **base_organization**.
2) A list of **candidate_organizations**.
3) **context** providing relevant organizational details.

### Definitions
For each (base_organization, candidate_organization) pair, decide which of the following relationships
best applies:

- Alias
  Both names refer to exactly the same legal entity or one is a historical name of the other.

- Parent/Subsidiary
  One organization has acquired or holds more than 50% ownership of the other.
  Choose between "base_organization" or "candidate_organization".

- No_relation
  There is insufficient evidence of alias, ownership or acquisition linking them.

**Mandatory JSON Output Format**:
Your output must be in valid JSON format only, with no extra text or commentary. Use the structure:

{
   "base_org_name": <Name of base organization>,
   "candidate_org_name": <Name of candidate organization>,
   "reasoning for Alias": <Explanation for why this pair is or is not Alias>,
   "reasoning for Parent/Subsidiary": <Explanation for why this pair is or is not Parent/Subsidiary>,
   "relationship": <One of "Alias", "Parent/Subsidiary", or "No_relation">,
   "parent": <If Parent/Subsidiary, indicate "base" or "candidate"; otherwise leave empty>,
   "parent name": <If Parent/Subsidiary, exactly match the relevant org name from "base_organization"
   				  or "candidate_organization"; otherwise leave empty>
}

### Example:
Provide this JSON object for each (base_organization, candidate_organization) pair as an array for output.
Examples:
[
   {
      "base_org_name": "Zayo Bandwidth",
      "candidate_org_name": "company",
      "reasoning for Alias": "The candidate name is generic and lacks direct evidence connecting it
      						  to Zayo Bandwidth.",
      "reasoning for Parent/Subsidiary": "No indication of ownership or acquisition.",
      "relationship": "No_relation",
      "parent": "",
      "parent name": ""
   },

   {
      "base_org_name": "Google inc.",
      "candidate_org_name": "YouTube",
      "reasoning for Alias": "Google inc. acquired YouTube in 2006, so they are not aliases but parent and child.",
      "reasoning for Parent/Subsidiary": "YouTube is a subsidiary of Google inc.",
      "relationship": "Parent/Subsidiary",
      "parent": "base",
      "parent name": "Google inc."
   },
   {
      "base_org_name": "Google inc.",
      "candidate_org_name": "google",
      "reasoning for Alias": "The name 'google' consistently refers to the same entity 'Google Inc.'",
      "reasoning for Parent/Subsidiary": "No separate ownership details suggest a parent/subsidiary relationship.",
      "relationship": "Alias",
      "parent": "",
      "parent name": ""
   }
]

### Input
"base_organization": {base_org}

"candidate_organizations": {target_org}

"Context": {context}

Now, respond by considering each candidate_organization in the list, applying reasoning, and returning your
final JSON array with one object per candidate.
"""

_PLACEHOLDER = re.compile(r"\{(base_org|target_org|context)\}")


class Relationship(str, Enum):
    ALIAS = "Alias"
    PARENT_SUBSIDIARY = "ParentSubsidiary"
    NO_RELATION = "NoRelation"


_RELATIONSHIP_WORDS = {
    "alias": Relationship.ALIAS,
    "parentsubsidiary": Relationship.PARENT_SUBSIDIARY,
    "parentchild": Relationship.PARENT_SUBSIDIARY,
    "norelation": Relationship.NO_RELATION,
}


@dataclass
class RelationVerdict:
    base_org_name: str
    candidate_org_name: str
    relationship: Relationship
    parent_side: str = "none"  # base | candidate | none
    parent_name: str = ""
    reasoning_alias: str = ""
    reasoning_parent: str = ""
    evidence_chunk_ids: list[str] = field(default_factory=list)
    verdict_id: str = ""

    def to_dict(self) -> dict:
        return {
            "verdict_id": self.verdict_id,
            "base_org_name": self.base_org_name,
            "candidate_org_name": self.candidate_org_name,
            "relationship": self.relationship.value,
            "parent_side": self.parent_side,
            "parent_name": self.parent_name,
            "reasoning_alias": self.reasoning_alias,
            "reasoning_parent": self.reasoning_parent,
            "evidence_chunk_ids": list(self.evidence_chunk_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RelationVerdict":
        return cls(
            d["base_org_name"], d["candidate_org_name"], Relationship(d["relationship"]),
            d.get("parent_side", "none"), d.get("parent_name", ""),
            d.get("reasoning_alias", ""), d.get("reasoning_parent", ""),
            list(d.get("evidence_chunk_ids", ())), d.get("verdict_id", ""),
        )


# ------------------------------------------------------------------ prompts


def format_context(chunks: Iterable[TextChunk]) -> str:
    return "\n\n".join(f"[Source: {c.url or c.doc_id}]\n{c.text}" for c in chunks)


def build_prompt(base: OrgRecord | str, candidates: Sequence[str], context: Iterable[TextChunk]) -> str:
    if not candidates:
        raise ValueError("at least one candidate is required")
    base_name = base.canonical_name if isinstance(base, OrgRecord) else base
    values = {
        "base_org": json.dumps(base_name, ensure_ascii=False),
        "target_org": json.dumps(list(candidates), ensure_ascii=False),
        "context": format_context(context),
    }
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], PROMPT_TEMPLATE)


_INPUT_RE = re.compile(
    r'^"base_organization": (?P<base>.*)\n\n"candidate_organizations": (?P<cands>.*)\n\n"Context": ',
    re.MULTILINE,
)


def prompt_pairs(prompt: str) -> tuple[str, list[str]]:
    """Recover the base name and candidate list from a prompt built here."""
    m = _INPUT_RE.search(prompt)
    if m is None:
        raise ValueError("prompt has no input section")
    return json.loads(m.group("base")), json.loads(m.group("cands"))


# ------------------------------------------------------------------ parsing


def _strip_fence(raw: str) -> str:
    text = raw.strip()
    if text.startswith("```") and text.endswith("```"):
        text = text[3:-3]
        if text.startswith("json"):
            text = text[4:]
    return text.strip()


def _text(obj: dict, *keys: str) -> str:
    for k in keys:
        v = obj.get(k)
        if v is not None:
            return str(v).strip()
    return ""


def _validate(obj, base: str, candidates: dict[str, str]) -> RelationVerdict:
    if not isinstance(obj, dict):
        raise ValueError("not an object")
    b = _text(obj, "base_org_name")
    c = _text(obj, "candidate_org_name")
    if b != base:
        raise ValueError(f"base name {b!r} does not match {base!r}")
    if c not in candidates:
        raise ValueError(f"candidate {c!r} was not asked about")
    word = re.sub(r"[^a-z]", "", _text(obj, "relationship").lower())
    rel = _RELATIONSHIP_WORDS.get(word)
    if rel is None:
        raise ValueError(f"unknown relationship {obj.get('relationship')!r}")
    side = _text(obj, "parent").lower()
    pname = _text(obj, "parent name", "parent_name")
    if rel is Relationship.PARENT_SUBSIDIARY:
        expected = {"base": b, "candidate": c}.get(side)
        if expected is None:
            raise ValueError(f"parent side {side!r} is neither base nor candidate")
        if pname != expected:
            raise ValueError(f"parent name {pname!r} does not match the {side} name {expected!r}")
        pname = candidates[c] if side == "candidate" else base
    else:
        if side or pname:
            raise ValueError("parent fields set on a non-parent verdict")
        side = "none"
    return RelationVerdict(
        base, candidates[c], rel, side, pname,
        _text(obj, "reasoning for Alias", "reasoning_alias"),
        _text(obj, "reasoning for Parent/Subsidiary", "reasoning_parent"),
    )


def parse_verdicts(raw: str, base: str, candidates: Sequence[str]) -> list[RelationVerdict]:
    """Parse a backend reply; invalid objects are dropped, an invalid reply raises."""
    try:
        # strict=False: replies (like the printed examples) may wrap long
        # reasoning strings with raw newlines and tabs
        data = json.loads(_strip_fence(raw), strict=False)
    except json.JSONDecodeError as exc:
        raise VerdictParseError(f"reply is not JSON: {raw[:80]!r}") from exc
    if not isinstance(data, list):
        raise VerdictParseError("reply is not a JSON array")
    base = base.strip()
    wanted = {c.strip(): c for c in candidates}
    out: list[RelationVerdict] = []
    seen: set[str] = set()
    for obj in data:
        try:
            v = _validate(obj, base, wanted)
        except ValueError as exc:
            log.warning("dropping verdict for base %r: %s (%r)", base, exc, obj)
            continue
        if v.candidate_org_name in seen:
            log.warning("dropping duplicate verdict for %r / %r", base, v.candidate_org_name)
            continue
        seen.add(v.candidate_org_name)
        out.append(v)
    return out


# ----------------------------------------------------------------- backends


class LlmBackend(Protocol):
    identity: str

    def submit(self, prompt: str) -> str: ...


def _reply_object(base: str, cand: str, relationship: str, parent: str = "",
                     parent_name: str = "", reason_alias: str = "", reason_parent: str = "") -> dict:
    return {
        "base_org_name": base,
        "candidate_org_name": cand,
        "reasoning for Alias": reason_alias,
        "reasoning for Parent/Subsidiary": reason_parent,
        "relationship": relationship,
        "parent": parent,
        "parent name": parent_name,
    }


class MockBackend:
    """Replays scripted verdicts keyed by (base, candidate).

    The script is a list of reply objects in the prompt's output format.
    Pairs without a script entry get a ``No_relation`` object.  ``raw``
    overrides the full reply for a given base name (used to inject faults).
    """

    identity = "mock"

    def __init__(self, script: Iterable[dict] = (), raw: dict[str, list[str]] | None = None):
        self.script: dict[tuple[str, str], dict] = {}
        for obj in script:
            self.script[(obj["base_org_name"], obj["candidate_org_name"])] = dict(obj)
        self.raw = {k: list(v) for k, v in (raw or {}).items()}
        self.calls: list[str] = []
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MockBackend":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or []
        if isinstance(data, dict):
            return cls(data.get("verdicts", []), data.get("raw"))
        return cls(data)

    def submit(self, prompt: str) -> str:
        base, cands = prompt_pairs(prompt)
        with self._lock:
            self.calls.append(prompt)
            queued = self.raw.get(base)
            if queued:
                return queued.pop(0)
        reply = [
            self.script.get((base, c)) or _reply_object(base, c, "No_relation",
                                                          reason_alias="No scripted evidence.")
            for c in cands
        ]
        return json.dumps(reply, ensure_ascii=False, indent=1)


class HttpBackend:
    """Chat-completions style HTTP endpoint; only the reply text is interpreted."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "ORGFAMILY_LLM_API_KEY",
        temperature: float = 0.0,
        requests_per_minute: float | None = None,
        client: httpx.Client | None = None,
        timeout: float = 120.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.identity = model
        self.api_key = os.environ.get(api_key_env, "")
        self.temperature = temperature
        self.client = client or httpx.Client(timeout=timeout)
        self._interval = 60.0 / requests_per_minute if requests_per_minute else 0.0
        self._next = 0.0
        self._lock = threading.Lock()

    def _throttle(self) -> None:
        if not self._interval:
            return
        with self._lock:
            now = time.monotonic()
            wait = self._next - now
            self._next = max(now, self._next) + self._interval
        if wait > 0:
            time.sleep(wait)

    def submit(self, prompt: str) -> str:
        self._throttle()
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        body = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        try:
            resp = self.client.post(self.endpoint, json=body, headers=headers)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise BackendError(f"LLM backend call failed: {exc}") from exc


# ---------------------------------------------------------------- inference


@dataclass
class InferenceResult:
    record: OrgRecord
    verdicts: list[RelationVerdict]
    calls: int = 0
    partial: bool = False


def verdict_id(record_id: str, v: RelationVerdict) -> str:
    key = f"{record_id}\n{v.base_org_name}\n{v.candidate_org_name}"
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def _append(lst: list[str], name: str, exclude: str) -> None:
    if name and name != exclude and name not in lst:
        lst.append(name)


def infer_relations(
    target: OrgRecord,
    index: ChunkIndex,
    backend: LlmBackend,
    k: int = DEFAULT_PAIR_K,
    retries: int = DEFAULT_RETRIES,
) -> InferenceResult:
    """Classify the target's co-mentioned candidates and record the outcome on it."""
    evidence: dict[str, list[TextChunk]] = {}
    for cand in target.candidate_orgs:
        ctx = index.retrieve_pair_context(target.record_id, cand, k)
        if ctx:
            evidence[cand] = ctx
    result = InferenceResult(target, [])
    if not evidence:
        target.inference_status = "no_evidence"
        return result

    context: list[TextChunk] = []
    seen: set[str] = set()
    for chunks in evidence.values():
        for c in chunks:
            if c.chunk_id not in seen:
                seen.add(c.chunk_id)
                context.append(c)
    candidates = list(evidence)
    prompt = build_prompt(target, candidates, context)

    verdicts = None
    for attempt in range(retries + 1):
        result.calls += 1
        try:
            verdicts = parse_verdicts(backend.submit(prompt), target.canonical_name, candidates)
            break
        except (VerdictParseError, BackendError) as exc:
            log.warning("%s: attempt %d/%d failed: %s", target.record_id, attempt + 1, retries + 1, exc)
    if verdicts is None:
        target.inference_status = "partial"
        result.partial = True
        return result

    for v in verdicts:
        v.evidence_chunk_ids = [c.chunk_id for c in evidence[v.candidate_org_name]]
        v.verdict_id = verdict_id(target.record_id, v)
        if v.relationship is Relationship.ALIAS:
            _append(target.alias, v.candidate_org_name, target.canonical_name)
        elif v.relationship is Relationship.PARENT_SUBSIDIARY:
            if v.parent_side == "candidate":
                _append(target.parents, v.parent_name, target.canonical_name)
            else:
                _append(target.children, v.candidate_org_name, target.canonical_name)
    result.verdicts = verdicts
    target.inference_status = "inferred"
    return result
