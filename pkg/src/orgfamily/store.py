"""Pair-scoped chunk index.

Retrieval is always constrained to one (target record, candidate name) pair,
so an exact inverted index answers it; an optional ranker only reorders.
"""

from __future__ import annotations

import json
import os
import subprocess
from typing import Iterable, Protocol, Sequence

from .corpus import TextChunk
from .jsonl import read_jsonl, write_jsonl
from .names import DEFAULT_STOP_TOKENS, name_key

DEFAULT_PAIR_K = 8


class Ranker(Protocol):
    def score(self, query: str, chunks: Sequence[TextChunk]) -> list[float]: ...


class SubprocessRanker:
    """External scorer over JSON lines: ``{"query", "texts"}`` -> ``{"scores": [...]}``."""

    def __init__(self, command: Sequence[str]):
        self.proc = subprocess.Popen(
            list(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, encoding="utf-8", bufsize=1,
        )

    def score(self, query: str, chunks: Sequence[TextChunk]) -> list[float]:
        assert self.proc.stdin and self.proc.stdout
        self.proc.stdin.write(json.dumps({"query": query, "texts": [c.text for c in chunks]}) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise RuntimeError("ranker process exited")
        scores = [float(s) for s in json.loads(line)["scores"]]
        if len(scores) != len(chunks):
            raise RuntimeError("ranker returned the wrong number of scores")
        return scores

    def close(self) -> None:
        if self.proc.stdin:
            self.proc.stdin.close()
        self.proc.wait(timeout=10)


def _canonical_order(c: TextChunk) -> tuple:
    return (c.doc_id, c.char_span, c.chunk_id)


class ChunkIndex:
    def __init__(self, ranker: Ranker | None = None, stop_tokens=DEFAULT_STOP_TOKENS):
        self.ranker = ranker
        self.stop_tokens = frozenset(stop_tokens)
        self.chunks: dict[str, TextChunk] = {}
        self.by_org: dict[str, list[str]] = {}
        self.by_pair: dict[tuple[str, str], list[str]] = {}

    def _key(self, name: str) -> str:
        return name_key(name, self.stop_tokens)

    def index_chunks(self, org_record_id: str, chunks: Iterable[TextChunk]) -> None:
        for c in chunks:
            if c.org_record_id != org_record_id:
                raise ValueError(f"chunk {c.chunk_id} belongs to {c.org_record_id}, not {org_record_id}")
            self.chunks[c.chunk_id] = c
            ids = self.by_org.setdefault(org_record_id, [])
            if c.chunk_id not in ids:
                ids.append(c.chunk_id)
            for name in c.entity_mentions:
                pair = self.by_pair.setdefault((org_record_id, self._key(name)), [])
                if c.chunk_id not in pair:
                    pair.append(c.chunk_id)

    def retrieve_pair_context(self, target: str, candidate: str, k: int = DEFAULT_PAIR_K) -> list[TextChunk]:
        if k < 1:
            raise ValueError("k must be >= 1")
        ids = self.by_pair.get((target, self._key(candidate)), [])
        found = sorted((self.chunks[i] for i in ids), key=_canonical_order)
        if self.ranker is not None and found:
            scores = self.ranker.score(candidate, found)
            order = sorted(range(len(found)), key=lambda i: -scores[i])
            found = [found[i] for i in order]
        return found[:k]

    def __len__(self) -> int:
        return len(self.chunks)

    # snapshot: one line per chunk, then one line per pair posting list
    def save(self, path: str | os.PathLike) -> int:
        rows = [{"kind": "chunk", **self.chunks[i].to_dict()} for i in sorted(self.chunks)]
        rows += [
            {"kind": "pair", "org_record_id": org, "candidate": cand, "chunk_ids": sorted(ids)}
            for (org, cand), ids in sorted(self.by_pair.items())
        ]
        return write_jsonl(path, rows)

    @classmethod
    def load(cls, path: str | os.PathLike, ranker: Ranker | None = None,
             stop_tokens=DEFAULT_STOP_TOKENS) -> "ChunkIndex":
        idx = cls(ranker, stop_tokens)
        pairs = []
        for row in read_jsonl(path):
            if row.get("kind") == "chunk":
                c = TextChunk.from_dict(row)
                idx.chunks[c.chunk_id] = c
                idx.by_org.setdefault(c.org_record_id, []).append(c.chunk_id)
            elif row.get("kind") == "pair":
                pairs.append(row)
        for row in pairs:
            idx.by_pair[(row["org_record_id"], row["candidate"])] = list(row["chunk_ids"])
        return idx
