"""Post-inference consolidation of organization records into families.

Stage 1 groups records sharing a primary alias, stage 2 folds in rebrands
backed by a majority of a set's records, stage 3 links sets through their
majority-backed parent names and cuts the resulting graph into families.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping

from .jsonl import write_jsonl
from .names import DEFAULT_STOP_TOKENS, name_key, name_tokens
from .registry import OrgRecord

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
PRIMARY = "primary"
SECONDARY = "secondary"


class UnionFind:
    """Disjoint sets over arbitrary hashable keys (path halving, union by size)."""

    def __init__(self, items: Iterable[Hashable] = ()):
        self.parent: dict[Hashable, Hashable] = {}
        self.size: dict[Hashable, int] = {}
        for it in items:
            self.add(it)

    def add(self, x: Hashable) -> None:
        if x not in self.parent:
            self.parent[x] = x
            self.size[x] = 1

    def find(self, x: Hashable) -> Hashable:
        self.add(x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: Hashable, b: Hashable) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]

    def groups(self) -> list[set]:
        out: dict[Hashable, set] = {}
        for x in self.parent:
            out.setdefault(self.find(x), set()).add(x)
        return list(out.values())


def _ordered(groups: Iterable[set]) -> list[set]:
    return sorted(groups, key=lambda g: min(g))


def cluster_names(names: Iterable[str], threshold: float = DEFAULT_THRESHOLD,
                  stop_tokens=DEFAULT_STOP_TOKENS) -> list[set[str]]:
    """Single-link clusters of ``names`` under ``jaccard >= threshold``."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    uniq = sorted(set(names))
    toks = [set(name_tokens(n, stop_tokens)) for n in uniq]
    uf = UnionFind(range(len(uniq)))
    for i in range(len(uniq)):
        for j in range(i + 1, len(uniq)):
            a, b = toks[i], toks[j]
            if a or b:
                sim = len(a & b) / len(a | b)
            else:
                sim = 1.0 if uniq[i] == uniq[j] else 0.0
            if sim >= threshold:
                uf.union(i, j)
    return _ordered({uniq[i] for i in g} for g in uf.groups())


def _majority(contributions: Mapping[str, set[str]], threshold: float,
              stop_tokens) -> list[tuple[set[str], set[str]]]:
    """Clusters of the contributed strings used by at least half the contributors.

    ``contributions`` maps every member record (including ones that
    contributed nothing) to its strings.  Returns ``(cluster, users)`` pairs.
    """
    n = len(contributions)
    pool = set().union(*contributions.values()) if contributions else set()
    kept = []
    for cluster in cluster_names(pool, threshold, stop_tokens):
        users = {rid for rid, strings in contributions.items() if strings & cluster}
        if 2 * len(users) >= n:
            kept.append((cluster, users))
    return kept


# ------------------------------------------------------------------- types


@dataclass(frozen=True)
class AliasSet:
    members: frozenset[str]
    kind: str


@dataclass
class RecordAliases:
    record_id: str
    primary: AliasSet | None
    secondary: list[AliasSet]

    def alias_sets(self) -> list[AliasSet]:
        return ([self.primary] if self.primary else []) + self.secondary


@dataclass
class AliasOrgSet:
    set_id: str
    member_records: set[str]
    set_alias: set[str] = field(default_factory=set)
    set_parents: set[str] = field(default_factory=set)


@dataclass(frozen=True)
class Edge:
    child: str
    parent: str
    support: int


@dataclass
class OrgFamily:
    family_id: str
    member_sets: list[str]
    edges: list[tuple[str, str]]
    asns: set[int]
    display_name: str
    records: list[str] = field(default_factory=list)


@dataclass
class FamilyBuild:
    aliases: dict[str, RecordAliases]
    stage1_sets: list[AliasOrgSet]
    stage2_sets: list[AliasOrgSet]
    sets: list[AliasOrgSet]
    edges: list[Edge]
    dropped_edges: list[Edge]
    families: list[OrgFamily]
    events: list[dict] = field(default_factory=list)


def _set_id(member_records: Iterable[str]) -> str:
    return "set:" + min(member_records)


# ------------------------------------------------------------------ stage 1


def record_alias_sets(record: OrgRecord, threshold: float = DEFAULT_THRESHOLD,
                      stop_tokens=DEFAULT_STOP_TOKENS) -> RecordAliases:
    names = list(dict.fromkeys([*record.alias, record.canonical_name]))
    primary = None
    secondary = []
    for cluster in cluster_names(names, threshold, stop_tokens):
        if len(cluster) < 2:
            continue  # lone strings such as "Group" are noise
        if record.canonical_name in cluster:
            primary = AliasSet(frozenset(cluster), PRIMARY)
        else:
            secondary.append(AliasSet(frozenset(cluster), SECONDARY))
    return RecordAliases(record.record_id, primary, secondary)


def stage1(records: Iterable[OrgRecord], threshold: float = DEFAULT_THRESHOLD,
           stop_tokens=DEFAULT_STOP_TOKENS) -> tuple[list[AliasOrgSet], dict[str, RecordAliases]]:
    """Merge records whose primary alias sets share a name."""
    aliases = {r.record_id: record_alias_sets(r, threshold, stop_tokens) for r in records}
    uf = UnionFind(aliases)
    owner: dict[str, str] = {}
    for rid in sorted(aliases):
        primary = aliases[rid].primary
        for name in sorted(primary.members) if primary else ():
            key = name_key(name, stop_tokens)
            if key in owner:
                uf.union(owner[key], rid)
            else:
                owner[key] = rid
    sets = []
    for group in uf.groups():
        set_alias = set()
        for rid in group:
            if aliases[rid].primary:
                set_alias |= aliases[rid].primary.members
        sets.append(AliasOrgSet(_set_id(group), set(group), set_alias))
    return sorted(sets, key=lambda s: s.set_id), aliases


# ------------------------------------------------------------------ stage 2


def _merge_sets(sets: list[AliasOrgSet], stop_tokens) -> list[AliasOrgSet]:
    uf = UnionFind(s.set_id for s in sets)
    owner: dict[str, str] = {}
    for s in sets:
        for name in sorted(s.set_alias):
            key = name_key(name, stop_tokens)
            if key in owner:
                uf.union(owner[key], s.set_id)
            else:
                owner[key] = s.set_id
    by_id = {s.set_id: s for s in sets}
    merged = []
    for group in uf.groups():
        members: set[str] = set()
        alias: set[str] = set()
        parents: set[str] = set()
        for sid in group:
            members |= by_id[sid].member_records
            alias |= by_id[sid].set_alias
            parents |= by_id[sid].set_parents
        merged.append(AliasOrgSet(_set_id(members), members, alias, parents))
    return sorted(merged, key=lambda s: s.set_id)


def stage2(sets: Iterable[AliasOrgSet], aliases: Mapping[str, RecordAliases],
           threshold: float = DEFAULT_THRESHOLD, stop_tokens=DEFAULT_STOP_TOKENS,
           events: list[dict] | None = None) -> list[AliasOrgSet]:
    """Promote majority-backed secondary aliases, then merge overlapping sets."""
    promoted_sets = []
    for s in sets:
        contributions = {
            rid: set().union(*(a.members for a in aliases[rid].secondary)) if aliases[rid].secondary else set()
            for rid in s.member_records
        }
        set_alias = set(s.set_alias)
        for cluster, users in _majority(contributions, threshold, stop_tokens):
            set_alias |= cluster
            if events is not None:
                events.append({"event": "alias_promoted", "set_id": s.set_id,
                               "aliases": sorted(cluster), "records": sorted(users)})
        promoted_sets.append(AliasOrgSet(s.set_id, set(s.member_records), set_alias, set(s.set_parents)))
    merged = _merge_sets(promoted_sets, stop_tokens)
    if events is not None:
        before = {s.set_id: s for s in promoted_sets}
        for m in merged:
            parts = sorted(sid for sid in before if before[sid].member_records <= m.member_records)
            if len(parts) > 1:
                events.append({"event": "sets_merged", "set_id": m.set_id, "merged": parts})
    return merged


# ------------------------------------------------------------------ stage 3


def parent_references(records: Iterable[OrgRecord], stop_tokens=DEFAULT_STOP_TOKENS) -> dict[str, set[str]]:
    """Per-record parent names, including those implied by child annotations.

    A verdict stating the target is the parent of a candidate becomes a
    parent entry on every record whose canonical name matches that candidate.
    """
    records = list(records)
    refs = {r.record_id: set(r.parents) for r in records}
    by_key: dict[str, list[str]] = {}
    for r in records:
        by_key.setdefault(name_key(r.canonical_name, stop_tokens), []).append(r.record_id)
    for r in records:
        for child in r.children:
            for rid in by_key.get(name_key(child, stop_tokens), ()):
                if rid != r.record_id:
                    refs[rid].add(r.canonical_name)
    return refs


def _find_cycle(nodes: list[str], adj: Mapping[str, list[str]]) -> list[tuple[str, str]] | None:
    state: dict[str, int] = {}
    stack: list[str] = []

    def visit(u: str) -> list[tuple[str, str]] | None:
        state[u] = 1
        stack.append(u)
        for v in adj.get(u, ()):
            if state.get(v) == 1:
                cyc = stack[stack.index(v):] + [v]
                return list(zip(cyc, cyc[1:]))
            if v not in state:
                found = visit(v)
                if found:
                    return found
        stack.pop()
        state[u] = 2
        return None

    for n in nodes:
        if n not in state:
            found = visit(n)
            if found:
                return found
    return None


def break_cycles(edges: Mapping[tuple[str, str], set[str]], set_sizes: Mapping[str, int],
                 events: list[dict] | None = None) -> tuple[dict[tuple[str, str], set[str]], list[Edge]]:
    """Drop the weakest edge of each directed cycle until the graph is acyclic.

    Weakest = fewest supporting records; ties drop the edge whose child set
    is larger, then the lexicographically smallest (child, parent).
    """
    live = dict(edges)
    dropped = []
    while True:
        adj: dict[str, list[str]] = {}
        for c, p in sorted(live):
            adj.setdefault(c, []).append(p)
        cycle = _find_cycle(sorted(adj), adj)
        if cycle is None:
            return live, dropped
        victim = min(cycle, key=lambda e: (len(live[e]), -set_sizes[e[0]], e))
        edge = Edge(victim[0], victim[1], len(live.pop(victim)))
        dropped.append(edge)
        log.info("dropped edge %s -> %s (support %d) to break a cycle", edge.child, edge.parent, edge.support)
        if events is not None:
            events.append({"event": "edge_dropped", "child": edge.child, "parent": edge.parent,
                           "support": edge.support, "cycle": [list(e) for e in cycle]})


def set_display_name(s: AliasOrgSet, records: Mapping[str, OrgRecord]) -> str:
    best = min(s.member_records, key=lambda rid: (-len(records[rid].asns), rid))
    return records[best].canonical_name


def stage3(sets: Iterable[AliasOrgSet], records: Mapping[str, OrgRecord] | Iterable[OrgRecord],
           threshold: float = DEFAULT_THRESHOLD, stop_tokens=DEFAULT_STOP_TOKENS,
           events: list[dict] | None = None) -> tuple[list[OrgFamily], list[AliasOrgSet], list[Edge], list[Edge]]:
    """Link sets through majority-backed parent names and cut families.

    Returns ``(families, sets_with_parents, edges, dropped_edges)``.
    """
    if not isinstance(records, Mapping):
        records = {r.record_id: r for r in records}
    refs = parent_references(records.values(), stop_tokens)
    sets = [AliasOrgSet(s.set_id, set(s.member_records), set(s.set_alias), set()) for s in sets]
    by_id = {s.set_id: s for s in sets}
    size = {s.set_id: len(s.member_records) for s in sets}

    # names a parent reference may match: the set's aliases plus its members'
    # canonical names (records without validated aliases have no set_alias)
    match_tokens = {
        s.set_id: [
            set(name_tokens(n, stop_tokens))
            for n in sorted(s.set_alias | {records[r].canonical_name for r in s.member_records})
        ]
        for s in sets
    }

    def similarity(name: str, sid: str) -> float:
        t = set(name_tokens(name, stop_tokens))
        best = 0.0
        for other in match_tokens[sid]:
            if t or other:
                best = max(best, len(t & other) / len(t | other))
        return best

    edges: dict[tuple[str, str], set[str]] = {}
    for s in sets:
        contributions = {rid: refs.get(rid, set()) for rid in s.member_records}
        for cluster, users in _majority(contributions, threshold, stop_tokens):
            s.set_parents |= cluster
            for name in sorted(cluster):
                scored = [(similarity(name, sid), sid) for sid in sorted(by_id)]
                scored = [(sim, sid) for sim, sid in scored if sim >= threshold]
                if not scored:
                    continue
                scored.sort(key=lambda t: (-t[0], -size[t[1]], t[1]))
                target = scored[0][1]
                if len(scored) > 1 and events is not None:
                    events.append({"event": "ambiguous_parent", "set_id": s.set_id, "parent_name": name,
                                   "chosen": target, "matches": [sid for _, sid in scored]})
                if target == s.set_id:
                    continue
                supporters = {rid for rid in users if name in contributions[rid]} or users
                edges.setdefault((s.set_id, target), set()).update(supporters)

    live, dropped = break_cycles(edges, size, events)
    edge_list = [Edge(c, p, len(sup)) for (c, p), sup in sorted(live.items())]

    uf = UnionFind(by_id)
    for e in edge_list:
        uf.union(e.child, e.parent)
    families = []
    for group in uf.groups():
        member_sets = sorted(group)
        fam_edges = [(e.child, e.parent) for e in edge_list if e.child in group]
        asns: set[int] = set()
        rids: set[str] = set()
        for sid in member_sets:
            rids |= by_id[sid].member_records
        for rid in rids:
            asns |= records[rid].asns
        children = {c for c, _ in fam_edges}
        roots = [sid for sid in member_sets if sid not in children]
        if len(roots) == 1:
            top = roots[0]
        else:
            top = min(member_sets, key=lambda sid: (
                -len(set().union(*(records[r].asns for r in by_id[sid].member_records))), sid))
        families.append(OrgFamily(
            "family:" + min(rids), member_sets, fam_edges, asns,
            set_display_name(by_id[top], records), sorted(rids),
        ))
    families.sort(key=lambda f: f.family_id)
    return families, sorted(sets, key=lambda s: s.set_id), edge_list, dropped


def build_families(records: Iterable[OrgRecord], threshold: float = DEFAULT_THRESHOLD,
                   stop_tokens=DEFAULT_STOP_TOKENS) -> FamilyBuild:
    records = list(records)
    by_id = {r.record_id: r for r in records}
    if len(by_id) != len(records):
        raise ValueError("duplicate record_id in input")
    events: list[dict] = []
    s1, aliases = stage1(records, threshold, stop_tokens)
    s2 = stage2(s1, aliases, threshold, stop_tokens, events)
    families, s3, edges, dropped = stage3(s2, by_id, threshold, stop_tokens, events)
    return FamilyBuild(aliases, s1, s2, s3, edges, dropped, families, events)


def verify_partition(records: Iterable[OrgRecord], build: FamilyBuild) -> list[str]:
    """Problems with ``build`` as a partition of the records and their ASNs."""
    records = list(records)
    problems = []
    for label, sets in (("stage 1", build.stage1_sets), ("stage 2", build.stage2_sets)):
        seen: dict[str, str] = {}
        for s in sets:
            for rid in s.member_records:
                if rid in seen:
                    problems.append(f"{label}: {rid} in {seen[rid]} and {s.set_id}")
                seen[rid] = s.set_id
        missing = {r.record_id for r in records} - set(seen)
        problems += [f"{label}: {rid} in no set" for rid in sorted(missing)]
    asn_owner: dict[int, str] = {}
    rec_owner: dict[str, str] = {}
    for fam in build.families:
        for rid in fam.records:
            if rid in rec_owner:
                problems.append(f"record {rid} in {rec_owner[rid]} and {fam.family_id}")
            rec_owner[rid] = fam.family_id
        for a in fam.asns:
            if a in asn_owner:
                problems.append(f"AS{a} in {asn_owner[a]} and {fam.family_id}")
            asn_owner[a] = fam.family_id
    all_asns = set().union(*(r.asns for r in records)) if records else set()
    problems += [f"AS{a} in no family" for a in sorted(all_asns - set(asn_owner))]
    return problems


def family_rows(build: FamilyBuild, records: Mapping[str, OrgRecord],
                verdict_ids: Mapping[str, list[str]] | None = None) -> list[dict]:
    sets = {s.set_id: s for s in build.sets}
    names = {sid: set_display_name(s, records) for sid, s in sets.items()}
    support = {(e.child, e.parent): e.support for e in build.edges}
    rows = []
    for fam in build.families:
        rows.append({
            "family_id": fam.family_id,
            "display_name": fam.display_name,
            "asns": sorted(fam.asns),
            "records": fam.records,
            "sets": [
                {
                    "set_id": sid,
                    "display_name": names[sid],
                    "member_records": sorted(sets[sid].member_records),
                    "set_alias": sorted(sets[sid].set_alias),
                    "set_parents": sorted(sets[sid].set_parents),
                }
                for sid in fam.member_sets
            ],
            "edges": [
                {"child": c, "parent": p, "child_name": names[c], "parent_name": names[p],
                 "support": support[(c, p)]}
                for c, p in fam.edges
            ],
            "verdict_ids": sorted({v for rid in fam.records for v in (verdict_ids or {}).get(rid, ())}),
        })
    return rows


def write_families(path: str | os.PathLike, build: FamilyBuild, records: Mapping[str, OrgRecord],
                   verdict_ids: Mapping[str, list[str]] | None = None) -> int:
    return write_jsonl(path, family_rows(build, records, verdict_ids))
