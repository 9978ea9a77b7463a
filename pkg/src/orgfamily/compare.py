"""Compare two ASN groupings over the ASNs they have in common.

Groups on each side are classified as identical (same ASN set on the other
side), aggregating (equal to the union of two or more groups on the other
side), aggregated (one of those merged groups) or residual.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

from .jsonl import read_jsonl
from .registry import parse_asn


@dataclass
class GroupingDataset:
    label: str
    groups: dict[str, frozenset[int]]

    def __post_init__(self):
        self.groups = {gid: frozenset(asns) for gid, asns in self.groups.items() if asns}
        seen: dict[int, str] = {}
        for gid, asns in self.groups.items():
            for a in asns:
                if a in seen:
                    raise ValueError(f"{self.label}: AS{a} is in both {seen[a]} and {gid}")
                seen[a] = gid
        self._owner = seen

    @property
    def asns(self) -> set[int]:
        return set(self._owner)

    def owner(self, asn: int) -> str:
        return self._owner[asn]


@dataclass
class Aggregation:
    group: str
    parts: list[str]
    asn_count: int


@dataclass
class ComparisonReport:
    label_a: str
    label_b: str
    common_asn_count: int
    families_a: int
    families_b: int
    multi_as_families_a: int
    multi_as_families_b: int
    avg_size_a: float
    avg_size_b: float
    identical_count: int
    aggregations_a_over_b: list[Aggregation] = field(default_factory=list)
    aggregations_b_over_a: list[Aggregation] = field(default_factory=list)
    residual_a: list[str] = field(default_factory=list)
    residual_b: list[str] = field(default_factory=list)

    def aggregated_groups(self, side: str) -> int:
        """Groups on ``side`` taking part in an aggregation in either direction."""
        if side == "a":
            return len(self.aggregations_a_over_b) + sum(len(x.parts) for x in self.aggregations_b_over_a)
        return len(self.aggregations_b_over_a) + sum(len(x.parts) for x in self.aggregations_a_over_b)

    def to_dict(self) -> dict:
        def aggs(items: list[Aggregation]) -> list[dict]:
            return [{"group": x.group, "parts": x.parts, "asn_count": x.asn_count} for x in items]

        return {
            "label_a": self.label_a,
            "label_b": self.label_b,
            "common_asn_count": self.common_asn_count,
            "families_a": self.families_a,
            "families_b": self.families_b,
            "multi_as_families_a": self.multi_as_families_a,
            "multi_as_families_b": self.multi_as_families_b,
            "avg_size_a": self.avg_size_a,
            "avg_size_b": self.avg_size_b,
            "identical_count": self.identical_count,
            "aggregations_a_over_b": aggs(self.aggregations_a_over_b),
            "aggregations_b_over_a": aggs(self.aggregations_b_over_a),
            "aggregation_asns_a_over_b": sum(x.asn_count for x in self.aggregations_a_over_b),
            "aggregation_asns_b_over_a": sum(x.asn_count for x in self.aggregations_b_over_a),
            "residual_a": self.residual_a,
            "residual_b": self.residual_b,
        }

    def table(self) -> str:
        rows = [
            ("Common ASes", f"{self.common_asn_count}", ""),
            ("Organization families", f"{self.families_a}", f"{self.families_b}"),
            ("  size > 1", f"{self.multi_as_families_a}", f"{self.multi_as_families_b}"),
            ("Avg. family size (size > 1)", f"{self.avg_size_a:.2f}", f"{self.avg_size_b:.2f}"),
            ("Identical families", f"{self.identical_count}", ""),
            ("Aggregations (families)",
             f"{len(self.aggregations_a_over_b)} ({sum(len(x.parts) for x in self.aggregations_a_over_b)})",
             f"{len(self.aggregations_b_over_a)} ({sum(len(x.parts) for x in self.aggregations_b_over_a)})"),
            ("Aggregations (ASes)",
             f"{sum(x.asn_count for x in self.aggregations_a_over_b)}",
             f"{sum(x.asn_count for x in self.aggregations_b_over_a)}"),
            ("Residual families", f"{len(self.residual_a)}", f"{len(self.residual_b)}"),
        ]
        w0 = max(len(r[0]) for r in rows)
        w1 = max(len(self.label_a), *(len(r[1]) for r in rows))
        w2 = max(len(self.label_b), *(len(r[2]) for r in rows))
        lines = [f"{'Metric':<{w0}}  {self.label_a:>{w1}}  {self.label_b:>{w2}}"]
        lines.append("-" * len(lines[0]))
        lines += [f"{a:<{w0}}  {b:>{w1}}  {c:>{w2}}" for a, b, c in rows]
        return "\n".join(lines)


def align_common(a: GroupingDataset, b: GroupingDataset) -> tuple[GroupingDataset, GroupingDataset]:
    common = a.asns & b.asns
    return (
        GroupingDataset(a.label, {g: s & common for g, s in a.groups.items()}),
        GroupingDataset(b.label, {g: s & common for g, s in b.groups.items()}),
    )


def _aggregations(x: GroupingDataset, y: GroupingDataset) -> list[Aggregation]:
    out = []
    for gid in sorted(x.groups):
        asns = x.groups[gid]
        parts = sorted({y.owner(a) for a in asns})
        if len(parts) >= 2 and all(y.groups[p] <= asns for p in parts):
            out.append(Aggregation(gid, parts, len(asns)))
    return out


def _multi(ds: GroupingDataset) -> tuple[int, float]:
    sizes = [len(s) for s in ds.groups.values() if len(s) > 1]
    return len(sizes), (sum(sizes) / len(sizes) if sizes else 0.0)


def compare(a: GroupingDataset, b: GroupingDataset) -> ComparisonReport:
    if a.asns != b.asns:
        raise ValueError("datasets are not aligned; call align_common first")
    b_by_set = {s: g for g, s in b.groups.items()}
    identical_a = {g for g, s in a.groups.items() if s in b_by_set}
    identical_b = {b_by_set[a.groups[g]] for g in identical_a}
    agg_ab = _aggregations(a, b)
    agg_ba = _aggregations(b, a)
    touched_a = identical_a | {x.group for x in agg_ab} | {p for x in agg_ba for p in x.parts}
    touched_b = identical_b | {x.group for x in agg_ba} | {p for x in agg_ab for p in x.parts}
    multi_a, avg_a = _multi(a)
    multi_b, avg_b = _multi(b)
    return ComparisonReport(
        a.label, b.label, len(a.asns), len(a.groups), len(b.groups), multi_a, multi_b, avg_a, avg_b,
        len(identical_a), agg_ab, agg_ba,
        sorted(set(a.groups) - touched_a), sorted(set(b.groups) - touched_b),
    )


# ----------------------------------------------------------------- loaders


def load_families(path: str | os.PathLike, label: str = "ours") -> GroupingDataset:
    return GroupingDataset(label, {row["family_id"]: frozenset(row["asns"]) for row in read_jsonl(path)})


def load_ca2o_groups(path: str | os.PathLike, label: str = "ca2o") -> GroupingDataset:
    groups: dict[str, set[int]] = {}
    seen: set[int] = set()
    for row in read_jsonl(path):
        asn = parse_asn(str(row["aut"]))
        if asn in seen:
            continue
        seen.add(asn)
        groups.setdefault(str(row["org_id"]), set()).add(asn)
    return GroupingDataset(label, {g: frozenset(s) for g, s in groups.items()})


def load_csv_groups(path: str | os.PathLike, label: str = "baseline") -> GroupingDataset:
    """Rows of ``asn,group_id``; a header row is skipped if present."""
    groups: dict[str, set[int]] = {}
    seen: set[int] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or row[0].startswith("#"):
                continue
            try:
                asn = parse_asn(row[0])
            except ValueError:
                if i == 0:
                    continue
                raise
            if asn in seen:
                continue
            seen.add(asn)
            groups.setdefault(row[1].strip(), set()).add(asn)
    return GroupingDataset(label, {g: frozenset(s) for g, s in groups.items()})


BASELINE_LOADERS = {"ca2o": load_ca2o_groups, "csv": load_csv_groups}
