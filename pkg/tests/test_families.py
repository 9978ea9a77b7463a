from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_record
from oracles import oracle_clusters, oracle_stage1, random_records
from orgfamily.families import (
    break_cycles, build_families, cluster_names, parent_references, record_alias_sets, stage1, stage2,
    stage3, verify_partition,
)


def partition(sets) -> set[frozenset[str]]:
    return {frozenset(s.member_records) for s in sets}


def test_cluster_names_single_link_chain():
    # neighbours share 1 of 3 tokens (1/3); the two ends share nothing (0)
    names = ["alpha beta", "beta gamma", "gamma delta", "omega"]
    got = cluster_names(names, 1 / 3)
    assert got == [{"alpha beta", "beta gamma", "gamma delta"}, {"omega"}]
    assert cluster_names(names, 0.5) == [{"alpha beta"}, {"beta gamma"}, {"gamma delta"}, {"omega"}]


def test_cluster_names_rejects_bad_threshold():
    for bad in (0, -0.1, 1.01):
        with pytest.raises(ValueError):
            cluster_names(["a"], bad)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.sampled_from(["alpha", "beta", "gamma", "alpha beta", "beta gamma Inc.", "Group",
                                 "gamma delta LLC", "delta", "Co."]), max_size=8),
       st.sampled_from([0.3, 0.5, 0.67, 1.0]))
def test_cluster_names_matches_oracle(names, th):
    assert {frozenset(c) for c in cluster_names(names, th)} == oracle_clusters(names, th)


def test_single_string_cluster_discarded():
    r = make_record("r1", "Limelight Networks Inc.", alias=["Limelight Networks Ltd", "Group"])
    ra = record_alias_sets(r)
    assert ra.primary.members == {"Limelight Networks Inc.", "Limelight Networks Ltd"}
    assert all("Group" not in s.members for s in ra.alias_sets())


def test_stage1_matches_oracle_on_random_instances():
    rng = random.Random(7)
    for _ in range(40):
        records = random_records(rng, 15, 4)
        sets, _ = stage1(records, 0.5)
        assert partition(sets) == oracle_stage1(records, 0.5)


def limelight_records():
    edgio = ["Edgio Inc.", "Edgio Europe Ltd"]
    return [
        make_record("ll1", "Limelight Networks Inc.", [22822], alias=["Limelight Networks Ltd", *edgio]),
        make_record("ll2", "Limelight Networks Ltd", [55429], alias=["Limelight Networks Inc.", *edgio]),
        make_record("ed1", "Edgio Inc.", [15133], alias=["Edgio Europe Ltd"]),
        make_record("ed2", "Edgio Europe Ltd", [203449], alias=["Edgio Inc."]),
    ]


def test_rebrand_merges_only_in_stage2():
    records = limelight_records()
    s1, aliases = stage1(records)
    assert partition(s1) == {frozenset({"ll1", "ll2"}), frozenset({"ed1", "ed2"})}
    events = []
    s2 = stage2(s1, aliases, events=events)
    assert partition(s2) == {frozenset({"ll1", "ll2", "ed1", "ed2"})}
    assert [e["event"] for e in events] == ["alias_promoted", "sets_merged"]


def test_stage2_needs_majority():
    records = limelight_records()
    records[1].alias = ["Limelight Networks Inc."]
    records.append(make_record("ll3", "Limelight Networks", [1], alias=["Limelight Networks Inc."]))
    s1, aliases = stage1(records)
    # 1 of 3 limelight records carries the Edgio names: below half, no merge
    assert partition(stage2(s1, aliases)) == partition(s1)


@pytest.mark.parametrize("n,users,kept", [(100, 49, False), (2, 1, True), (100, 50, True), (100, 51, True)])
def test_parent_majority_boundary(n, users, kept):
    records = [make_record(f"c{i:03d}", "Child Org", [i + 1], alias=["Child Org Ltd"],
                           parents=["Parent Holding"] if i < users else []) for i in range(n)]
    records.append(make_record("p", "Parent Holding", [9999]))
    fams, sets, edges, _ = stage3(stage1(records)[0], records)
    assert (len(edges) == 1) == kept
    assert (len(fams) == 1) == kept


def test_child_annotation_becomes_parent_reference():
    records = [
        make_record("a", "Deloitte LLP", children=["National TeleConsultants LLC"]),
        make_record("b", "National TeleConsultants LLC"),
    ]
    assert parent_references(records) == {"a": set(), "b": {"Deloitte LLP"}}


def test_cycle_broken_at_weakest_edge():
    edges = {("A", "B"): {"a1", "a2"}, ("B", "A"): {"b1"}, ("B", "C"): {"b1"}}
    events = []
    live, dropped = break_cycles(edges, {"A": 2, "B": 1, "C": 1}, events)
    assert set(live) == {("A", "B"), ("B", "C")}
    assert [(e.child, e.parent, e.support) for e in dropped] == [("B", "A", 1)]
    assert len(events) == 1 and events[0]["event"] == "edge_dropped"


def test_cycle_tie_drops_edge_from_larger_child():
    edges = {("A", "B"): {"x"}, ("B", "A"): {"y"}}
    live, dropped = break_cycles(edges, {"A": 3, "B": 1})
    assert set(live) == {("B", "A")}


def microsoft_records():
    msft, zmx, acti = "Microsoft Corporation", "ZeniMax Media Inc.", "Activision Publishing Inc."
    return [
        make_record("w:MSFT", msft, [8069], alias=["Microsoft Corp"]),
        make_record("w:MSFT-5", "Microsoft Corp", [40066], alias=[msft]),
        make_record("w:ZENIM", zmx, [54947], alias=["ZeniMax Media Germany GmbH"], parents=[msft]),
        make_record("w:ZMG1", "ZeniMax Media Germany GmbH", [202167], alias=[zmx], parents=[msft]),
        make_record("w:IDSOF", "id Software LLC", [10793], parents=[zmx]),
        make_record("w:ACTIV", acti, [14588], parents=[msft]),
        make_record("w:DL50", "Demonware Ltd", [60229], parents=[acti]),
    ]


def test_microsoft_family():
    records = microsoft_records()
    build = build_families(records)
    assert len(build.families) == 1
    fam = build.families[0]
    assert fam.asns == {8069, 40066, 54947, 202167, 10793, 14588, 60229}
    assert fam.display_name == "Microsoft Corporation"
    assert sorted(fam.edges) == sorted([
        ("set:w:ACTIV", "set:w:MSFT"), ("set:w:DL50", "set:w:ACTIV"),
        ("set:w:IDSOF", "set:w:ZENIM"), ("set:w:ZENIM", "set:w:MSFT"),
    ])
    assert verify_partition(records, build) == []


def test_verify_partition_reports_problems():
    records = microsoft_records()
    build = build_families(records)
    build.families[0].asns.discard(8069)
    assert verify_partition(records, build) == ["AS8069 in no family"]


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_random_builds_are_partitions_and_acyclic(seed):
    rng = random.Random(seed)
    records = random_records(rng, 12, 3)
    for r in records:
        r.parents = [rng.choice(records).canonical_name for _ in range(rng.randint(0, 2))]
    build = build_families(records)
    assert verify_partition(records, build) == []
    adj = {}
    for e in build.edges:
        adj.setdefault(e.child, []).append(e.parent)

    def reaches(u, target, seen=()):
        return any(v == target or (v not in seen and reaches(v, target, (*seen, v))) for v in adj.get(u, ()))

    assert not any(reaches(e.child, e.child) for e in build.edges)
