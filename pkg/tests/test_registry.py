from __future__ import annotations

import io
import json

import pytest

from conftest import PIPELINE_FIXTURE
from orgfamily.errors import AsnNotFound, ConfigError, IngestError
from orgfamily.registry import (
    AsBlock, AsnRecord, Ca2oDataset, PeeringDbDataset, WhoisIndex, build_org_records, label_asn,
    load_whois_dumps, parse_asn, parse_registry, parse_whois_dump, read_org_records,
    resolve_asn_registry, write_org_records,
)

RPSL = b"""% comment line

organisation:   ORG-FT2-RIPE
org-name:       Orange S.A.
address:        Issy-les-Moulineaux
address:        France
e-mail:         noc@example.fr

aut-num:        AS5511
as-name:        OPENTRANSIT
descr:          Orange S.A.
+               second descr line
org:            ORG-FT2-RIPE

aut-num:        AS5512
broken line without a colon

as-block:       AS1101 - AS1300
descr:          block
"""

ARIN = b"""OrgID:          MSFT
OrgName:        Microsoft Corporation
Street:         One Microsoft Way
City:           Redmond
Country:        US

ASHandle:       AS8068
ASNumber:       8068 - 8075
ASName:         MICROSOFT-CORP
OrgID:          MSFT
"""


def test_parse_asn_forms():
    assert parse_asn("AS5511") == 5511
    assert parse_asn("as 5511") == 5511
    assert parse_asn("5511") == 5511
    assert parse_asn("AS1.10") == 65546
    for bad in ("", "AS0", "AS4294967296", "ASX", "1.70000"):
        with pytest.raises(ValueError):
            parse_asn(bad)


def test_parse_registry():
    assert parse_registry("ripe") == "RIPE"
    assert parse_registry("NIR:JPIRR") == "NIR:JPIRR"
    assert parse_registry("jpnic").startswith("NIR:")
    with pytest.raises(ConfigError):
        parse_registry("moon")


def test_parse_rpsl_dump_objects_and_provenance():
    dump = parse_whois_dump(RPSL, "RIPE")
    assert [r.asn for r in dump.asn_records] == [5511]
    rec = dump.asn_records[0]
    assert rec.org_handle == "ORG-FT2-RIPE"
    assert rec.as_name == "OPENTRANSIT"
    assert rec.descr.startswith("Orange S.A.")
    a, b = rec.source_line_span
    assert RPSL[a:b].startswith(b"aut-num:        AS5511")
    assert b"ORG-FT2-RIPE" in RPSL[a:b]
    org = dump.org_handles[0]
    assert (org.handle, org.name) == ("ORG-FT2-RIPE", "Orange S.A.")
    assert org.emails == ("noc@example.fr",)
    assert dump.as_blocks == [AsBlock(1101, 1300, "RIPE")]
    assert dump.skipped == 1


def test_parse_rpsl_from_stream():
    assert len(parse_whois_dump(io.BytesIO(RPSL), "RIPE").asn_records) == 1


def test_parse_arin_range():
    dump = parse_whois_dump(ARIN, "ARIN")
    assert [r.asn for r in dump.asn_records] == list(range(8068, 8076))
    assert {r.org_handle for r in dump.asn_records} == {"MSFT"}
    assert dump.org_handles[0].address == "One Microsoft Way, Redmond, US"


def test_unreadable_stream_reports_offset():
    class Broken(io.BytesIO):
        def readline(self, *a):
            if self.tell() > 20:
                raise OSError("disk gone")
            return super().readline(*a)

    with pytest.raises(IngestError) as err:
        parse_whois_dump(Broken(RPSL), "RIPE")
    assert err.value.offset is not None


def _claim(asn, reg):
    return (reg, AsnRecord(asn, reg, None, "H", None, (0, 0)))


def test_resolve_single_claim():
    assert resolve_asn_registry(7, [_claim(7, "APNIC")], []) == "APNIC"


def test_resolve_uses_precedence_without_block():
    # precedence ARIN > RIPE > APNIC > LACNIC > AFRINIC > NIRs
    assert resolve_asn_registry(1299, [_claim(1299, "RIPE"), _claim(1299, "ARIN")], []) == "ARIN"
    assert resolve_asn_registry(9, [_claim(9, "NIR:JPNIC"), _claim(9, "AFRINIC")], []) == "AFRINIC"


def test_resolve_prefers_covering_block():
    blocks = [AsBlock(1101, 1300, "RIPE")]
    assert resolve_asn_registry(1299, [_claim(1299, "ARIN"), _claim(1299, "RIPE")], blocks) == "RIPE"


@pytest.fixture
def sources(tmp_path):
    whois = WhoisIndex.from_dumps([parse_whois_dump(RPSL, "RIPE"), parse_whois_dump(ARIN, "ARIN")])
    ca2o_path = tmp_path / "ca2o.jsonl"
    ca2o_path.write_text("\n".join(json.dumps(r) for r in [
        {"aut": 8068, "org_id": "MSFT-ARIN", "name": "Microsoft Corp"},
        {"aut": 64600, "org_id": "X-AP", "name": "Example APNIC Org", "source": "APNIC"},
    ]))
    pdb = PeeringDbDataset.from_json({
        "org": [{"id": 1, "name": "Example Peering Org", "website": "https://org.example"}],
        "net": {"data": [
            {"asn": 64700, "name": "Example Net", "org_id": 1, "website": "https://net.example", "aka": "ExNet"},
            {"asn": 64701, "name": "Orphan Net"},
            {"asn": 5511, "name": "Orange", "website": "https://www.orange.com"},
        ]},
    })
    return whois, Ca2oDataset.load(ca2o_path), pdb


def test_label_priority(sources):
    whois, ca2o, pdb = sources
    assert label_asn(5511, *sources).record_id == "whois:RIPE:ORG-FT2-RIPE"
    assert label_asn(8068, *sources).source == "whois_orgid"
    assert label_asn(64600, *sources).record_id == "ca2o:X-AP"
    assert label_asn(64700, *sources).record_id == "pdb:1"
    assert label_asn(64701, *sources).record_id == "pdbnet:64701"
    with pytest.raises(AsnNotFound):
        label_asn(1, *sources)


def test_descr_fallback():
    dump = parse_whois_dump(b"aut-num: AS64999\nas-name: EXNET\ndescr: Example Research Net\n", "RIPE")
    link = label_asn(64999, WhoisIndex.from_dumps([dump]), Ca2oDataset(), PeeringDbDataset())
    assert (link.source, link.record_id, link.name) == ("descr_fallback", "descr:AS64999", "Example Research Net")


def test_build_org_records_partitions_asns(sources):
    records = build_org_records(*sources)
    seen = [a for r in records for a in r.asns]
    assert len(seen) == len(set(seen))
    universe = set(sources[0].records) | set(sources[1].by_asn) | set(sources[2].nets_by_asn)
    assert set(seen) == universe
    by_id = {r.record_id: r for r in records}
    msft = by_id["whois:ARIN:MSFT"]
    assert msft.asns == set(range(8068, 8076))
    assert msft.provisional_aliases == ["Microsoft Corp"]
    assert by_id["pdb:1"].websites == ["https://net.example", "https://org.example"]
    # the canonical (org) name itself is not repeated as an aka
    assert by_id["pdb:1"].canonical_name == "Example Peering Org"
    assert by_id["pdb:1"].aka == ["Example Net", "ExNet"]
    assert by_id["whois:RIPE:ORG-FT2-RIPE"].websites == ["https://www.orange.com"]
    assert by_id["ca2o:X-AP"].registries == {"APNIC"}


def test_org_records_roundtrip(sources, tmp_path):
    records = build_org_records(*sources)
    write_org_records(tmp_path / "r.jsonl", records)
    assert read_org_records(tmp_path / "r.jsonl") == records


def test_fixture_multi_registry_asn():
    whois = load_whois_dumps({
        "ARIN": PIPELINE_FIXTURE / "whois/arin.txt",
        "RIPE": PIPELINE_FIXTURE / "whois/ripe.db",
    })
    assert whois.records[1299].registry == "RIPE"
    assert whois.records[1299].authoritative
    assert whois.skipped == 2  # one malformed RPSL object, one out-of-range ARIN ASN
