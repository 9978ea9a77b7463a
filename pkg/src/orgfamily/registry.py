"""Registry ingest: WHOIS bulk dumps, CAIDA AS2Org and PeeringDB snapshots.

Every ASN is linked to exactly one :class:`OrgRecord` using a strict
priority chain: WHOIS org handle, then CA2O, then PeeringDB, then a new
record named after the WHOIS ``descr`` line.
"""

from __future__ import annotations

import io
import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Iterable, Iterator

from .errors import AsnNotFound, ConfigError, IngestError
from .jsonl import read_jsonl, write_jsonl
from .names import name_key

log = logging.getLogger(__name__)

RIRS = ("ARIN", "RIPE", "APNIC", "LACNIC", "AFRINIC")
KNOWN_NIRS = frozenset(
    {"JPIRR", "JPNIC", "KRNIC", "TWNIC", "CNNIC", "IDNIC", "IRINN", "VNNIC", "NICBR", "NICMX"}
)
MAX_ASN = 2**32

SOURCE_WHOIS = "whois_orgid"
SOURCE_CA2O = "ca2o"
SOURCE_PEERINGDB = "peeringdb"
SOURCE_DESCR = "descr_fallback"


def parse_registry(value: str) -> str:
    """Canonical registry label: an RIR name or ``NIR:<name>``."""
    v = value.strip().upper()
    if v in RIRS:
        return v
    if v.startswith("NIR:") and len(v) > 4:
        return v
    if v.replace(".", "") in KNOWN_NIRS:
        return "NIR:" + v.replace(".", "")
    raise ConfigError(f"unknown registry schema {value!r}")


def registry_rank(registry: str) -> tuple[int, str]:
    """Sort key for the tie-break precedence ARIN > RIPE > APNIC > LACNIC > AFRINIC > NIRs."""
    if registry in RIRS:
        return (RIRS.index(registry), "")
    return (len(RIRS), registry)


def parse_asn(value: str) -> int:
    """Parse ``AS5511``, ``5511`` or asdot ``AS1.10``; raise ValueError otherwise."""
    v = value.strip().upper()
    if v.startswith("AS"):
        v = v[2:]
    if "." in v:
        hi, lo = (int(x) for x in v.split("."))
        if not (0 <= hi < 65536 and 0 <= lo < 65536):
            raise ValueError(f"asdot half out of range: {value!r}")
        asn = hi * 65536 + lo
    else:
        asn = int(v)
    if not 0 < asn < MAX_ASN:
        raise ValueError(f"ASN out of range: {value!r}")
    return asn


@dataclass(frozen=True)
class AsnRecord:
    asn: int
    registry: str
    descr: str | None = None
    org_handle: str | None = None
    as_name: str | None = None
    source_line_span: tuple[int, int] = (0, 0)
    authoritative: bool = False


@dataclass(frozen=True)
class OrgHandle:
    handle: str
    registry: str
    name: str
    emails: tuple[str, ...] = ()
    address: str | None = None


@dataclass(frozen=True)
class AsBlock:
    start_asn: int
    end_asn: int
    registry: str

    def covers(self, asn: int) -> bool:
        return self.start_asn <= asn <= self.end_asn


@dataclass
class WhoisDump:
    registry: str
    asn_records: list[AsnRecord] = field(default_factory=list)
    org_handles: list[OrgHandle] = field(default_factory=list)
    as_blocks: list[AsBlock] = field(default_factory=list)
    skipped: int = 0

    def __iter__(self):
        return iter((self.asn_records, self.org_handles, self.as_blocks))


@dataclass
class OrgRecord:
    record_id: str
    canonical_name: str
    source: str
    registries: set[str] = field(default_factory=set)
    asns: set[int] = field(default_factory=set)
    websites: list[str] = field(default_factory=list)
    alias: list[str] = field(default_factory=list)
    parents: list[str] = field(default_factory=list)
    candidate_orgs: list[str] = field(default_factory=list)
    # PeeringDB names, matched as the target during relevance filtering
    aka: list[str] = field(default_factory=list)
    # CA2O names that disagree with the WHOIS name; never clustered
    provisional_aliases: list[str] = field(default_factory=list)
    # candidate names a verdict declared to be children of this record
    children: list[str] = field(default_factory=list)
    inference_status: str = "pending"

    def target_names(self) -> list[str]:
        return [self.canonical_name, *self.aka]

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "canonical_name": self.canonical_name,
            "source": self.source,
            "registries": sorted(self.registries, key=registry_rank),
            "asns": sorted(self.asns),
            "websites": list(self.websites),
            "alias": list(self.alias),
            "parents": list(self.parents),
            "candidate_orgs": list(self.candidate_orgs),
            "aka": list(self.aka),
            "provisional_aliases": list(self.provisional_aliases),
            "children": list(self.children),
            "inference_status": self.inference_status,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OrgRecord":
        return cls(
            record_id=d["record_id"],
            canonical_name=d["canonical_name"],
            source=d["source"],
            registries=set(d.get("registries", ())),
            asns={int(a) for a in d.get("asns", ())},
            websites=list(d.get("websites", ())),
            alias=list(d.get("alias", ())),
            parents=list(d.get("parents", ())),
            candidate_orgs=list(d.get("candidate_orgs", ())),
            aka=list(d.get("aka", ())),
            provisional_aliases=list(d.get("provisional_aliases", ())),
            children=list(d.get("children", ())),
            inference_status=d.get("inference_status", "pending"),
        )


# ---------------------------------------------------------------- WHOIS dumps


def _iter_objects(stream: BinaryIO) -> Iterator[tuple[int, int, list[tuple[str, str]] | None]]:
    """Yield ``(start, end, attributes)`` per paragraph; attributes is None if malformed."""
    offset = 0
    start = None
    attrs: list[tuple[str, str]] = []
    bad = False
    while True:
        try:
            raw = stream.readline()
        except (OSError, ValueError) as exc:
            raise IngestError(f"failed to read WHOIS dump: {exc}", offset) from exc
        line_start = offset
        offset += len(raw)
        line = raw.decode("utf-8", errors="replace").rstrip("\r\n")
        if not raw or not line.strip():
            if start is not None:
                yield start, line_start, None if bad or not attrs else attrs
            start, attrs, bad = None, [], False
            if not raw:
                return
            continue
        if line.startswith(("%", "#")):
            continue
        if start is None:
            start = line_start
        if line[0] in " \t+":
            if attrs:
                k, v = attrs[-1]
                cont = line.lstrip(" \t+").strip()
                attrs[-1] = (k, f"{v} {cont}".strip())
            else:
                bad = True
            continue
        key, sep, value = line.partition(":")
        if not sep or not key.strip() or " " in key.strip():
            bad = True
            continue
        attrs.append((key.strip().lower(), value.strip()))


def _first(attrs: list[tuple[str, str]], key: str) -> str | None:
    for k, v in attrs:
        if k == key and v:
            return v
    return None


def _all(attrs: list[tuple[str, str]], key: str) -> list[str]:
    return [v for k, v in attrs if k == key and v]


def _parse_asn_range(value: str) -> tuple[int, int]:
    lo, sep, hi = value.partition("-")
    first = parse_asn(lo)
    last = parse_asn(hi) if sep else first
    if last < first:
        raise ValueError(f"inverted ASN range {value!r}")
    return first, last


def parse_whois_dump(dump: BinaryIO | bytes, registry: str) -> WhoisDump:
    """Parse an RPSL (RIPE/APNIC/AFRINIC/LACNIC/NIR) or ARIN bulk dump.

    Malformed objects are counted in ``skipped``; object types the pipeline
    does not use (inetnum, person, mntner ...) are ignored silently.
    """
    registry = parse_registry(registry)
    if isinstance(dump, (bytes, bytearray)):
        dump = io.BytesIO(dump)
    result = WhoisDump(registry)
    seen_handles: set[str] = set()
    arin = registry == "ARIN"
    for start, end, attrs in _iter_objects(dump):
        if attrs is None:
            result.skipped += 1
            continue
        kind = attrs[0][0]
        span = (start, end)
        try:
            if kind in ("aut-num", "ashandle"):
                if kind == "aut-num":
                    first = last = parse_asn(attrs[0][1])
                    handle = _first(attrs, "org")
                    as_name = _first(attrs, "as-name")
                else:
                    number = _first(attrs, "asnumber")
                    if number is None:
                        raise ValueError("ASHandle without ASNumber")
                    first, last = _parse_asn_range(number)
                    handle = _first(attrs, "orgid")
                    as_name = _first(attrs, "asname")
                descr = _first(attrs, "descr") or _first(attrs, "comment")
                for asn in range(first, last + 1):
                    result.asn_records.append(
                        AsnRecord(asn, registry, descr, handle, as_name, span)
                    )
            elif kind in ("organisation", "organization") or (arin and kind == "orgid"):
                handle = attrs[0][1]
                name = _first(attrs, "org-name") or _first(attrs, "orgname")
                if not handle or not name:
                    raise ValueError("organisation without handle or name")
                if handle in seen_handles:
                    log.debug("duplicate org handle %s in %s dump", handle, registry)
                    continue
                seen_handles.add(handle)
                if arin:
                    parts = [*_all(attrs, "street"), *_all(attrs, "city"), *_all(attrs, "country")]
                else:
                    parts = _all(attrs, "address")
                emails = tuple(_all(attrs, "e-mail") + _all(attrs, "abuse-mailbox"))
                result.org_handles.append(
                    OrgHandle(handle, registry, name, emails, ", ".join(parts) or None)
                )
            elif kind == "as-block":
                first, last = _parse_asn_range(attrs[0][1])
                result.as_blocks.append(AsBlock(first, last, registry))
        except ValueError as exc:
            log.debug("skipping malformed %s object at %d: %s", kind, start, exc)
            result.skipped += 1
    return result


def resolve_asn_registry(
    asn: int, claims: list[tuple[str, AsnRecord]], blocks: Iterable[AsBlock]
) -> str:
    """Pick the authoritative registry for an ASN claimed by one or more dumps."""
    if not claims:
        raise ValueError("resolve_asn_registry needs at least one claim")
    claimants = {reg for reg, _ in claims}
    if len(claimants) == 1:
        return next(iter(claimants))
    covering = {b.registry for b in blocks if b.covers(asn) and b.registry in claimants}
    if len(covering) == 1:
        return covering.pop()
    pool = covering or claimants
    return min(pool, key=registry_rank)


@dataclass
class WhoisIndex:
    """Merged view over all parsed dumps: one authoritative record per ASN."""

    records: dict[int, AsnRecord]
    orgs: dict[tuple[str, str], OrgHandle]
    blocks: list[AsBlock]
    skipped: int = 0

    @classmethod
    def from_dumps(cls, dumps: Iterable[WhoisDump]) -> "WhoisIndex":
        dumps = list(dumps)
        blocks = [b for d in dumps for b in d.as_blocks]
        claims: dict[int, list[tuple[str, AsnRecord]]] = {}
        orgs: dict[tuple[str, str], OrgHandle] = {}
        for d in dumps:
            for rec in d.asn_records:
                claims.setdefault(rec.asn, []).append((rec.registry, rec))
            for org in d.org_handles:
                orgs.setdefault((org.registry, org.handle), org)
        records = {}
        for asn, cl in claims.items():
            reg = resolve_asn_registry(asn, cl, blocks)
            rec = next(r for g, r in cl if g == reg)
            records[asn] = replace(rec, authoritative=True)
        return cls(records, orgs, blocks, sum(d.skipped for d in dumps))

    def org_for(self, rec: AsnRecord) -> OrgHandle | None:
        if not rec.org_handle:
            return None
        return self.orgs.get((rec.registry, rec.org_handle))


# ------------------------------------------------------------- CA2O, PeeringDB


@dataclass(frozen=True)
class Ca2oOrg:
    org_id: str
    name: str
    source: str | None = None


@dataclass
class Ca2oDataset:
    by_asn: dict[int, Ca2oOrg] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Ca2oDataset":
        """Read JSON lines carrying ``aut``, ``org_id`` and ``name``."""
        ds = cls()
        for row in read_jsonl(path):
            try:
                asn = parse_asn(str(row["aut"]))
                org = Ca2oOrg(str(row["org_id"]), str(row["name"]).strip(), row.get("source"))
            except (KeyError, ValueError) as exc:
                log.warning("skipping CA2O row %r: %s", row, exc)
                continue
            if org.name:
                ds.by_asn.setdefault(asn, org)
        return ds


@dataclass(frozen=True)
class PdbNet:
    asn: int
    name: str
    org_id: int | None = None
    aka: str = ""
    website: str = ""


@dataclass(frozen=True)
class PdbOrg:
    org_id: int
    name: str
    aka: str = ""
    website: str = ""


@dataclass
class PeeringDbDataset:
    nets_by_asn: dict[int, PdbNet] = field(default_factory=dict)
    orgs: dict[int, PdbOrg] = field(default_factory=dict)

    @classmethod
    def from_json(cls, data: dict) -> "PeeringDbDataset":
        def objects(key: str) -> list[dict]:
            val = data.get(key, [])
            if isinstance(val, dict):
                val = val.get("data", [])
            return val

        ds = cls()
        for o in objects("org"):
            if o.get("id") is None or not o.get("name"):
                continue
            ds.orgs[int(o["id"])] = PdbOrg(
                int(o["id"]), o["name"].strip(), (o.get("aka") or "").strip(), o.get("website") or ""
            )
        for n in objects("net"):
            try:
                asn = parse_asn(str(n["asn"]))
            except (KeyError, ValueError):
                continue
            ds.nets_by_asn.setdefault(
                asn,
                PdbNet(
                    asn,
                    (n.get("name") or "").strip(),
                    int(n["org_id"]) if n.get("org_id") is not None else None,
                    (n.get("aka") or "").strip(),
                    n.get("website") or "",
                ),
            )
        return ds

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PeeringDbDataset":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def org_of(self, net: PdbNet) -> PdbOrg | None:
        return self.orgs.get(net.org_id) if net.org_id is not None else None


# ------------------------------------------------------------------- labeling


@dataclass(frozen=True)
class AsnLink:
    asn: int
    source: str
    record_id: str
    name: str


def label_asn(
    asn: int, whois: WhoisIndex, ca2o: Ca2oDataset, pdb: PeeringDbDataset
) -> AsnLink:
    rec = whois.records.get(asn)
    if rec is not None:
        org = whois.org_for(rec)
        if org is not None:
            return AsnLink(asn, SOURCE_WHOIS, f"whois:{org.registry}:{org.handle}", org.name)
    c = ca2o.by_asn.get(asn)
    if c is not None:
        return AsnLink(asn, SOURCE_CA2O, f"ca2o:{c.org_id}", c.name)
    net = pdb.nets_by_asn.get(asn)
    if net is not None:
        org = pdb.org_of(net)
        if org is not None:
            return AsnLink(asn, SOURCE_PEERINGDB, f"pdb:{org.org_id}", org.name)
        if net.name:
            return AsnLink(asn, SOURCE_PEERINGDB, f"pdbnet:{asn}", net.name)
    if rec is not None:
        # the first descr line only; later lines are mostly addresses
        name = rec.descr or rec.as_name or f"AS{asn}"
        return AsnLink(asn, SOURCE_DESCR, f"descr:AS{asn}", name)
    raise AsnNotFound(f"AS{asn} is not present in any source")


def _add_name(names: list[str], seen: set[str], candidate: str) -> None:
    candidate = candidate.strip()
    if candidate and name_key(candidate) not in seen:
        seen.add(name_key(candidate))
        names.append(candidate)


def build_org_records(
    whois: WhoisIndex, ca2o: Ca2oDataset, pdb: PeeringDbDataset
) -> list[OrgRecord]:
    """One OrgRecord per organization identity; ASNs are partitioned among them."""
    universe = set(whois.records) | set(ca2o.by_asn) | set(pdb.nets_by_asn)
    records: dict[str, OrgRecord] = {}
    for asn in sorted(universe):
        link = label_asn(asn, whois, ca2o, pdb)
        r = records.get(link.record_id)
        if r is None:
            r = records[link.record_id] = OrgRecord(link.record_id, link.name, link.source)
        r.asns.add(asn)
        rec = whois.records.get(asn)
        if rec is not None:
            r.registries.add(rec.registry)
        elif asn in ca2o.by_asn and ca2o.by_asn[asn].source:
            try:
                r.registries.add(parse_registry(ca2o.by_asn[asn].source))
            except ConfigError:
                pass

    for r in records.values():
        aka_seen = {name_key(r.canonical_name)}
        prov_seen = {name_key(r.canonical_name)}
        for asn in sorted(r.asns):
            net = pdb.nets_by_asn.get(asn)
            if net is not None:
                org = pdb.org_of(net)
                for url in (net.website, org.website if org else ""):
                    if url and url not in r.websites:
                        r.websites.append(url)
                for nm in (net.name, net.aka, org.name if org else "", org.aka if org else ""):
                    _add_name(r.aka, aka_seen, nm)
            if r.source == SOURCE_WHOIS and asn in ca2o.by_asn:
                _add_name(r.provisional_aliases, prov_seen, ca2o.by_asn[asn].name)
        if r.provisional_aliases:
            log.info(
                "%s: CA2O name(s) %s differ from WHOIS name %r; kept as provisional",
                r.record_id, r.provisional_aliases, r.canonical_name,
            )
    return [records[k] for k in sorted(records)]


def load_whois_dumps(paths: dict[str, str | os.PathLike]) -> WhoisIndex:
    dumps = []
    for registry, path in paths.items():
        with open(path, "rb") as fh:
            dumps.append(parse_whois_dump(fh, registry))
    return WhoisIndex.from_dumps(dumps)


def write_org_records(path: str | os.PathLike, records: Iterable[OrgRecord]) -> int:
    return write_jsonl(path, (r.to_dict() for r in records))


def read_org_records(path: str | os.PathLike) -> list[OrgRecord]:
    return [OrgRecord.from_dict(d) for d in read_jsonl(path)]

