"""Resumable pipeline stages driven by one YAML config and a run manifest.

Every stage reads and writes plain JSONL files in the output directory:

=========  ===========================================================
ingest     org_records.jsonl
harvest    harvest/harvest_manifest.jsonl + harvest/blobs/
filter     chunks.jsonl, records_filtered.jsonl
index      chunk_index.jsonl
infer      verdicts.jsonl, records_inferred.jsonl
cluster    families.jsonl, cluster_log.jsonl
compare    comparison.json
=========  ===========================================================
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import shlex
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml
from filelock import FileLock, Timeout

from . import compare as cmp
from .corpus import DictionaryExtractor, GlobalNameList, SubprocessExtractor, TextChunk, filter_relevant, split_chunks, tag_chunks
from .errors import ConfigError, ConfigMismatchError, HarvestError, OrgFamilyError, StageOrderError
from .families import build_families, family_rows, verify_partition
from .harvest import (
    STATUS_OK, DocumentStore, FixtureFetcher, FixtureSearchProvider, Harvester, HttpFetcher,
    HttpSearchProvider, PolitenessPolicy,
)
from .inference import HttpBackend, MockBackend, RelationVerdict, infer_relations
from .jsonl import read_jsonl, write_json, write_jsonl
from .names import DEFAULT_STOP_TOKENS
from .registry import (
    Ca2oDataset, OrgRecord, PeeringDbDataset, build_org_records, load_whois_dumps,
    parse_registry, read_org_records, write_org_records,
)
from .store import ChunkIndex

log = logging.getLogger(__name__)

STAGES = ("ingest", "harvest", "filter", "index", "infer", "cluster", "compare")
PREREQUISITE = {s: STAGES[i - 1] if i else None for i, s in enumerate(STAGES)}
COUNTERS = ("orgs", "crawled_urls", "crawled_chunks", "filtered_chunks", "llm_queries", "families")
MANIFEST = "run_manifest.json"
OFFLINE_FETCH_TIME = "1970-01-01T00:00:00+00:00"

DEFAULTS: dict[str, Any] = {
    "inputs": {"whois": {}, "ca2o": None, "peeringdb": None},
    "harvest": {
        "top_k": 5,
        "min_interval_ms": 2000,
        "max_concurrent_hosts": 4,
        "user_agent": PolitenessPolicy().user_agent,
        "offline_fixtures": None,
        "search_endpoint": None,
        "search_api_key_env": "ORGFAMILY_SEARCH_API_KEY",
    },
    "filter": {
        "max_chunk_chars": 1000,
        "overlap_chars": 100,
        "suffix_stop_tokens": sorted(DEFAULT_STOP_TOKENS),
        "extractor_command": None,
    },
    "inference": {
        "backend": "mock",
        "script": None,
        "endpoint": None,
        "model": None,
        "api_key_env": "ORGFAMILY_LLM_API_KEY",
        "temperature": 0.0,
        "retries": 2,
        "k_chunks": 8,
        "requests_per_minute": None,
        "workers": 4,
    },
    "cluster": {"jaccard_threshold": 0.5},
    "compare": {"baseline": None, "format": "ca2o"},
    "output_dir": "out",
}


@dataclass
class PipelineConfig:
    data: dict
    base_dir: Path
    output_dir: Path

    def __getitem__(self, section: str) -> Any:
        return self.data[section]

    def path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def threshold(self) -> float:
        return float(self.data["cluster"]["jaccard_threshold"])

    @property
    def stop_tokens(self) -> frozenset[str]:
        return frozenset(t.lower() for t in self.data["filter"]["suffix_stop_tokens"])

    def hashed(self) -> dict:
        """The config as it takes part in the hash (output location excluded)."""
        d = copy.deepcopy(self.data)
        d.pop("output_dir", None)
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.hashed(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _merge(defaults: dict, given: dict, violations: list[str], prefix: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        name = f"{prefix}{key}"
        if key not in defaults:
            violations.append(f"{name}: unknown setting")
        elif isinstance(defaults[key], dict) and key != "whois":
            if not isinstance(value, dict):
                violations.append(f"{name}: expected a mapping")
            else:
                out[key] = _merge(defaults[key], value, violations, name + ".")
        else:
            out[key] = value
    return out


def _is_int(v: Any, minimum: int) -> bool:
    return isinstance(v, int) and not isinstance(v, bool) and v >= minimum


def validate_config(path: str | os.PathLike, overrides: dict | None = None) -> PipelineConfig:
    """Load and check a config file, reporting every violation at once."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    violations: list[str] = []
    data = _merge(DEFAULTS, raw, violations)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.rpartition(".")
        (data[section] if section else data)[key] = value
    cfg = PipelineConfig(data, path.resolve().parent, Path())

    def need_file(field_name: str, value: Any, kind: str = "file") -> None:
        if not isinstance(value, str) or not value:
            violations.append(f"{field_name}: missing path")
            return
        p = cfg.path(value)
        ok = p.is_dir() if kind == "dir" else p.is_file()
        if not ok:
            violations.append(f"{field_name}: {kind} not found: {p}")

    whois = data["inputs"]["whois"]
    if not isinstance(whois, dict) or not whois:
        violations.append("inputs.whois: missing path (need at least one registry dump)")
    else:
        for reg, p in whois.items():
            try:
                parse_registry(str(reg))
            except ConfigError as exc:
                violations.append(f"inputs.whois.{reg}: {exc}")
            need_file(f"inputs.whois.{reg}", p)
    for key in ("ca2o", "peeringdb"):
        if data["inputs"][key] is not None:
            need_file(f"inputs.{key}", data["inputs"][key])

    h = data["harvest"]
    if not _is_int(h["top_k"], 1):
        violations.append("harvest.top_k: must be an integer >= 1")
    if not isinstance(h["min_interval_ms"], (int, float)) or h["min_interval_ms"] < 0:
        violations.append("harvest.min_interval_ms: must be >= 0")
    if not _is_int(h["max_concurrent_hosts"], 1):
        violations.append("harvest.max_concurrent_hosts: must be an integer >= 1")
    if h["offline_fixtures"] is not None:
        need_file("harvest.offline_fixtures", h["offline_fixtures"], "dir")
    elif not h["search_endpoint"]:
        violations.append("harvest: set offline_fixtures or search_endpoint")

    f = data["filter"]
    if not _is_int(f["max_chunk_chars"], 1):
        violations.append("filter.max_chunk_chars: must be an integer >= 1")
    elif not _is_int(f["overlap_chars"], 0) or f["overlap_chars"] >= f["max_chunk_chars"]:
        violations.append("filter.overlap_chars: must be >= 0 and < max_chunk_chars")
    if not isinstance(f["suffix_stop_tokens"], list):
        violations.append("filter.suffix_stop_tokens: must be a list")

    inf = data["inference"]
    if inf["backend"] == "mock":
        need_file("inference.script", inf["script"])
    elif inf["backend"] == "http":
        for key in ("endpoint", "model"):
            if not inf[key]:
                violations.append(f"inference.{key}: required for the http backend")
    else:
        violations.append(f"inference.backend: unknown backend {inf['backend']!r}")
    if not _is_int(inf["retries"], 0):
        violations.append("inference.retries: must be an integer >= 0")
    if not _is_int(inf["k_chunks"], 1):
        violations.append("inference.k_chunks: must be an integer >= 1")
    if not _is_int(inf["workers"], 1):
        violations.append("inference.workers: must be an integer >= 1")

    t = data["cluster"]["jaccard_threshold"]
    if not isinstance(t, (int, float)) or isinstance(t, bool) or not 0 < t <= 1:
        violations.append(f"cluster.jaccard_threshold: threshold out of range (0, 1]: {t!r}")

    c = data["compare"]
    if c["format"] not in cmp.BASELINE_LOADERS:
        violations.append(f"compare.format: must be one of {sorted(cmp.BASELINE_LOADERS)}")
    if c["baseline"] is not None:
        need_file("compare.baseline", c["baseline"])

    if violations:
        raise ConfigError(violations)
    cfg.output_dir = cfg.path(str(data["output_dir"]))
    return cfg


# ----------------------------------------------------------------- manifest


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    config: dict
    stages: dict[str, bool] = field(default_factory=lambda: {s: False for s in STAGES})
    counters: dict[str, int] = field(default_factory=lambda: {c: 0 for c in COUNTERS})
    details: dict[str, dict] = field(default_factory=dict)
    partial_records: list[str] = field(default_factory=list)

    @classmethod
    def load(cls, out_dir: Path) -> "RunManifest | None":
        p = out_dir / MANIFEST
        if not p.exists():
            return None
        with open(p, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def save(self, out_dir: Path) -> None:
        write_json(out_dir / MANIFEST, self.__dict__)

    def check(self) -> list[str]:
        problems = [f"counter {k} is negative" for k, v in self.counters.items() if v < 0]
        if self.counters["filtered_chunks"] > self.counters["crawled_chunks"]:
            problems.append("filtered_chunks exceeds crawled_chunks")
        if self.counters["families"] > self.counters["orgs"]:
            problems.append("families exceeds orgs")
        return problems


def _config_diff(old: Any, new: Any, prefix: str = "") -> list[str]:
    if isinstance(old, dict) and isinstance(new, dict):
        out = []
        for k in sorted(set(old) | set(new)):
            out += _config_diff(old.get(k), new.get(k), f"{prefix}{k}.")
        return out
    return [] if old == new else [f"{prefix.rstrip('.')}: {old!r} -> {new!r}"]


# ------------------------------------------------------------------- stages


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = config.output_dir
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest.load(self.out)
        if self.manifest is None:
            h = config.config_hash
            self.manifest = RunManifest(h[:12], h, config.hashed())
        elif self.manifest.config_hash != config.config_hash:
            raise ConfigMismatchError(_config_diff(self.manifest.config, config.hashed()))

    # file helpers
    def _p(self, name: str) -> Path:
        return self.out / name

    def _records(self, name: str) -> list[OrgRecord]:
        return read_org_records(self._p(name))

    def run(self, stage: str, force: bool = False) -> dict:
        """Run one stage (or ``all``); returns the counter changes."""
        lock = FileLock(str(self._p(".lock")), timeout=0)
        try:
            lock.acquire()
        except Timeout as exc:
            raise OrgFamilyError(f"output directory {self.out} is locked by another run") from exc
        try:
            if stage == "all":
                delta: dict = {}
                for s in STAGES:
                    if s == "compare" and not self.config["compare"]["baseline"]:
                        continue
                    delta.update(self._run_one(s, force))
                return delta
            return self._run_one(stage, force)
        finally:
            lock.release()

    def _run_one(self, stage: str, force: bool) -> dict:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        pre = PREREQUISITE[stage]
        if pre and not self.manifest.stages[pre]:
            missing = [s for s in STAGES[: STAGES.index(stage)] if not self.manifest.stages[s]]
            raise StageOrderError(f"stage {stage!r} needs {', '.join(missing)} to be completed first")
        if self.manifest.stages[stage] and not force:
            log.info("stage %s already complete; skipping", stage)
            return {}
        log.info("running stage %s", stage)
        delta = getattr(self, f"_stage_{stage}")()
        counters = {k: v for k, v in delta.items() if k in COUNTERS}
        self.manifest.counters.update(counters)
        self.manifest.details[stage] = {k: v for k, v in delta.items() if k not in COUNTERS}
        self.manifest.stages[stage] = True
        problems = self.manifest.check()
        if problems:
            raise OrgFamilyError("manifest invariant violated: " + "; ".join(problems))
        self.manifest.save(self.out)
        return delta

    def _stage_ingest(self) -> dict:
        inputs = self.config["inputs"]
        whois = load_whois_dumps({reg: self.config.path(p) for reg, p in inputs["whois"].items()})
        ca2o = Ca2oDataset.load(self.config.path(inputs["ca2o"])) if inputs["ca2o"] else Ca2oDataset()
        pdb = PeeringDbDataset.load(self.config.path(inputs["peeringdb"])) if inputs["peeringdb"] else PeeringDbDataset()
        records = build_org_records(whois, ca2o, pdb)
        write_org_records(self._p("org_records.jsonl"), records)
        by_source: dict[str, int] = {}
        for r in records:
            by_source[r.source] = by_source.get(r.source, 0) + 1
        return {
            "orgs": len(records),
            "asns": sum(len(r.asns) for r in records),
            "whois_skipped": whois.skipped,
            "records_by_source": dict(sorted(by_source.items())),
        }

    def _harvester(self) -> Harvester:
        h = self.config["harvest"]
        policy = PolitenessPolicy(
            per_host_min_interval=h["min_interval_ms"] / 1000.0,
            max_concurrent_hosts=h["max_concurrent_hosts"],
            user_agent=h["user_agent"],
        )
        store = DocumentStore(self._p("harvest"))
        if h["offline_fixtures"]:
            root = self.config.path(h["offline_fixtures"])
            return Harvester(FixtureSearchProvider(root), FixtureFetcher(root), policy, store,
                             h["top_k"], now=lambda: OFFLINE_FETCH_TIME)
        search = HttpSearchProvider(h["search_endpoint"], h["search_api_key_env"])
        return Harvester(search, HttpFetcher(), policy, store, h["top_k"])

    def _stage_harvest(self) -> dict:
        harvester = self._harvester()
        errors = 0
        total = 0
        statuses: dict[str, int] = {}
        for record in self._records("org_records.jsonl"):
            try:
                docs = harvester.harvest(record)
            except HarvestError as exc:
                log.error("%s: %s", record.record_id, exc)
                errors += 1
                continue
            total += len(docs)
            for d in docs:
                statuses[d.status] = statuses.get(d.status, 0) + 1
        return {"crawled_urls": total, "harvest_errors": errors, "documents_by_status": dict(sorted(statuses.items()))}

    def _stage_filter(self) -> dict:
        records = self._records("org_records.jsonl")
        f = self.config["filter"]
        names = GlobalNameList.from_records(records, self.config.stop_tokens)
        command = f["extractor_command"]
        if isinstance(command, str):
            command = shlex.split(command)
        extractor = SubprocessExtractor(command) if command else DictionaryExtractor(names)
        store = DocumentStore(self._p("harvest"))
        crawled = 0
        kept_rows: list[dict] = []
        try:
            for record in records:
                chunks: list[TextChunk] = []
                for doc in sorted(store.documents(record.record_id), key=lambda d: d.doc_id):
                    if doc.status == STATUS_OK:
                        chunks += split_chunks(doc, f["max_chunk_chars"], f["overlap_chars"])
                crawled += len(chunks)
                kept, _ = filter_relevant(tag_chunks(chunks, names, extractor), record, names)
                kept_rows += [c.to_dict() for c in kept]
        finally:
            if isinstance(extractor, SubprocessExtractor):
                extractor.close()
        write_jsonl(self._p("chunks.jsonl"), kept_rows)
        write_org_records(self._p("records_filtered.jsonl"), records)
        return {"crawled_chunks": crawled, "filtered_chunks": len(kept_rows),
                "records_with_candidates": sum(1 for r in records if r.candidate_orgs)}

    def _stage_index(self) -> dict:
        index = ChunkIndex(stop_tokens=self.config.stop_tokens)
        by_org: dict[str, list[TextChunk]] = {}
        for row in read_jsonl(self._p("chunks.jsonl")):
            c = TextChunk.from_dict(row)
            by_org.setdefault(c.org_record_id, []).append(c)
        for org, chunks in sorted(by_org.items()):
            index.index_chunks(org, chunks)
        index.save(self._p("chunk_index.jsonl"))
        return {"indexed_chunks": len(index), "indexed_pairs": len(index.by_pair)}

    def _backend(self):
        inf = self.config["inference"]
        if inf["backend"] == "mock":
            return MockBackend.load(self.config.path(inf["script"]))
        return HttpBackend(inf["endpoint"], inf["model"], inf["api_key_env"], inf["temperature"],
                           inf["requests_per_minute"])

    def _stage_infer(self) -> dict:
        inf = self.config["inference"]
        records = self._records("records_filtered.jsonl")
        index = ChunkIndex.load(self._p("chunk_index.jsonl"), stop_tokens=self.config.stop_tokens)
        backend = self._backend()

        def work(r: OrgRecord):
            return infer_relations(r, index, backend, inf["k_chunks"], inf["retries"])

        with ThreadPoolExecutor(max_workers=inf["workers"]) as pool:
            results = list(pool.map(work, records))
        verdict_rows = []
        for res in results:
            for v in res.verdicts:
                verdict_rows.append({"record_id": res.record.record_id, **v.to_dict()})
        write_jsonl(self._p("verdicts.jsonl"), verdict_rows)
        write_org_records(self._p("records_inferred.jsonl"), records)
        partial = sorted(res.record.record_id for res in results if res.partial)
        self.manifest.partial_records = partial
        return {
            "llm_queries": sum(res.calls for res in results),
            "prompts": sum(1 for res in results if res.calls),
            "verdicts": len(verdict_rows),
            "partial_records": len(partial),
        }

    def _stage_cluster(self) -> dict:
        records = self._records("records_inferred.jsonl")
        by_id = {r.record_id: r for r in records}
        build = build_families(records, self.config.threshold, self.config.stop_tokens)
        problems = verify_partition(records, build)
        if problems:
            raise OrgFamilyError("partition check failed: " + "; ".join(problems[:5]))
        verdict_ids: dict[str, list[str]] = {}
        for row in read_jsonl(self._p("verdicts.jsonl")):
            if row["relationship"] != "NoRelation":
                verdict_ids.setdefault(row["record_id"], []).append(row["verdict_id"])
        write_jsonl(self._p("families.jsonl"), family_rows(build, by_id, verdict_ids))
        write_jsonl(self._p("cluster_log.jsonl"), build.events)
        return {
            "families": len(build.families),
            "alias_org_sets_stage1": len(build.stage1_sets),
            "alias_org_sets_stage2": len(build.stage2_sets),
            "edges": len(build.edges),
            "dropped_edges": len(build.dropped_edges),
        }

    def _stage_compare(self) -> dict:
        c = self.config["compare"]
        if not c["baseline"]:
            raise ConfigError("compare.baseline: missing path")
        report = compare_files(self._p("families.jsonl"), self.config.path(c["baseline"]), c["format"])
        write_json(self._p("comparison.json"), report.to_dict())
        print(report.table())
        return {"common_asns": report.common_asn_count, "identical": report.identical_count}


def compare_files(ours: str | os.PathLike, baseline: str | os.PathLike, fmt: str) -> cmp.ComparisonReport:
    a = cmp.load_families(ours, "ours")
    b = cmp.BASELINE_LOADERS[fmt](baseline, fmt)
    return cmp.compare(*cmp.align_common(a, b))


def run_stage(stage: str, config: PipelineConfig, force: bool = False) -> dict:
    return Pipeline(config).run(stage, force)


def load_verdicts(path: str | os.PathLike) -> list[RelationVerdict]:
    return [RelationVerdict.from_dict(row) for row in read_jsonl(path)]
