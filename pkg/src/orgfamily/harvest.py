"""Targeted search queries, polite fetching, and the raw document store."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Iterator, Protocol
from urllib.parse import quote_plus, urldefrag, urlsplit
from urllib.robotparser import RobotFileParser

import httpx

from .errors import HarvestError
from .jsonl import dumps, read_jsonl
from .registry import OrgRecord

log = logging.getLogger(__name__)

DEFAULT_QUERY_TEMPLATES = (
    "{name} acquired by",
    "{name} parent company",
    "{name} Wikipedia",
    "{name} subsidiary",
    "{name} rebrand",
)
DEFAULT_USER_AGENT = "orgfamily-crawler/0.1 (AS-to-organization research crawler)"
HTML_TYPES = ("text/html", "application/xhtml+xml", "text/plain")

STATUS_OK = "ok"
STATUS_ROBOTS_DENIED = "robots_denied"
STATUS_FETCH_ERROR = "fetch_error"
STATUS_NON_HTML = "non_html"


def build_search_queries(org_name: str, templates: Iterable[str] = DEFAULT_QUERY_TEMPLATES) -> list[str]:
    name = org_name.strip()
    if not name:
        raise ValueError("org_name must be non-empty")
    return [t.format(name=name) for t in templates]


@dataclass(frozen=True)
class PolitenessPolicy:
    per_host_min_interval: float = 2.0  # seconds
    max_concurrent_hosts: int = 4
    user_agent: str = DEFAULT_USER_AGENT
    obey_robots: bool = True


@dataclass
class HarvestDocument:
    doc_id: str
    org_record_id: str
    url: str
    fetched_at: str
    body: bytes
    status: str
    content_type: str = ""

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "org_record_id": self.org_record_id,
            "url": self.url,
            "fetched_at": self.fetched_at,
            "status": self.status,
            "content_type": self.content_type,
            "sha256": hashlib.sha256(self.body).hexdigest() if self.body else None,
            "size": len(self.body),
        }


def doc_id_for(org_record_id: str, url: str) -> str:
    return hashlib.sha256(f"{org_record_id}\n{url}".encode()).hexdigest()[:20]


def is_valid_url(url: str) -> bool:
    try:
        parts = urlsplit(url)
    except ValueError:
        return False
    return parts.scheme in ("http", "https") and bool(parts.netloc)


def host_of(url: str) -> str:
    return urlsplit(url).netloc.lower()


# --------------------------------------------------------------- providers


@dataclass
class FetchResponse:
    status_code: int
    content_type: str
    body: bytes


class SearchProvider(Protocol):
    def search(self, query: str) -> list[str]: ...


class Fetcher(Protocol):
    def fetch(self, url: str, user_agent: str) -> FetchResponse: ...


class FixtureSearchProvider:
    """Search results replayed from ``<dir>/search.json`` (query -> list of URLs)."""

    def __init__(self, root: str | os.PathLike):
        path = Path(root) / "search.json"
        with open(path, encoding="utf-8") as fh:
            self.results: dict[str, list[str]] = json.load(fh)
        self.queries: list[str] = []

    def search(self, query: str) -> list[str]:
        self.queries.append(query)
        return list(self.results.get(query, []))


class FixtureFetcher:
    """Serves pages listed in ``<dir>/pages.json``; unknown URLs return 404.

    Entries map a URL to a file name relative to ``<dir>/pages`` or to an
    object ``{"file": ..., "content_type": ..., "status": ..., "error": ...}``.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        with open(self.root / "pages.json", encoding="utf-8") as fh:
            self.pages: dict[str, str | dict] = json.load(fh)
        self.calls: list[str] = []
        self._lock = threading.Lock()

    def fetch(self, url: str, user_agent: str) -> FetchResponse:
        with self._lock:
            self.calls.append(url)
        entry = self.pages.get(url)
        if entry is None:
            return FetchResponse(404, "text/plain", b"")
        if isinstance(entry, str):
            entry = {"file": entry}
        if entry.get("error") == "timeout":
            raise TimeoutError(f"fixture timeout for {url}")
        ctype = entry.get("content_type", "text/html; charset=utf-8")
        body = (self.root / "pages" / entry["file"]).read_bytes() if entry.get("file") else b""
        return FetchResponse(int(entry.get("status", 200)), ctype, body)


class HttpSearchProvider:
    """Generic JSON search API addressed by an endpoint template.

    The template receives ``{query}`` and ``{key}``; results are read from
    ``response[result_key][i][url_key]`` (or plain strings in the list).
    """

    def __init__(
        self,
        endpoint_template: str,
        api_key_env: str = "ORGFAMILY_SEARCH_API_KEY",
        result_key: str = "results",
        url_key: str = "url",
        client: httpx.Client | None = None,
        timeout: float = 20.0,
    ):
        self.endpoint_template = endpoint_template
        self.api_key = os.environ.get(api_key_env, "")
        self.result_key = result_key
        self.url_key = url_key
        self.client = client or httpx.Client(timeout=timeout)

    def search(self, query: str) -> list[str]:
        url = self.endpoint_template.format(query=quote_plus(query), key=quote_plus(self.api_key))
        resp = self.client.get(url)
        resp.raise_for_status()
        items = resp.json().get(self.result_key, [])
        return [it if isinstance(it, str) else it.get(self.url_key, "") for it in items]


class HttpFetcher:
    def __init__(self, client: httpx.Client | None = None, timeout: float = 20.0):
        self.client = client or httpx.Client(timeout=timeout, follow_redirects=True)

    def fetch(self, url: str, user_agent: str) -> FetchResponse:
        resp = self.client.get(url, headers={"User-Agent": user_agent})
        return FetchResponse(resp.status_code, resp.headers.get("content-type", ""), resp.content)


# --------------------------------------------------------------- politeness


class HostThrottle:
    """Serializes requests per host and spaces them by a minimum interval.

    The interval runs from the end of one request to the start of the next.
    """

    def __init__(
        self,
        min_interval: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.min_interval = min_interval
        self.clock = clock
        self.sleep = sleep
        self.trace: list[tuple[str, float, str]] = []
        self._last: dict[str, float] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def _lock_for(self, host: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(host, threading.Lock())

    def request(self, url: str, do: Callable[[], FetchResponse]) -> FetchResponse:
        host = host_of(url)
        with self._lock_for(host):
            last = self._last.get(host)
            now = self.clock()
            while last is not None and now - last < self.min_interval:
                self.sleep(self.min_interval - (now - last))
                now = self.clock()
            with self._guard:
                self.trace.append((host, now, url))
            try:
                return do()
            finally:
                # measured from completion so slow responses never shorten the gap
                self._last[host] = self.clock()


class RobotsCache:
    def __init__(self, fetcher: Fetcher, throttle: HostThrottle, user_agent: str):
        self.fetcher = fetcher
        self.throttle = throttle
        self.user_agent = user_agent
        self._parsers: dict[str, RobotFileParser] = {}
        self._lock = threading.Lock()

    def _load(self, url: str) -> RobotFileParser:
        parts = urlsplit(url)
        robots_url = f"{parts.scheme}://{parts.netloc}/robots.txt"
        rp = RobotFileParser(robots_url)
        try:
            resp = self.throttle.request(robots_url, lambda: self.fetcher.fetch(robots_url, self.user_agent))
        except Exception as exc:  # network failure: treat the site as unreachable
            log.info("robots.txt for %s unreachable (%s); disallowing", parts.netloc, exc)
            rp.disallow_all = True
            return rp
        if resp.status_code >= 500:
            rp.disallow_all = True
        elif resp.status_code >= 400:
            rp.allow_all = True
        else:
            rp.parse(resp.body.decode("utf-8", errors="replace").splitlines())
        return rp

    def allowed(self, url: str) -> bool:
        host = host_of(url)
        with self._lock:
            rp = self._parsers.get(host)
        if rp is None:
            rp = self._load(url)
            with self._lock:
                rp = self._parsers.setdefault(host, rp)
        return rp.can_fetch(self.user_agent, url)


# ----------------------------------------------------------- document store


class DocumentStore:
    """Content-addressed bodies under ``blobs/`` plus ``harvest_manifest.jsonl``."""

    MANIFEST = "harvest_manifest.jsonl"

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        (self.root / "blobs").mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / self.MANIFEST
        self._rows: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.manifest_path.exists():
            for row in read_jsonl(self.manifest_path):
                self._rows[row["doc_id"]] = row

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._rows

    def __len__(self) -> int:
        return len(self._rows)

    def put(self, docs: Iterable[HarvestDocument]) -> None:
        with self._lock, open(self.manifest_path, "a", encoding="utf-8", newline="\n") as fh:
            for doc in docs:
                if doc.doc_id in self._rows:
                    continue
                row = doc.to_dict()
                if doc.body:
                    blob = self.root / "blobs" / row["sha256"]
                    if not blob.exists():
                        blob.write_bytes(doc.body)
                fh.write(dumps(row) + "\n")
                self._rows[doc.doc_id] = row

    def _load(self, row: dict) -> HarvestDocument:
        body = (self.root / "blobs" / row["sha256"]).read_bytes() if row.get("sha256") else b""
        return HarvestDocument(
            row["doc_id"], row["org_record_id"], row["url"], row["fetched_at"],
            body, row["status"], row.get("content_type", ""),
        )

    def get(self, doc_id: str) -> HarvestDocument | None:
        row = self._rows.get(doc_id)
        return self._load(row) if row else None

    def documents(self, org_record_id: str | None = None) -> Iterator[HarvestDocument]:
        for row in list(self._rows.values()):
            if org_record_id is None or row["org_record_id"] == org_record_id:
                yield self._load(row)


# ------------------------------------------------------------------ harvest


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class Harvester:
    """Holds the per-run state shared across organizations (throttle, robots cache)."""

    search: SearchProvider
    fetcher: Fetcher
    policy: PolitenessPolicy = field(default_factory=PolitenessPolicy)
    store: DocumentStore | None = None
    top_k: int = 5
    templates: tuple[str, ...] = DEFAULT_QUERY_TEMPLATES
    now: Callable[[], str] = _utc_now
    throttle: HostThrottle | None = None

    def __post_init__(self):
        if self.throttle is None:
            self.throttle = HostThrottle(self.policy.per_host_min_interval)
        self.robots = RobotsCache(self.fetcher, self.throttle, self.policy.user_agent)

    def candidate_urls(self, org: OrgRecord) -> list[str]:
        urls: list[str] = []
        seen: set[str] = set()

        def add(url: str) -> None:
            url = urldefrag(url.strip())[0]
            if not is_valid_url(url):
                if url:
                    log.debug("ignoring invalid URL %r", url)
                return
            if url not in seen:
                seen.add(url)
                urls.append(url)

        for url in org.websites:
            add(url)
        for query in build_search_queries(org.canonical_name, self.templates):
            try:
                results = self.search.search(query)
            except Exception as exc:
                raise HarvestError(f"search failed for {query!r}: {exc}", query) from exc
            for url in results[: self.top_k]:
                add(url)
        return urls

    def _fetch_one(self, org: OrgRecord, url: str) -> HarvestDocument:
        doc_id = doc_id_for(org.record_id, url)

        def doc(status: str, body: bytes = b"", ctype: str = "") -> HarvestDocument:
            return HarvestDocument(doc_id, org.record_id, url, self.now(), body, status, ctype)

        if self.policy.obey_robots and not self.robots.allowed(url):
            return doc(STATUS_ROBOTS_DENIED)
        try:
            resp = self.throttle.request(url, lambda: self.fetcher.fetch(url, self.policy.user_agent))
        except Exception as exc:
            log.info("fetch failed for %s: %s", url, exc)
            return doc(STATUS_FETCH_ERROR)
        ctype = resp.content_type.split(";")[0].strip().lower()
        if resp.status_code >= 400 or not resp.body:
            return doc(STATUS_FETCH_ERROR, ctype=ctype)
        if ctype and ctype not in HTML_TYPES:
            return doc(STATUS_NON_HTML, ctype=ctype)
        return doc(STATUS_OK, resp.body, ctype)

    def _fetch_host(self, org: OrgRecord, urls: list[str]) -> list[HarvestDocument]:
        return [self._fetch_one(org, u) for u in urls]

    def harvest(self, org: OrgRecord) -> list[HarvestDocument]:
        urls = self.candidate_urls(org)
        pending = [u for u in urls if self.store is None or doc_id_for(org.record_id, u) not in self.store]
        by_host: dict[str, list[str]] = {}
        for u in pending:
            by_host.setdefault(host_of(u), []).append(u)
        fetched: dict[str, HarvestDocument] = {}
        workers = max(1, min(self.policy.max_concurrent_hosts, len(by_host)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for docs in pool.map(lambda h: self._fetch_host(org, by_host[h]), by_host):
                for d in docs:
                    fetched[d.url] = d
        new_docs = [fetched[u] for u in pending]
        if self.store is not None:
            self.store.put(new_docs)
            return [self.store.get(doc_id_for(org.record_id, u)) for u in urls]
        return new_docs


def harvest(
    org: OrgRecord,
    search: SearchProvider,
    fetch: Fetcher,
    policy: PolitenessPolicy | None = None,
    top_k: int = 5,
    store: DocumentStore | None = None,
    **kwargs,
) -> list[HarvestDocument]:
    """Search, fetch and persist the evidence documents for one organization."""
    h = Harvester(search, fetch, policy or PolitenessPolicy(), store, top_k, **kwargs)
    return h.harvest(org)
