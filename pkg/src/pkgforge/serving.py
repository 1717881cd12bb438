"""Compiled recommendation cache and the HTTP service in front of it.

compile_cache flattens the fused graph into per-key adjacency lists:
one entry per item with outgoing edges, one per user group with
attached items. Entries are immutable snapshots; reload swaps the whole
snapshot atomically so a response is never assembled from two builds.
Lookups are dictionary reads plus a slice — no per-request traversal.
"""

from __future__ import annotations

import hashlib
import json
import os
import selectors
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import NamedTuple
from urllib.parse import parse_qs, unquote, urlparse

from .ioutil import atomic_write_bytes, atomic_write_text
from .kg_core import KnowledgeGraph, export_jsonlines_str, normalize_node_id

DEFAULT_K = 24
GROUP_PREDICATE = "audience match"
VALUE_ORDER = "score_desc"

_CACHE_MAGIC = b"PKGCACHE"
_CACHE_VERSION = 1
_HEADER = struct.Struct("<8sHH32s")


class CacheFormatError(ValueError):
    """Raised when a cache file fails structural or integrity checks."""


class Neighbor(NamedTuple):
    item_id: str
    predicate: str
    score: int | None
    source: str


@dataclass(frozen=True)
class CacheEntry:
    key: str
    kind: str  # "item" or "group"
    neighbors: tuple[Neighbor, ...]


@dataclass(frozen=True)
class BuildMetadata:
    source_graph_hash: str
    build_timestamp: int
    entry_count: int
    content_hash: str
    value_order: str = VALUE_ORDER

    def to_dict(self) -> dict[str, object]:
        return {
            "source_graph_hash": self.source_graph_hash,
            "build_timestamp": self.build_timestamp,
            "entry_count": self.entry_count,
            "content_hash": self.content_hash,
            "value_order": self.value_order,
        }


@dataclass(frozen=True)
class ServingCache:
    """Immutable compiled cache: entry maps plus an item metadata table
    (item_id to title/brand) keeping responses self-contained."""

    items: dict[str, tuple[str, str]]
    item_entries: dict[str, CacheEntry]
    group_entries: dict[str, CacheEntry]
    metadata: BuildMetadata

    def entry_count(self) -> int:
        return len(self.item_entries) + len(self.group_entries)


@dataclass(frozen=True)
class RecItem:
    item_id: str
    title: str
    rationale: str
    score: int | None

    def to_dict(self) -> dict[str, object]:
        return {
            "item_id": self.item_id,
            "title": self.title,
            "rationale": self.rationale,
            "score": self.score,
        }


@dataclass(frozen=True)
class RecommendationResponse:
    seed_key: str
    items: tuple[RecItem, ...]
    fallback: bool
    latency_ms: float

    def to_dict(self) -> dict[str, object]:
        return {
            "seed_key": self.seed_key,
            "items": [item.to_dict() for item in self.items],
            "fallback": self.fallback,
            "latency_ms": self.latency_ms,
        }


def _neighbor_sort_key(neighbor: Neighbor) -> tuple[int, str, str]:
    # Missing scores rank below any scored edge.
    score = -1 if neighbor.score is None else neighbor.score
    return (-score, neighbor.item_id, neighbor.predicate)


def _dedup_neighbors(neighbors: list[Neighbor]) -> tuple[Neighbor, ...]:
    ordered = sorted(neighbors, key=_neighbor_sort_key)
    kept: list[Neighbor] = []
    seen: set[str] = set()
    for neighbor in ordered:
        if neighbor.item_id in seen:
            continue
        seen.add(neighbor.item_id)
        kept.append(neighbor)
    return tuple(kept)


def _resolve_timestamp(build_timestamp: int | None) -> int:
    if build_timestamp is not None:
        return int(build_timestamp)
    env = os.environ.get("SOURCE_DATE_EPOCH")
    if env:
        return int(env)
    return int(time.time())


def compile_cache(
    fused: KnowledgeGraph, build_timestamp: int | None = None
) -> ServingCache:
    """Flatten the fused graph into adjacency entries.

    Item entries cover every node with outgoing edges (self-loops
    count); group entries attach a group's items under the fixed
    "audience match" predicate. Output is deterministic for a given
    graph; pass build_timestamp for reproducible builds (SOURCE_DATE_EPOCH
    is honored when set).
    """
    items = {
        node_id: (node.title, node.brand)
        for node_id, node in fused.product_nodes.items()
    }
    outgoing: dict[str, list[Neighbor]] = {}
    for edge in fused.edges:
        outgoing.setdefault(edge.subject_id, []).append(
            Neighbor(edge.object_id, edge.predicate, edge.score, edge.source)
        )
    item_entries = {
        key: CacheEntry(key=key, kind="item", neighbors=_dedup_neighbors(found))
        for key, found in sorted(outgoing.items())
    }
    attached: dict[str, list[Neighbor]] = {}
    for audience_edge in fused.audience_edges:
        attached.setdefault(audience_edge.group_id, []).append(
            Neighbor(audience_edge.product_id, GROUP_PREDICATE, None, "audience")
        )
    group_entries = {
        key: CacheEntry(key=key, kind="group", neighbors=_dedup_neighbors(found))
        for key, found in sorted(attached.items())
    }
    source_hash = hashlib.sha256(
        export_jsonlines_str(fused).encode("utf-8")
    ).hexdigest()
    timestamp = _resolve_timestamp(build_timestamp)
    entry_count = len(item_entries) + len(group_entries)
    payload = _serialize_payload(
        items, item_entries, group_entries, source_hash, timestamp, entry_count
    )
    content_hash = hashlib.sha256(payload).hexdigest()
    metadata = BuildMetadata(
        source_graph_hash=source_hash,
        build_timestamp=timestamp,
        entry_count=entry_count,
        content_hash=content_hash,
    )
    return ServingCache(
        items=items,
        item_entries=item_entries,
        group_entries=group_entries,
        metadata=metadata,
    )


def _encode_entries(
    entries: dict[str, CacheEntry]
) -> tuple[dict[str, list[int]], bytes]:
    """Entry table with byte offsets into one concatenated blob."""
    index: dict[str, list[int]] = {}
    chunks: list[bytes] = []
    offset = 0
    for key in sorted(entries):
        blob = json.dumps(
            [list(neighbor) for neighbor in entries[key].neighbors],
            ensure_ascii=False,
            separators=(",", ":"),
        ).encode("utf-8")
        index[key] = [offset, len(blob)]
        chunks.append(blob)
        offset += len(blob)
    return index, b"".join(chunks)


def _serialize_payload(
    items: dict[str, tuple[str, str]],
    item_entries: dict[str, CacheEntry],
    group_entries: dict[str, CacheEntry],
    source_hash: str,
    timestamp: int,
    entry_count: int,
) -> bytes:
    meta_blob = json.dumps(
        {"value_order": VALUE_ORDER, "source_graph_hash": source_hash},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    items_blob = json.dumps(
        {key: list(value) for key, value in sorted(items.items())},
        ensure_ascii=False,
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    item_index, item_blob = _encode_entries(item_entries)
    group_index, group_blob = _encode_entries(group_entries)
    index_blob = json.dumps(
        {"item": item_index, "group": group_index},
        ensure_ascii=False,
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    # Entry offsets are relative to their own section blob.
    parts = [struct.pack("<QI", timestamp, entry_count)]
    for blob in (meta_blob, items_blob, index_blob, item_blob, group_blob):
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def save_cache(cache: ServingCache, path: str) -> None:
    payload = _serialize_payload(
        cache.items,
        cache.item_entries,
        cache.group_entries,
        cache.metadata.source_graph_hash,
        cache.metadata.build_timestamp,
        cache.metadata.entry_count,
    )
    digest = hashlib.sha256(payload).digest()
    header = _HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, 0, digest)
    atomic_write_bytes(path, header + payload)


def _read_blob(payload: bytes, offset: int) -> tuple[bytes, int]:
    if offset + 8 > len(payload):
        raise CacheFormatError("truncated cache payload")
    (length,) = struct.unpack_from("<Q", payload, offset)
    offset += 8
    if offset + length > len(payload):
        raise CacheFormatError("truncated cache payload")
    return payload[offset : offset + length], offset + length


def load_cache(path: str) -> ServingCache:
    """Read and verify a cache file; any integrity failure raises
    CacheFormatError and nothing is swapped in."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < _HEADER.size:
        raise CacheFormatError(f"{path}: truncated cache file")
    magic, version, _, digest = _HEADER.unpack_from(blob, 0)
    if magic != _CACHE_MAGIC:
        raise CacheFormatError(f"{path}: not a cache file")
    if version != _CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported cache version {version}")
    payload = blob[_HEADER.size :]
    if hashlib.sha256(payload).digest() != digest:
        raise CacheFormatError(f"{path}: content hash mismatch")
    if len(payload) < 12:
        raise CacheFormatError(f"{path}: truncated cache payload")
    timestamp, entry_count = struct.unpack_from("<QI", payload, 0)
    offset = 12
    meta_blob, offset = _read_blob(payload, offset)
    items_blob, offset = _read_blob(payload, offset)
    index_blob, offset = _read_blob(payload, offset)
    item_blob, offset = _read_blob(payload, offset)
    group_blob, offset = _read_blob(payload, offset)
    try:
        meta = json.loads(meta_blob)
        items_raw = json.loads(items_blob)
        index = json.loads(index_blob)
    except ValueError as exc:
        raise CacheFormatError(f"{path}: malformed cache tables: {exc}") from exc
    items = {key: (value[0], value[1]) for key, value in items_raw.items()}

    def decode_section(
        section: dict[str, list[int]], blob_part: bytes, kind: str
    ) -> dict[str, CacheEntry]:
        entries: dict[str, CacheEntry] = {}
        for key, (start, length) in section.items():
            try:
                rows = json.loads(blob_part[start : start + length])
            except ValueError as exc:
                raise CacheFormatError(
                    f"{path}: malformed entry {key!r}: {exc}"
                ) from exc
            neighbors = tuple(
                Neighbor(row[0], row[1], row[2], row[3]) for row in rows
            )
            entries[key] = CacheEntry(key=key, kind=kind, neighbors=neighbors)
        return entries

    item_entries = decode_section(index.get("item", {}), item_blob, "item")
    group_entries = decode_section(index.get("group", {}), group_blob, "group")
    if len(item_entries) + len(group_entries) != entry_count:
        raise CacheFormatError(f"{path}: entry count mismatch")
    metadata = BuildMetadata(
        source_graph_hash=meta.get("source_graph_hash", ""),
        build_timestamp=timestamp,
        entry_count=entry_count,
        content_hash=hashlib.sha256(payload).hexdigest(),
        value_order=meta.get("value_order", VALUE_ORDER),
    )
    return ServingCache(
        items=items,
        item_entries=item_entries,
        group_entries=group_entries,
        metadata=metadata,
    )


def export_cache_debug(cache: ServingCache, path: str) -> None:
    """Human-diffable JSON-lines view of a compiled cache."""
    lines = [
        json.dumps(
            {"kind": "metadata", **cache.metadata.to_dict()},
            ensure_ascii=False,
            separators=(",", ":"),
        )
    ]
    for section in (cache.item_entries, cache.group_entries):
        for key in sorted(section):
            entry = section[key]
            lines.append(
                json.dumps(
                    {
                        "kind": entry.kind,
                        "key": entry.key,
                        "neighbors": [list(n) for n in entry.neighbors],
                    },
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
            )
    atomic_write_text(path, "\n".join(lines) + "\n")


def _assemble(
    cache: ServingCache,
    seed_key: str,
    entry: CacheEntry | None,
    k: int,
    started: float,
) -> RecommendationResponse:
    if entry is None:
        return RecommendationResponse(
            seed_key=seed_key,
            items=(),
            fallback=True,
            latency_ms=(time.perf_counter() - started) * 1000.0,
        )
    picked = entry.neighbors[:k]
    items = tuple(
        RecItem(
            item_id=neighbor.item_id,
            title=cache.items.get(neighbor.item_id, (neighbor.item_id, ""))[0],
            rationale=neighbor.predicate,
            score=neighbor.score,
        )
        for neighbor in picked
    )
    return RecommendationResponse(
        seed_key=seed_key,
        items=items,
        fallback=False,
        latency_ms=(time.perf_counter() - started) * 1000.0,
    )


def lookup_item(
    cache: ServingCache, item_id: str, k: int = DEFAULT_K
) -> RecommendationResponse:
    """Top-k neighbors in stored order; unknown keys fall back (empty
    items, fallback=true) rather than erroring."""
    if k < 1:
        raise ValueError("k must be positive")
    started = time.perf_counter()
    return _assemble(cache, item_id, cache.item_entries.get(item_id), k, started)


def lookup_group(
    cache: ServingCache, group_id: str, k: int = DEFAULT_K
) -> RecommendationResponse:
    """Group lookup accepts either the normalized group id or the label."""
    if k < 1:
        raise ValueError("k must be positive")
    started = time.perf_counter()
    entry = cache.group_entries.get(group_id)
    if entry is None:
        entry = cache.group_entries.get(normalize_node_id(group_id))
    return _assemble(cache, group_id, entry, k, started)


_REASON = {
    200: "OK",
    400: "Bad Request",
    404: "Not Found",
    405: "Method Not Allowed",
}
_MAX_HEADER_BYTES = 65536


def _route(
    service: "ServingService", method: str, target: str
) -> tuple[int, dict[str, object], str]:
    cache = service.cache  # one snapshot read per request
    build = cache.metadata.content_hash
    if method != "GET":
        return 405, {"error": "method not allowed"}, build
    parsed = urlparse(target)
    segments = [unquote(part) for part in parsed.path.split("/") if part]
    if segments == ["health"]:
        return 200, {"status": "ok", "build_metadata": cache.metadata.to_dict()}, build
    if segments == ["stats"]:
        body: dict[str, object] = {
            "entry_count": cache.entry_count(),
            "item_entries": len(cache.item_entries),
            "group_entries": len(cache.group_entries),
            "validation_report": service.validation_report,
        }
        return 200, body, build
    if len(segments) == 3 and segments[0] == "recs":
        kind, key = segments[1], segments[2]
        if kind in ("item", "group"):
            query = parse_qs(parsed.query)
            raw_k = query.get("k", [str(service.default_k)])[0]
            try:
                k = int(raw_k)
                if k < 1:
                    raise ValueError
            except ValueError:
                return 400, {"error": f"malformed k: {raw_k!r}"}, build
            lookup = lookup_item if kind == "item" else lookup_group
            return 200, lookup(cache, key, k).to_dict(), build
    return 404, {"error": "not found"}, build


def _encode_response(
    status: int, body: dict[str, object], build: str, keep_alive: bool
) -> bytes:
    blob = json.dumps(body, ensure_ascii=False).encode("utf-8")
    head = (
        f"HTTP/1.1 {status} {_REASON[status]}\r\n"
        "Content-Type: application/json\r\n"
        "Cache-Control: no-store\r\n"
        f"X-Cache-Build: {build}\r\n"
        f"Content-Length: {len(blob)}\r\n"
    )
    if not keep_alive:
        head += "Connection: close\r\n"
    return (head + "\r\n").encode("latin-1") + blob


class _Connection:
    """Per-socket buffers for the event loop."""

    __slots__ = ("sock", "inbound", "outbound", "close_after_write",
                 "body_skip", "wants_write")

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.inbound = bytearray()
        self.outbound = bytearray()
        self.close_after_write = False
        self.body_skip = 0  # request body bytes still to discard
        self.wants_write = False


class ServingService:
    """HTTP front over an atomically swappable cache snapshot.

    The server is a single-threaded event loop: a lookup is a couple of
    dictionary reads, so multiplexing connections on one thread keeps
    tail latency free of thread-scheduling noise. reload_cache may be
    called from any thread; each request reads the snapshot reference
    once, so a response is never assembled from two builds.
    """

    def __init__(
        self,
        cache: ServingCache,
        bind_address: str = "127.0.0.1:0",
        default_k: int = DEFAULT_K,
        validation_report: dict[str, object] | None = None,
    ):
        host, _, port_text = bind_address.partition(":")
        self.cache = cache
        self.default_k = default_k
        self.validation_report = validation_report
        self._listener = socket.create_server((host or "127.0.0.1", int(port_text or 0)))
        self._listener.setblocking(False)
        self._wake_recv, self._wake_send = socket.socketpair()
        self._wake_recv.setblocking(False)
        self._selector = selectors.DefaultSelector()
        self._selector.register(self._listener, selectors.EVENT_READ, "listener")
        self._selector.register(self._wake_recv, selectors.EVENT_READ, "wake")
        self._running = False
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._listener.getsockname()[1]

    @property
    def address(self) -> str:
        host, port = self._listener.getsockname()[:2]
        return f"{host}:{port}"

    def _close_connection(self, conn: _Connection) -> None:
        try:
            self._selector.unregister(conn.sock)
        except (KeyError, ValueError):
            pass
        try:
            conn.sock.close()
        except OSError:
            pass

    def _accept_ready(self) -> None:
        while True:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setblocking(False)
            try:
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            except OSError:
                pass
            self._selector.register(sock, selectors.EVENT_READ, _Connection(sock))

    def _drain_requests(self, conn: _Connection) -> bool:
        """Answer every complete request in the buffer. Returns False
        when the connection was torn down on a protocol error."""
        while True:
            if conn.body_skip:
                skip = min(conn.body_skip, len(conn.inbound))
                del conn.inbound[:skip]
                conn.body_skip -= skip
                if conn.body_skip:
                    return True
            end = conn.inbound.find(b"\r\n\r\n")
            if end < 0:
                if len(conn.inbound) > _MAX_HEADER_BYTES:
                    self._close_connection(conn)
                    return False
                return True
            head = bytes(conn.inbound[:end]).decode("latin-1", "replace")
            del conn.inbound[: end + 4]
            lines = head.split("\r\n")
            parts = lines[0].split(" ", 2)
            if len(parts) != 3:
                self._close_connection(conn)
                return False
            method, target, version = parts
            headers: dict[str, str] = {}
            for line in lines[1:]:
                name, _, value = line.partition(":")
                headers[name.strip().lower()] = value.strip()
            length_text = headers.get("content-length", "0")
            conn.body_skip = int(length_text) if length_text.isdigit() else 0
            keep_alive = (
                version == "HTTP/1.1"
                and headers.get("connection", "").lower() != "close"
            )
            status, body, build = _route(self, method, target)
            conn.outbound += _encode_response(status, body, build, keep_alive)
            if not keep_alive:
                conn.close_after_write = True
                return True

    def _flush(self, conn: _Connection) -> None:
        if conn.outbound:
            try:
                sent = conn.sock.send(conn.outbound)
                del conn.outbound[:sent]
            except (BlockingIOError, InterruptedError):
                pass
            except OSError:
                self._close_connection(conn)
                return
        if conn.outbound:
            if not conn.wants_write:
                conn.wants_write = True
                self._selector.modify(
                    conn.sock, selectors.EVENT_READ | selectors.EVENT_WRITE, conn
                )
            return
        if conn.close_after_write:
            self._close_connection(conn)
            return
        if conn.wants_write:
            conn.wants_write = False
            self._selector.modify(conn.sock, selectors.EVENT_READ, conn)

    def _service_connection(self, conn: _Connection, mask: int) -> None:
        if mask & selectors.EVENT_READ:
            try:
                chunk = conn.sock.recv(65536)
            except (BlockingIOError, InterruptedError):
                chunk = None
            except OSError:
                self._close_connection(conn)
                return
            if chunk == b"":
                self._close_connection(conn)
                return
            if chunk:
                conn.inbound.extend(chunk)
                if not self._drain_requests(conn):
                    return
        self._flush(conn)

    def _serve_loop(self) -> None:
        while self._running:
            for key, mask in self._selector.select():
                if key.data == "listener":
                    self._accept_ready()
                elif key.data == "wake":
                    try:
                        self._wake_recv.recv(64)
                    except OSError:
                        pass
                else:
                    self._service_connection(key.data, mask)

    def start(self) -> "ServingService":
        if self._thread is not None:
            return self
        self._running = True
        self._thread = threading.Thread(target=self._serve_loop, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._thread is None:
            return
        self._running = False
        try:
            self._wake_send.send(b"x")
        except OSError:
            pass
        self._thread.join(timeout=5.0)
        self._thread = None
        for key in list(self._selector.get_map().values()):
            if isinstance(key.data, _Connection):
                self._close_connection(key.data)
        self._selector.close()
        self._listener.close()
        self._wake_recv.close()
        self._wake_send.close()

    def reload_cache(self, path: str) -> None:
        """Swap in a verified cache file. A failed verification leaves
        the current snapshot serving; the swap itself is a single
        reference assignment, so requests see old or new, never a mix."""
        self.cache = load_cache(path)


def serve_http(
    cache: ServingCache,
    bind_address: str = "127.0.0.1:0",
    default_k: int = DEFAULT_K,
    validation_report: dict[str, object] | None = None,
) -> ServingService:
    """Start serving the cache; returns the running service."""
    return ServingService(
        cache,
        bind_address=bind_address,
        default_k=default_k,
        validation_report=validation_report,
    ).start()


def reload_cache(service: ServingService, path: str) -> None:
    service.reload_cache(path)
