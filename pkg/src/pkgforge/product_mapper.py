"""Catalog mapping: title embeddings, KNN retrieval, graph fusion.

Abstract graph nodes are matched to internal catalog items by cosine
similarity over title embeddings. The index runs exact (full scan) or
approximate (layered small-world neighbor graph with greedy beam
descent; recall is testable against exact mode). Fusion rewrites the
graph at catalog-item granularity, expanding each edge over the matched
items on both ends.
"""

from __future__ import annotations

import heapq
import json
import math
import random
import re
import struct
from dataclasses import dataclass

import numpy as np

from .fnv import fnv1a_64
from .ioutil import atomic_write_bytes
from .kg_core import (
    AudienceEdge,
    Edge,
    KnowledgeGraph,
    ProductNode,
    UserGroupNode,
)

DEFAULT_DIMENSION = 64
DEFAULT_MAP_THRESHOLD = 0.75
DEFAULT_MAX_MATCHES = 3

# Small-world index parameters: max neighbors per node per layer (ground
# layer doubled, as is standard), construction beam, and query beam.
SW_MAX_NEIGHBORS = 16
SW_CONSTRUCTION_BEAM = 100
SW_QUERY_BEAM = 64

_INDEX_MAGIC = b"PKGKNN01"
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class MappingError(ValueError):
    """Raised for embedding, index, and fusion contract violations."""


@dataclass(frozen=True)
class CatalogItem:
    item_id: str
    title: str
    brand: str = ""
    category: str = ""

    def __post_init__(self) -> None:
        if not self.item_id:
            raise ValueError("item_id must be non-empty")
        if not self.title.strip():
            raise ValueError(f"item {self.item_id!r} has a blank title")


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    @property
    def norm(self) -> float:
        return math.sqrt(sum(v * v for v in self.values))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True)
class MappingResult:
    """Catalog matches for one graph node. When nothing clears the
    threshold, matches still carries the best candidate for audit and
    mapped is False."""

    node_id: str
    matches: tuple[tuple[str, float], ...]
    mapped: bool


class HashingEmbedder:
    """Deterministic bag-of-words provider for tests and offline runs.

    Tokens are lowercased alphanumeric runs; each adds 1.0 at index
    fnv1a_64(token) mod dimension; the result is L2-normalized.
    """

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension

    def embed(self, title: str) -> np.ndarray:
        if not title.strip():
            raise MappingError("cannot embed an empty title")
        vec = np.zeros(self.dimension, dtype=np.float64)
        for token in _TOKEN_RE.findall(title.lower()):
            vec[fnv1a_64(token.encode("utf-8")) % self.dimension] += 1.0
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise MappingError(f"title has no indexable tokens: {title!r}")
        return vec / norm

    def embed_batch(self, titles: list[str]) -> np.ndarray:
        return np.stack([self.embed(title) for title in titles])


class RemoteEmbedder:
    """HTTP embedding provider: POST {"input": [titles]} to a single
    endpoint, expecting {"embeddings": [[...], ...]} back. Vectors are
    re-normalized on receipt."""

    def __init__(
        self,
        endpoint_url: str,
        dimension: int | None = None,
        timeout_ms: int = 30000,
        batch_size: int = 128,
    ):
        if not endpoint_url:
            raise ValueError("endpoint_url must be non-empty")
        self.endpoint_url = endpoint_url
        self.dimension = dimension
        self.timeout_s = timeout_ms / 1000.0
        self.batch_size = batch_size

    def embed_batch(self, titles: list[str]) -> np.ndarray:
        import requests as _requests

        rows: list[np.ndarray] = []
        for start in range(0, len(titles), self.batch_size):
            chunk = titles[start : start + self.batch_size]
            reply = _requests.post(
                self.endpoint_url, json={"input": chunk}, timeout=self.timeout_s
            )
            if reply.status_code != 200:
                raise MappingError(
                    f"embedding endpoint returned {reply.status_code}"
                )
            payload = reply.json()
            vectors = payload.get("embeddings")
            if not isinstance(vectors, list) or len(vectors) != len(chunk):
                raise MappingError("embedding endpoint returned a bad batch")
            rows.extend(np.asarray(v, dtype=np.float64) for v in vectors)
        matrix = np.stack(rows)
        if self.dimension is not None and matrix.shape[1] != self.dimension:
            raise MappingError(
                f"dimension mismatch: expected {self.dimension}, "
                f"got {matrix.shape[1]}"
            )
        norms = np.linalg.norm(matrix, axis=1)
        if np.any(norms == 0.0):
            raise MappingError("embedding endpoint returned a zero vector")
        return matrix / norms[:, None]

    def embed(self, title: str) -> np.ndarray:
        if not title.strip():
            raise MappingError("cannot embed an empty title")
        return self.embed_batch([title])[0]


def embed_title(title: str, provider) -> EmbeddingVector:
    """Embed one title through the given provider; unit-normalized."""
    return EmbeddingVector(values=tuple(provider.embed(title).tolist()))


class KnnIndex:
    """Cosine KNN over unit vectors keyed by item id.

    Exact mode scans the full matrix. Approximate mode descends a
    layered small-world neighbor graph with a greedy beam, trading a
    bounded recall loss for sublinear queries.
    """

    def __init__(
        self,
        item_ids: list[str],
        matrix: np.ndarray,
        mode: str = "exact",
        levels: list[int] | None = None,
        neighbors: list[list[list[int]]] | None = None,
        entry_point: int = -1,
    ):
        if mode not in ("exact", "approximate"):
            raise ValueError(f"unknown index mode {mode!r}")
        self.item_ids = item_ids
        self.matrix = matrix
        self.mode = mode
        self.dimension = int(matrix.shape[1]) if matrix.size else 0
        self.levels = levels or []
        self.neighbors = neighbors or []
        self.entry_point = entry_point

    def __len__(self) -> int:
        return len(self.item_ids)

    def vector_for(self, item_id: str) -> np.ndarray:
        return self.matrix[self.item_ids.index(item_id)]


def _search_layer(
    matrix: np.ndarray,
    neighbors: list[list[list[int]]],
    query: np.ndarray,
    entry_points: list[tuple[float, int]],
    beam: int,
    level: int,
    visited: np.ndarray,
) -> list[tuple[float, int]]:
    """Greedy beam search on one layer; returns up to beam (sim, node)
    pairs, best first. visited must be a zeroed bool scratch array."""
    candidates: list[tuple[float, int]] = []  # max-heap via negated sim
    results: list[tuple[float, int]] = []  # min-heap on sim
    for sim, node in entry_points:
        visited[node] = True
        heapq.heappush(candidates, (-sim, node))
        heapq.heappush(results, (sim, node))
    while candidates:
        neg_sim, node = heapq.heappop(candidates)
        if len(results) >= beam and -neg_sim < results[0][0]:
            break
        fresh = [nb for nb in neighbors[node][level] if not visited[nb]]
        if not fresh:
            continue
        for nb in fresh:
            visited[nb] = True
        sims = matrix[fresh] @ query
        floor = results[0][0] if len(results) >= beam else -math.inf
        for nb, sim in zip(fresh, sims.tolist()):
            if len(results) < beam or sim > floor:
                heapq.heappush(candidates, (-sim, nb))
                heapq.heappush(results, (sim, nb))
                if len(results) > beam:
                    heapq.heappop(results)
                floor = results[0][0] if len(results) >= beam else -math.inf
    return sorted(results, key=lambda pair: -pair[0])


def _select_diverse(
    matrix: np.ndarray, cands: list[tuple[float, int]], count: int
) -> list[tuple[float, int]]:
    """Pick up to count candidates, best first, skipping any candidate
    closer to an already-picked neighbor than to the query; skipped ones
    backfill remaining slots. Keeps the neighbor graph navigable."""
    ordered = sorted(cands, key=lambda pair: -pair[0])
    selected: list[tuple[float, int]] = []
    skipped: list[tuple[float, int]] = []
    for sim, node in ordered:
        if len(selected) == count:
            break
        if not selected:
            selected.append((sim, node))
            continue
        chosen_ids = [c for _, c in selected]
        closest = float(np.max(matrix[chosen_ids] @ matrix[node]))
        if sim > closest:
            selected.append((sim, node))
        else:
            skipped.append((sim, node))
    for pair in skipped:
        if len(selected) == count:
            break
        selected.append(pair)
    return selected


def _build_small_world(matrix: np.ndarray) -> tuple[list[int], list[list[list[int]]], int]:
    n = matrix.shape[0]
    rng = random.Random(0x6B6E6E)
    level_scale = 1.0 / math.log(SW_MAX_NEIGHBORS)
    levels: list[int] = []
    neighbors: list[list[list[int]]] = []
    entry_point = -1
    max_level = -1
    visited = np.zeros(n, dtype=bool)
    for i in range(n):
        level = int(-math.log(max(rng.random(), 1e-12)) * level_scale)
        levels.append(level)
        neighbors.append([[] for _ in range(level + 1)])
        if entry_point < 0:
            entry_point = i
            max_level = level
            continue
        query = matrix[i]
        visited[:] = False
        entry_sim = float(matrix[entry_point] @ query)
        best = [(entry_sim, entry_point)]
        # Greedy single-step descent through layers above the new node.
        for layer in range(max_level, level, -1):
            visited[:] = False
            best = _search_layer(
                matrix, neighbors, query, best, 1, layer, visited
            )[:1]
        for layer in range(min(level, max_level), -1, -1):
            visited[:] = False
            found = _search_layer(
                matrix, neighbors, query, best, SW_CONSTRUCTION_BEAM, layer, visited
            )
            cap = SW_MAX_NEIGHBORS if layer > 0 else SW_MAX_NEIGHBORS * 2
            chosen = _select_diverse(matrix, found, SW_MAX_NEIGHBORS)
            neighbors[i][layer] = [node for _, node in chosen]
            for sim, node in chosen:
                links = neighbors[node][layer]
                links.append(i)
                if len(links) > cap:
                    sims = matrix[links] @ matrix[node]
                    ranked = [
                        (float(sims[j]), links[j]) for j in range(len(links))
                    ]
                    kept = _select_diverse(matrix, ranked, cap)
                    neighbors[node][layer] = [nid for _, nid in kept]
            best = found
        if level > max_level:
            max_level = level
            entry_point = i
    return levels, neighbors, entry_point


def build_index(
    catalog: list[CatalogItem], provider, mode: str = "exact"
) -> KnnIndex:
    """Embed every catalog title and assemble the index. Item ids must
    be unique; the catalog must be non-empty."""
    if not catalog:
        raise MappingError("catalog is empty")
    seen: set[str] = set()
    for item in catalog:
        if item.item_id in seen:
            raise MappingError(f"duplicate catalog item_id {item.item_id!r}")
        seen.add(item.item_id)
    titles = [item.title for item in catalog]
    matrix = provider.embed_batch(titles)
    matrix = np.ascontiguousarray(matrix, dtype=np.float64)
    item_ids = [item.item_id for item in catalog]
    if mode == "exact":
        return KnnIndex(item_ids, matrix, mode="exact")
    if mode == "approximate":
        levels, neighbors, entry = _build_small_world(matrix)
        return KnnIndex(
            item_ids,
            matrix,
            mode="approximate",
            levels=levels,
            neighbors=neighbors,
            entry_point=entry,
        )
    raise MappingError(f"unknown index mode {mode!r}")


def query_knn(
    index: KnnIndex, query, k: int
) -> list[tuple[str, float]]:
    """Top-k (item_id, cosine) pairs, descending similarity with ties
    broken by ascending item_id. Returns fewer when the index is small."""
    if k < 1:
        raise ValueError("k must be positive")
    vec = query.as_array() if isinstance(query, EmbeddingVector) else np.asarray(
        query, dtype=np.float64
    )
    if vec.shape != (index.dimension,):
        raise MappingError(
            f"query dimension {vec.shape} does not match index "
            f"dimension {index.dimension}"
        )
    n = len(index.item_ids)
    if index.mode == "exact":
        sims = index.matrix @ vec
        order = sorted(
            range(n), key=lambda i: (-float(sims[i]), index.item_ids[i])
        )
        return [(index.item_ids[i], float(sims[i])) for i in order[:k]]
    visited = np.zeros(n, dtype=bool)
    entry = index.entry_point
    best = [(float(index.matrix[entry] @ vec), entry)]
    for layer in range(len(index.neighbors[entry]) - 1, 0, -1):
        visited[:] = False
        best = _search_layer(
            index.matrix, index.neighbors, vec, best, 1, layer, visited
        )[:1]
    visited[:] = False
    beam = max(SW_QUERY_BEAM, k)
    found = _search_layer(
        index.matrix, index.neighbors, vec, best, beam, 0, visited
    )
    ranked = sorted(found, key=lambda pair: (-pair[0], index.item_ids[pair[1]]))
    return [(index.item_ids[node], float(sim)) for sim, node in ranked[:k]]


def save_index(index: KnnIndex, path: str) -> None:
    """Versioned binary layout: magic, mode, dimension, count, row-major
    float64 vectors, an id table, and the neighbor graph when present."""
    mode_byte = 0 if index.mode == "exact" else 1
    n = len(index.item_ids)
    header = struct.pack(
        "<8sBII", _INDEX_MAGIC, mode_byte, index.dimension, n
    )
    ids_blob = json.dumps(index.item_ids, ensure_ascii=False).encode("utf-8")
    parts = [
        header,
        index.matrix.astype(np.float64).tobytes(order="C"),
        struct.pack("<Q", len(ids_blob)),
        ids_blob,
    ]
    if index.mode == "approximate":
        graph_blob = json.dumps(
            {
                "levels": index.levels,
                "neighbors": index.neighbors,
                "entry_point": index.entry_point,
            }
        ).encode("utf-8")
        parts.append(struct.pack("<Q", len(graph_blob)))
        parts.append(graph_blob)
    atomic_write_bytes(path, b"".join(parts))


def load_index(path: str) -> KnnIndex:
    with open(path, "rb") as handle:
        blob = handle.read()
    head_size = struct.calcsize("<8sBII")
    if len(blob) < head_size:
        raise MappingError(f"{path}: truncated index file")
    magic, mode_byte, dimension, n = struct.unpack("<8sBII", blob[:head_size])
    if magic != _INDEX_MAGIC:
        raise MappingError(f"{path}: not an index file")
    offset = head_size
    matrix_bytes = n * dimension * 8
    matrix = np.frombuffer(
        blob[offset : offset + matrix_bytes], dtype=np.float64
    ).reshape(n, dimension).copy()
    offset += matrix_bytes
    (ids_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    item_ids = json.loads(blob[offset : offset + ids_len].decode("utf-8"))
    offset += ids_len
    if mode_byte == 0:
        return KnnIndex(item_ids, matrix, mode="exact")
    (graph_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    graph = json.loads(blob[offset : offset + graph_len].decode("utf-8"))
    return KnnIndex(
        item_ids,
        matrix,
        mode="approximate",
        levels=graph["levels"],
        neighbors=graph["neighbors"],
        entry_point=graph["entry_point"],
    )


def map_nodes(
    graph: KnowledgeGraph,
    index: KnnIndex,
    provider,
    threshold: float = DEFAULT_MAP_THRESHOLD,
    max_matches: int = DEFAULT_MAX_MATCHES,
) -> list[MappingResult]:
    """Match every product node against the catalog. Matches are the
    top-max_matches hits at or above threshold; a node whose best hit
    falls short is unmapped but still reports that best hit for audit."""
    if threshold < 0.0:
        raise ValueError("threshold must be non-negative")
    if max_matches < 1:
        raise ValueError("max_matches must be positive")
    results: list[MappingResult] = []
    for node in graph.product_nodes.values():
        try:
            vec = provider.embed(node.title)
        except Exception as exc:
            raise MappingError(f"node {node.node_id!r}: {exc}") from exc
        hits = query_knn(index, vec, max_matches)
        qualified = tuple(
            (item_id, sim) for item_id, sim in hits if sim >= threshold
        )
        if qualified:
            results.append(MappingResult(node.node_id, qualified, True))
        else:
            audit = tuple(hits[:1])
            results.append(MappingResult(node.node_id, audit, False))
    return results


def fuse_graph(
    graph: KnowledgeGraph,
    mappings: list[MappingResult],
    catalog: list[CatalogItem],
) -> KnowledgeGraph:
    """Rewrite the graph at catalog-item granularity.

    Each mapped node becomes its matched items; each edge expands over
    the cartesian product of its endpoints' items. Unmapped nodes and
    their incident edges are dropped. Duplicate expanded triples
    collapse keeping the highest score; expansion pairs that would
    collapse a non-self-loop edge onto one item are skipped. Audience
    edges re-attach to the mapped items.
    """
    by_node = {m.node_id: m for m in mappings}
    missing = [nid for nid in graph.product_nodes if nid not in by_node]
    if missing:
        raise MappingError(
            f"mappings do not cover nodes: {', '.join(sorted(missing)[:5])}"
        )
    items = {item.item_id: item for item in catalog}
    node_items: dict[str, list[str]] = {}
    for node_id in graph.product_nodes:
        result = by_node[node_id]
        if not result.mapped:
            node_items[node_id] = []
            continue
        for item_id, _ in result.matches:
            if item_id not in items:
                raise MappingError(
                    f"mapping for {node_id!r} references unknown item {item_id!r}"
                )
        node_items[node_id] = [item_id for item_id, _ in result.matches]

    fused = KnowledgeGraph()
    for node_id, node in graph.product_nodes.items():
        for item_id in node_items[node_id]:
            item = items[item_id]
            fused.add_product(
                ProductNode(
                    node_id=item_id,
                    title=item.title,
                    brand=item.brand,
                    product_type=item.category,
                    audience=list(node.audience),
                    is_seed=node.is_seed,
                )
            )

    chosen: dict[tuple[str, str, str], Edge] = {}
    for edge in graph.edges:
        for subject_item in node_items[edge.subject_id]:
            for object_item in node_items[edge.object_id]:
                if subject_item == object_item and edge.source != "self_loop":
                    continue
                expanded = Edge(
                    subject_id=subject_item,
                    predicate=edge.predicate,
                    object_id=object_item,
                    score=edge.score,
                    rationale_accurate=edge.rationale_accurate,
                    source=edge.source,
                )
                key = expanded.key()
                current = chosen.get(key)
                if current is None:
                    chosen[key] = expanded
                else:
                    current_score = -1 if current.score is None else current.score
                    new_score = -1 if expanded.score is None else expanded.score
                    if new_score > current_score:
                        chosen[key] = expanded
    for edge in chosen.values():
        fused.add_edge(edge)

    for audience_edge in graph.audience_edges:
        for item_id in node_items[audience_edge.product_id]:
            group = graph.group_nodes[audience_edge.group_id]
            fused.add_group(UserGroupNode(group.group_id, group.label))
            fused.add_audience_edge(AudienceEdge(group.group_id, item_id))
    return fused
