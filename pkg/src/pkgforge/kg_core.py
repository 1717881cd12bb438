"""Knowledge graph assembly from model completions.

Nodes are products keyed by a normalized title; predicates are short
free-text rationales kept verbatim. Audience labels hang off products as
user-group nodes with membership edges. Parsing tolerates prose-wrapped
JSON via a repair ladder; merging is idempotent so a corpus of per-seed
subgraphs can be folded in any grouping with one result.
"""

from __future__ import annotations

import csv
import json
import os
import re
from dataclasses import dataclass, field
from urllib.parse import quote, unquote

from .ioutil import atomic_write_text

JSONLINES_FORMAT = "pkg-graph"
JSONLINES_VERSION = 1

EDGE_SOURCES = ("generated", "self_loop", "audience")

SELF_LOOP_PREDICATE = "Same Product"

# Predicates longer than this are flagged for the validator, not dropped.
RATIONALE_WORD_LIMIT = 5


class GraphFormatError(ValueError):
    """Raised for malformed graph files and unknown formats."""


def normalize_node_id(text: str) -> str:
    """Canonical node key: lowercase, punctuation stripped except
    alphanumerics, spaces and hyphens, whitespace collapsed."""
    lowered = text.lower()
    kept = [ch for ch in lowered if ch.isalnum() or ch == "-" or ch.isspace()]
    return " ".join("".join(kept).split())


@dataclass
class ProductNode:
    node_id: str
    title: str
    brand: str = ""
    product_type: str = ""
    audience: list[str] = field(default_factory=list)
    is_seed: bool = False

    def __post_init__(self) -> None:
        if not self.node_id:
            raise ValueError("node_id must be non-empty")
        if not self.title:
            raise ValueError(f"node {self.node_id!r} has an empty title")


@dataclass
class UserGroupNode:
    group_id: str
    label: str

    def __post_init__(self) -> None:
        if not self.group_id:
            raise ValueError("group_id must be non-empty")
        if not self.label:
            raise ValueError(f"group {self.group_id!r} has an empty label")


@dataclass
class Edge:
    """A (subject, predicate, object) triple.

    word_count is always recomputed from the predicate. Identity for
    deduplication lowercases the predicate; storage keeps it verbatim.
    """

    subject_id: str
    predicate: str
    object_id: str
    word_count: int = 0
    score: int | None = None
    rationale_accurate: bool | None = None
    source: str = "generated"

    def __post_init__(self) -> None:
        if not self.subject_id or not self.object_id:
            raise ValueError("edge endpoints must be non-empty")
        if not self.predicate.strip():
            raise ValueError("edge predicate must be non-empty")
        if self.source not in EDGE_SOURCES:
            raise ValueError(f"unknown edge source {self.source!r}")
        if self.subject_id == self.object_id and self.source != "self_loop":
            raise ValueError(
                f"self-referential edge on {self.subject_id!r} must have "
                "source self_loop"
            )
        if self.score is not None and not 1 <= self.score <= 10:
            raise ValueError(f"edge score out of range: {self.score}")
        self.word_count = len(self.predicate.split())

    def key(self) -> tuple[str, str, str]:
        return (self.subject_id, self.predicate.lower(), self.object_id)


@dataclass
class AudienceEdge:
    group_id: str
    product_id: str

    def key(self) -> tuple[str, str]:
        return (self.group_id, self.product_id)


class KnowledgeGraph:
    """Mutable product graph with set semantics on nodes and edges.

    Nodes dedup by id with attribute union; edges dedup by
    (subject, lowercased predicate, object) with first-wins. Every edge
    endpoint must already exist, so the graph is referentially intact at
    all times.
    """

    def __init__(self) -> None:
        self.product_nodes: dict[str, ProductNode] = {}
        self.group_nodes: dict[str, UserGroupNode] = {}
        self.edges: list[Edge] = []
        self.audience_edges: list[AudienceEdge] = []
        self._edge_keys: set[tuple[str, str, str]] = set()
        self._audience_keys: set[tuple[str, str]] = set()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            self.product_nodes == other.product_nodes
            and self.group_nodes == other.group_nodes
            and self.edges == other.edges
            and self.audience_edges == other.audience_edges
        )

    def add_product(self, node: ProductNode) -> ProductNode:
        existing = self.product_nodes.get(node.node_id)
        if existing is None:
            self.product_nodes[node.node_id] = node
            return node
        if not existing.brand:
            existing.brand = node.brand
        if not existing.product_type:
            existing.product_type = node.product_type
        for label in node.audience:
            if label not in existing.audience:
                existing.audience.append(label)
        existing.is_seed = existing.is_seed or node.is_seed
        return existing

    def add_group(self, node: UserGroupNode) -> UserGroupNode:
        return self.group_nodes.setdefault(node.group_id, node)

    def add_edge(self, edge: Edge) -> bool:
        if edge.subject_id not in self.product_nodes:
            raise GraphFormatError(
                f"edge references unknown node {edge.subject_id!r}"
            )
        if edge.object_id not in self.product_nodes:
            raise GraphFormatError(
                f"edge references unknown node {edge.object_id!r}"
            )
        key = edge.key()
        if key in self._edge_keys:
            return False
        self._edge_keys.add(key)
        self.edges.append(edge)
        return True

    def add_audience_edge(self, edge: AudienceEdge) -> bool:
        if edge.group_id not in self.group_nodes:
            raise GraphFormatError(
                f"audience edge references unknown group {edge.group_id!r}"
            )
        if edge.product_id not in self.product_nodes:
            raise GraphFormatError(
                f"audience edge references unknown node {edge.product_id!r}"
            )
        key = edge.key()
        if key in self._audience_keys:
            return False
        self._audience_keys.add(key)
        self.audience_edges.append(edge)
        return True

    def has_edge_key(self, key: tuple[str, str, str]) -> bool:
        return key in self._edge_keys

    def set_edges(self, edges: list[Edge]) -> None:
        """Replace the edge list wholesale, rebuilding dedup keys."""
        self.edges = []
        self._edge_keys = set()
        for edge in edges:
            self.add_edge(edge)

    def drop_product_nodes(self, node_ids: set[str]) -> None:
        """Remove nodes and their audience edges. Callers must have
        removed incident edges first."""
        for edge in self.edges:
            if edge.subject_id in node_ids or edge.object_id in node_ids:
                raise ValueError(
                    f"cannot drop {edge.subject_id!r}/{edge.object_id!r}: "
                    "incident edges remain"
                )
        for node_id in node_ids:
            self.product_nodes.pop(node_id, None)
        kept = [ae for ae in self.audience_edges if ae.product_id not in node_ids]
        self.audience_edges = kept
        self._audience_keys = {ae.key() for ae in kept}

    def seeds(self) -> list[ProductNode]:
        return [n for n in self.product_nodes.values() if n.is_seed]


@dataclass
class ParsedSubgraph:
    """One seed's parsed contribution, ready to merge."""

    products: list[ProductNode]
    groups: list[UserGroupNode]
    edges: list[Edge]
    audience_edges: list[AudienceEdge]
    repair_stage: int = 1  # 1 strict parse, 2 balanced-substring extraction


@dataclass
class ParseFailure:
    """Structured parse failure; the pipeline records these per seed."""

    seed_id: str
    stage: int
    reason: str
    raw_excerpt: str = ""


@dataclass
class GraphStats:
    node_count: int
    edge_count: int
    edge_predicate_distribution: dict[str, int]
    audience_distribution: dict[str, int]


def _scan_balanced(text: str, start: int) -> int | None:
    """Index of the brace closing text[start] honoring JSON strings,
    or None when unbalanced."""
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i
    return None


def extract_balanced_object(text: str) -> str | None:
    """Largest brace-balanced {...} substring, or None."""
    best: str | None = None
    i = 0
    while i < len(text):
        if text[i] == "{":
            end = _scan_balanced(text, i)
            if end is not None:
                span = text[i : end + 1]
                if best is None or len(span) > len(best):
                    best = span
                i = end + 1
                continue
        i += 1
    return best


_PY_TRUE = re.compile(r"(?<=[:\s,\[])True(?=\s*[,}\]])")
_PY_FALSE = re.compile(r"(?<=[:\s,\[])False(?=\s*[,}\]])")
_PY_NONE = re.compile(r"(?<=[:\s,\[])None(?=\s*[,}\]])")


def _pythonify_literals(text: str) -> str:
    text = _PY_TRUE.sub("true", text)
    text = _PY_FALSE.sub("false", text)
    return _PY_NONE.sub("null", text)


def parse_json_lenient(raw: str) -> tuple[object | None, int, str]:
    """Strict parse, then largest balanced-object extraction.

    Returns (value, stage, reason); value is None when both stages fail,
    with stage 2 and the last error as the reason. The extraction stage
    also tolerates Python-style True/False/None literals.
    """
    try:
        return json.loads(raw), 1, ""
    except ValueError:
        pass
    span = extract_balanced_object(raw)
    if span is None:
        return None, 2, "no balanced JSON object found"
    try:
        return json.loads(span), 2, ""
    except ValueError:
        pass
    try:
        return json.loads(_pythonify_literals(span)), 2, ""
    except ValueError as exc:
        return None, 2, f"extracted object is not valid JSON: {exc}"


def _clean_str(value: object) -> str:
    return value.strip() if isinstance(value, str) else ""


def parse_generation_response(
    raw: str, seed: "SeedLike"
) -> ParsedSubgraph | ParseFailure:
    """Turn one completion into a subgraph for the given seed.

    Node entries need a product_title; brand/type/audience are optional.
    Edge endpoints resolve to nodes by normalized title, with bare nodes
    synthesized for unknown endpoints. The seed node is marked is_seed
    and synthesized when the model omitted it. Self-referential edges
    and within-response duplicate triples are dropped.
    """
    payload, stage, reason = parse_json_lenient(raw)
    if payload is None:
        return ParseFailure(seed.id, stage, reason, raw[:200])
    if not isinstance(payload, dict):
        return ParseFailure(
            seed.id, stage, "top-level JSON value is not an object", raw[:200]
        )
    nodes_raw = payload.get("nodes")
    if not isinstance(nodes_raw, list):
        return ParseFailure(seed.id, stage, "missing nodes list", raw[:200])
    edges_raw = payload.get("edges")
    if edges_raw is None:
        edges_raw = []
    if not isinstance(edges_raw, list):
        return ParseFailure(seed.id, stage, "edges is not a list", raw[:200])

    seed_key = normalize_node_id(seed.title)
    products: dict[str, ProductNode] = {}
    order: list[str] = []
    for entry in nodes_raw:
        if not isinstance(entry, dict):
            continue
        title = _clean_str(entry.get("product_title"))
        if not title:
            continue
        node_id = normalize_node_id(title)
        if not node_id:
            continue
        audience_raw = entry.get("audience")
        audience = []
        if isinstance(audience_raw, list):
            audience = [a.strip() for a in audience_raw if _clean_str(a)]
        node = ProductNode(
            node_id=node_id,
            title=title,
            brand=_clean_str(entry.get("brand")),
            product_type=_clean_str(entry.get("type"))
            or _clean_str(entry.get("product_type")),
            audience=audience,
            is_seed=node_id == seed_key,
        )
        if node_id in products:
            _merge_product_into(products[node_id], node)
        else:
            products[node_id] = node
            order.append(node_id)
    if not products:
        return ParseFailure(seed.id, stage, "no usable nodes", raw[:200])
    if seed_key and seed_key not in products:
        products[seed_key] = ProductNode(
            node_id=seed_key, title=seed.title.strip(), is_seed=True
        )
        order.insert(0, seed_key)

    edges: list[Edge] = []
    seen_keys: set[tuple[str, str, str]] = set()
    for entry in edges_raw:
        if not isinstance(entry, dict):
            continue
        subject = _clean_str(entry.get("subject"))
        predicate = _clean_str(entry.get("predicate"))
        obj = _clean_str(entry.get("object"))
        if not subject or not predicate or not obj:
            continue
        sid = normalize_node_id(subject)
        oid = normalize_node_id(obj)
        if not sid or not oid or sid == oid:
            continue
        for endpoint_id, endpoint_title in ((sid, subject), (oid, obj)):
            if endpoint_id not in products:
                products[endpoint_id] = ProductNode(
                    node_id=endpoint_id, title=endpoint_title
                )
                order.append(endpoint_id)
        edge = Edge(subject_id=sid, predicate=predicate, object_id=oid)
        if edge.key() in seen_keys:
            continue
        seen_keys.add(edge.key())
        edges.append(edge)

    groups: dict[str, UserGroupNode] = {}
    audience_edges: list[AudienceEdge] = []
    seen_audience: set[tuple[str, str]] = set()
    for node_id in order:
        for label in products[node_id].audience:
            group_id = normalize_node_id(label)
            if not group_id:
                continue
            if group_id not in groups:
                groups[group_id] = UserGroupNode(group_id=group_id, label=label)
            key = (group_id, node_id)
            if key not in seen_audience:
                seen_audience.add(key)
                audience_edges.append(AudienceEdge(group_id, node_id))

    return ParsedSubgraph(
        products=[products[node_id] for node_id in order],
        groups=list(groups.values()),
        edges=edges,
        audience_edges=audience_edges,
        repair_stage=stage,
    )


def _merge_product_into(target: ProductNode, incoming: ProductNode) -> None:
    if not target.brand:
        target.brand = incoming.brand
    if not target.product_type:
        target.product_type = incoming.product_type
    for label in incoming.audience:
        if label not in target.audience:
            target.audience.append(label)
    target.is_seed = target.is_seed or incoming.is_seed


def merge_subgraph(graph: KnowledgeGraph, subgraph: ParsedSubgraph) -> KnowledgeGraph:
    """Fold one parsed subgraph into the accumulating graph. Mutates and
    returns the graph; merging the same subgraph twice is a no-op."""
    for node in subgraph.products:
        graph.add_product(node)
    for group in subgraph.groups:
        graph.add_group(group)
    for edge in subgraph.edges:
        graph.add_edge(edge)
    for audience_edge in subgraph.audience_edges:
        graph.add_audience_edge(audience_edge)
    return graph


def add_self_loops(
    graph: KnowledgeGraph, predicate: str = SELF_LOOP_PREDICATE
) -> int:
    """Give every product node a self-referential edge; returns how many
    were added. Nodes that already have one are left alone."""
    added = 0
    for node_id in list(graph.product_nodes):
        edge = Edge(
            subject_id=node_id,
            predicate=predicate,
            object_id=node_id,
            source="self_loop",
        )
        if graph.add_edge(edge):
            added += 1
    return added


def compute_stats(graph: KnowledgeGraph) -> GraphStats:
    """Node/edge counts plus deterministic distributions: predicate and
    audience tallies ordered by descending count then lexicographically."""
    predicate_counts: dict[str, int] = {}
    for edge in graph.edges:
        predicate_counts[edge.predicate] = predicate_counts.get(edge.predicate, 0) + 1
    audience_counts: dict[str, int] = {}
    for audience_edge in graph.audience_edges:
        label = graph.group_nodes[audience_edge.group_id].label
        audience_counts[label] = audience_counts.get(label, 0) + 1
    return GraphStats(
        node_count=len(graph.product_nodes),
        edge_count=len(graph.edges),
        edge_predicate_distribution=dict(
            sorted(predicate_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        ),
        audience_distribution=dict(
            sorted(audience_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        ),
    )


def export_jsonlines_str(graph: KnowledgeGraph) -> str:
    """The jsonlines serialization; also the canonical bytes used for
    graph hashing downstream."""
    records: list[dict[str, object]] = [
        {"format": JSONLINES_FORMAT, "version": JSONLINES_VERSION}
    ]
    for node in graph.product_nodes.values():
        records.append(
            {
                "kind": "product",
                "node_id": node.node_id,
                "title": node.title,
                "brand": node.brand,
                "product_type": node.product_type,
                "audience": node.audience,
                "is_seed": node.is_seed,
            }
        )
    for group in graph.group_nodes.values():
        records.append(
            {"kind": "group", "group_id": group.group_id, "label": group.label}
        )
    for edge in graph.edges:
        records.append(
            {
                "kind": "edge",
                "subject": edge.subject_id,
                "predicate": edge.predicate,
                "object": edge.object_id,
                "word_count": edge.word_count,
                "score": edge.score,
                "rationale_accurate": edge.rationale_accurate,
                "source": edge.source,
            }
        )
    for audience_edge in graph.audience_edges:
        records.append(
            {
                "kind": "audience_edge",
                "group": audience_edge.group_id,
                "product": audience_edge.product_id,
            }
        )
    return "\n".join(
        json.dumps(record, ensure_ascii=False, separators=(",", ":"))
        for record in records
    ) + "\n"


def _import_jsonlines(path: str) -> KnowledgeGraph:
    graph = KnowledgeGraph()
    with open(path, encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if not lines:
        raise GraphFormatError(f"{path}: empty graph file")
    try:
        header = json.loads(lines[0])
    except ValueError as exc:
        raise GraphFormatError(f"{path}:1: bad header: {exc}") from exc
    if (
        not isinstance(header, dict)
        or header.get("format") != JSONLINES_FORMAT
        or header.get("version") != JSONLINES_VERSION
    ):
        raise GraphFormatError(f"{path}:1: unrecognized graph header")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            kind = record["kind"]
            if kind == "product":
                graph.add_product(
                    ProductNode(
                        node_id=record["node_id"],
                        title=record["title"],
                        brand=record.get("brand", ""),
                        product_type=record.get("product_type", ""),
                        audience=list(record.get("audience", [])),
                        is_seed=bool(record.get("is_seed", False)),
                    )
                )
            elif kind == "group":
                graph.add_group(
                    UserGroupNode(group_id=record["group_id"], label=record["label"])
                )
            elif kind == "edge":
                graph.add_edge(
                    Edge(
                        subject_id=record["subject"],
                        predicate=record["predicate"],
                        object_id=record["object"],
                        score=record.get("score"),
                        rationale_accurate=record.get("rationale_accurate"),
                        source=record.get("source", "generated"),
                    )
                )
            elif kind == "audience_edge":
                graph.add_audience_edge(
                    AudienceEdge(
                        group_id=record["group"], product_id=record["product"]
                    )
                )
            else:
                raise GraphFormatError(f"unknown record kind {kind!r}")
        except GraphFormatError as exc:
            raise GraphFormatError(f"{path}:{lineno}: {exc}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphFormatError(f"{path}:{lineno}: malformed record: {exc}") from exc
    return graph


_NTRIPLES_LINE = re.compile(r"^<([^<>\s]*)> <([^<>\s]*)> <([^<>\s]*)> \.$")


def export_ntriples_str(graph: KnowledgeGraph) -> str:
    """One percent-encoded triple line per edge. Node attributes are not
    representable in this format; jsonlines is the lossless one."""
    lines = []
    for edge in graph.edges:
        lines.append(
            f"<{quote(edge.subject_id, safe='')}> "
            f"<{quote(edge.predicate, safe='')}> "
            f"<{quote(edge.object_id, safe='')}> ."
        )
    return "\n".join(lines) + ("\n" if lines else "")


def _import_ntriples(path: str) -> KnowledgeGraph:
    graph = KnowledgeGraph()
    with open(path, encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        match = _NTRIPLES_LINE.match(line)
        if not match:
            raise GraphFormatError(f"{path}:{lineno}: malformed triple line")
        subject = unquote(match.group(1))
        predicate = unquote(match.group(2))
        obj = unquote(match.group(3))
        for node_id in (subject, obj):
            if node_id not in graph.product_nodes:
                graph.add_product(ProductNode(node_id=node_id, title=node_id))
        source = "self_loop" if subject == obj else "generated"
        graph.add_edge(
            Edge(subject_id=subject, predicate=predicate, object_id=obj, source=source)
        )
    return graph


def _export_viz_csv(graph: KnowledgeGraph, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    nodes_path = os.path.join(path, "nodes.csv")
    edges_path = os.path.join(path, "edges.csv")
    with open(nodes_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", "title", "brand", "type", "is_seed"])
        for node in graph.product_nodes.values():
            writer.writerow(
                [node.node_id, node.title, node.brand, node.product_type, node.is_seed]
            )
    with open(edges_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["subject", "predicate", "object", "score", "source"])
        for edge in graph.edges:
            writer.writerow(
                [
                    edge.subject_id,
                    edge.predicate,
                    edge.object_id,
                    "" if edge.score is None else edge.score,
                    edge.source,
                ]
            )


GRAPH_FORMATS = ("jsonlines", "ntriples", "viz_csv")


def export_graph(graph: KnowledgeGraph, fmt: str, path: str) -> None:
    """Write the graph atomically in the named format. viz_csv treats
    path as a directory and emits nodes.csv and edges.csv."""
    if fmt == "jsonlines":
        atomic_write_text(path, export_jsonlines_str(graph))
    elif fmt == "ntriples":
        atomic_write_text(path, export_ntriples_str(graph))
    elif fmt == "viz_csv":
        _export_viz_csv(graph, path)
    else:
        raise GraphFormatError(f"unknown graph format {fmt!r}")


def import_graph(path: str, fmt: str) -> KnowledgeGraph:
    if fmt == "jsonlines":
        return _import_jsonlines(path)
    if fmt == "ntriples":
        return _import_ntriples(path)
    if fmt == "viz_csv":
        raise GraphFormatError("viz_csv is an export-only format")
    raise GraphFormatError(f"unknown graph format {fmt!r}")


class SeedLike:
    """Anything with id and title attributes; see prompt_engine.SeedProduct."""

    id: str
    title: str
