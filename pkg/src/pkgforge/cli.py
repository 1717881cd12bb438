"""Pipeline driver: generate, validate, map, compile, serve, stats, export.

Each command reads and writes files, so any stage can be re-run or
inspected in isolation. All outputs are written atomically; a killed run
never leaves a truncated artifact for the next stage to trip over.

Exit codes: 0 success, 1 fatal config/IO error, 2 completed with
partial failures recorded (failed seeds, unjudged edges, unmapped
nodes).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NoReturn

from . import kg_core, prompt_engine, serving, validator
from .ioutil import atomic_write_text
from .llm_gateway import BackendConfig, GatewayError, LlmGateway, LlmRequest
from .product_mapper import (
    DEFAULT_DIMENSION,
    DEFAULT_MAP_THRESHOLD,
    DEFAULT_MAX_MATCHES,
    CatalogItem,
    HashingEmbedder,
    MappingError,
    RemoteEmbedder,
    build_index,
    fuse_graph,
    map_nodes,
)

GENERATION_TEMPERATURE = 0.2

# Default artifact names inside the configured output directory. Stage
# inputs default to the previous stage's output.
ARTIFACTS = {
    "initial": "initial_graph.jsonl",
    "failures": "generation_failures.jsonl",
    "validated": "validated_graph.jsonl",
    "reports": "validation_reports.jsonl",
    "fused": "fused_graph.jsonl",
    "unmapped": "unmapped.jsonl",
    "cache": "cache.bin",
    "cache_debug": "cache_debug.jsonl",
}


class ConfigError(ValueError):
    """Fatal configuration problem; maps to exit code 1."""


@dataclass
class PipelineConfig:
    seeds_path: str = ""
    catalog_path: str = ""
    template_path: str = ""
    output_dir: str = "out"
    gateway: BackendConfig | None = None
    k_per_seed: int = 5
    prune_threshold: int = validator.DEFAULT_PRUNE_THRESHOLD
    refine_targets: validator.RefineTargets = field(
        default_factory=validator.RefineTargets
    )
    max_iterations: int = 3
    map_threshold: float = DEFAULT_MAP_THRESHOLD
    max_matches: int = DEFAULT_MAX_MATCHES
    embedder: str = "hashing"
    embedding_dimension: int = DEFAULT_DIMENSION
    embedding_endpoint: str = ""
    index_mode: str = "exact"
    bind_address: str = "127.0.0.1:8080"
    serve_k: int = serving.DEFAULT_K
    self_loops: bool = True

    def artifact(self, name: str) -> str:
        return os.path.join(self.output_dir, ARTIFACTS[name])

    def backend(self) -> BackendConfig:
        if self.gateway is None:
            raise ConfigError("this command needs a gateway section in the config")
        return self.gateway

    @property
    def gateway_mode(self) -> str:
        # Builds are deterministic unless the pipeline is explicitly live.
        return self.gateway.mode if self.gateway is not None else "replay"


def load_config(path: str) -> PipelineConfig:
    """Parse the single JSON config document. Unknown keys are rejected
    so typos fail loudly instead of silently using a default."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")

    known = {
        "seeds_path",
        "catalog_path",
        "template_path",
        "output_dir",
        "gateway",
        "k_per_seed",
        "prune_threshold",
        "refine",
        "mapping",
        "serve",
        "self_loops",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")

    config = PipelineConfig()
    config.seeds_path = str(raw.get("seeds_path", ""))
    config.catalog_path = str(raw.get("catalog_path", ""))
    config.template_path = str(raw.get("template_path", ""))
    config.output_dir = str(raw.get("output_dir", "out"))
    config.k_per_seed = int(raw.get("k_per_seed", 5))
    config.prune_threshold = int(
        raw.get("prune_threshold", validator.DEFAULT_PRUNE_THRESHOLD)
    )
    config.self_loops = bool(raw.get("self_loops", True))
    try:
        gateway_raw = raw.get("gateway", {})
        if not isinstance(gateway_raw, dict):
            raise ValueError("gateway must be an object")
        if gateway_raw:
            config.gateway = BackendConfig(**gateway_raw)

        refine_raw = raw.get("refine", {})
        if not isinstance(refine_raw, dict):
            raise ValueError("refine must be an object")
        config.refine_targets = validator.RefineTargets(
            min_avg_score=float(refine_raw.get("min_avg_score", 8.0)),
            max_imprecise_rate=float(refine_raw.get("max_imprecise_rate", 0.10)),
        )
        config.max_iterations = int(refine_raw.get("max_iterations", 3))

        mapping_raw = raw.get("mapping", {})
        if not isinstance(mapping_raw, dict):
            raise ValueError("mapping must be an object")
        config.map_threshold = float(
            mapping_raw.get("threshold", DEFAULT_MAP_THRESHOLD)
        )
        config.max_matches = int(
            mapping_raw.get("max_matches", DEFAULT_MAX_MATCHES)
        )
        config.embedder = str(mapping_raw.get("embedder", "hashing"))
        config.embedding_dimension = int(
            mapping_raw.get("dimension", DEFAULT_DIMENSION)
        )
        config.embedding_endpoint = str(mapping_raw.get("endpoint_url", ""))
        config.index_mode = str(mapping_raw.get("index_mode", "exact"))

        serve_raw = raw.get("serve", {})
        if not isinstance(serve_raw, dict):
            raise ValueError("serve must be an object")
        config.bind_address = str(
            serve_raw.get("bind_address", "127.0.0.1:8080")
        )
        config.serve_k = int(serve_raw.get("default_k", serving.DEFAULT_K))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config {path}: {exc}") from exc

    if config.k_per_seed < 1:
        raise ConfigError("k_per_seed must be positive")
    if config.embedder not in ("hashing", "remote"):
        raise ConfigError(f"unknown embedder {config.embedder!r}")
    if config.embedder == "remote" and not config.embedding_endpoint:
        raise ConfigError("remote embedder requires mapping.endpoint_url")
    if config.index_mode not in ("exact", "approximate"):
        raise ConfigError(f"unknown index_mode {config.index_mode!r}")
    return config


def _load_seeds(path: str) -> list[prompt_engine.SeedProduct]:
    if not path:
        raise ConfigError("seeds_path is not set")
    seeds: list[prompt_engine.SeedProduct] = []
    seen: set[str] = set()
    try:
        with open(path, "r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                    seed = prompt_engine.SeedProduct(
                        id=str(record["id"]), title=str(record["title"])
                    )
                except (ValueError, KeyError, TypeError) as exc:
                    raise ConfigError(f"{path}:{lineno}: bad seed: {exc}") from exc
                if seed.id in seen:
                    raise ConfigError(f"{path}:{lineno}: duplicate seed id {seed.id!r}")
                seen.add(seed.id)
                seeds.append(seed)
    except OSError as exc:
        raise ConfigError(f"cannot read seeds {path}: {exc}") from exc
    return seeds


def _load_catalog(path: str) -> list[CatalogItem]:
    if not path:
        raise ConfigError("catalog_path is not set")
    items: list[CatalogItem] = []
    try:
        with open(path, "r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                    items.append(
                        CatalogItem(
                            item_id=str(record["item_id"]),
                            title=str(record["title"]),
                            brand=str(record.get("brand", "")),
                            category=str(record.get("category", "")),
                        )
                    )
                except (ValueError, KeyError, TypeError) as exc:
                    raise ConfigError(
                        f"{path}:{lineno}: bad catalog item: {exc}"
                    ) from exc
    except OSError as exc:
        raise ConfigError(f"cannot read catalog {path}: {exc}") from exc
    return items


def _load_template(config: PipelineConfig) -> prompt_engine.PromptTemplate:
    if not config.template_path:
        return prompt_engine.DEFAULT_GENERATION_TEMPLATE
    try:
        return prompt_engine.load_template(config.template_path)
    except (OSError, prompt_engine.TemplateError) as exc:
        raise ConfigError(f"cannot load template: {exc}") from exc


def _provider(config: PipelineConfig):
    if config.embedder == "hashing":
        return HashingEmbedder(dimension=config.embedding_dimension)
    return RemoteEmbedder(
        endpoint_url=config.embedding_endpoint,
        dimension=config.embedding_dimension,
    )


def _write_jsonl(path: str, records: list[dict[str, object]]) -> None:
    text = "".join(
        json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n"
        for record in records
    )
    atomic_write_text(path, text)


def _summary(command: str, status: str, **fields: object) -> None:
    parts = [command, status]
    parts.extend(f"{key}={value}" for key, value in fields.items())
    print(" ".join(parts))


def _generate_one(
    gateway: LlmGateway,
    template: prompt_engine.PromptTemplate,
    seed: prompt_engine.SeedProduct,
    k: int,
) -> tuple[kg_core.ParsedSubgraph | kg_core.ParseFailure, bool]:
    """Render, complete, parse. A parse failure earns one re-ask with
    the format indicator appended to steer the model back to JSON; the
    returned flag says whether the re-ask ran."""
    prompt = prompt_engine.render_generation_prompt(template, seed, k)
    try:
        response = gateway.complete(
            LlmRequest(prompt=prompt.text, temperature=GENERATION_TEMPERATURE)
        )
    except GatewayError as exc:
        return kg_core.ParseFailure(seed.id, 0, f"gateway: {exc}"), False
    parsed = kg_core.parse_generation_response(response.text, seed)
    if not isinstance(parsed, kg_core.ParseFailure):
        return parsed, False

    reask_text = prompt.text + "\n\n" + template.format_indicator
    try:
        response = gateway.complete(
            LlmRequest(prompt=reask_text, temperature=GENERATION_TEMPERATURE)
        )
    except GatewayError as exc:
        return kg_core.ParseFailure(seed.id, 3, f"re-ask gateway: {exc}"), True
    parsed = kg_core.parse_generation_response(response.text, seed)
    if isinstance(parsed, kg_core.ParseFailure):
        return (
            kg_core.ParseFailure(seed.id, 3, parsed.reason, parsed.raw_excerpt),
            True,
        )
    return parsed, True


def cmd_generate(config: PipelineConfig, out_path: str | None) -> int:
    template = _load_template(config)
    violations = prompt_engine.validate_template(template)
    if violations:
        detail = "; ".join(f"{v.component}: {v.message}" for v in violations)
        raise ConfigError(f"invalid template: {detail}")
    seeds = _load_seeds(config.seeds_path)
    backend = config.backend()
    gateway = LlmGateway(backend)
    out = out_path or config.artifact("initial")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)

    workers = min(backend.max_in_flight, max(len(seeds), 1))
    if seeds:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(
                pool.map(
                    lambda seed: _generate_one(
                        gateway, template, seed, config.k_per_seed
                    ),
                    seeds,
                )
            )
    else:
        outcomes = []

    graph = kg_core.KnowledgeGraph()
    failures: list[dict[str, object]] = []
    reasks = 0
    for seed, (parsed, reasked) in zip(seeds, outcomes):
        reasks += int(reasked)
        if isinstance(parsed, kg_core.ParseFailure):
            failures.append(
                {
                    "seed_id": parsed.seed_id,
                    "stage": parsed.stage,
                    "reason": parsed.reason,
                    "raw_excerpt": parsed.raw_excerpt,
                }
            )
            continue
        kg_core.merge_subgraph(graph, parsed)

    kg_core.export_graph(graph, "jsonlines", out)
    _write_jsonl(config.artifact("failures"), failures)
    stats = kg_core.compute_stats(graph)
    _summary(
        "generate",
        "ok" if not failures else "partial",
        seeds=len(seeds),
        parsed=len(seeds) - len(failures),
        failed=len(failures),
        reasks=reasks,
        nodes=stats.node_count,
        edges=stats.edge_count,
        out=out,
    )
    return 2 if failures else 0


def cmd_validate(
    config: PipelineConfig, in_path: str | None, out_path: str | None
) -> int:
    source = in_path or config.artifact("initial")
    out = out_path or config.artifact("validated")
    graph = kg_core.import_graph(source, "jsonlines")
    gateway = LlmGateway(config.backend())
    graph, reports = validator.refine_loop(
        graph,
        gateway,
        threshold=config.prune_threshold,
        max_iterations=config.max_iterations,
        targets=config.refine_targets,
    )
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    kg_core.export_graph(graph, "jsonlines", out)
    report_records = []
    for report in reports:
        record = report.to_dict()
        record["meets_targets"] = validator.meets_targets(
            report, config.refine_targets
        )
        report_records.append(record)
    _write_jsonl(config.artifact("reports"), report_records)

    unjudged = sum(
        1 for edge in graph.edges if edge.source == "generated" and edge.score is None
    )
    last = reports[-1]
    _summary(
        "validate",
        "ok" if unjudged == 0 else "partial",
        iterations=len(reports),
        judged=last.judged_edge_count,
        unjudged=unjudged,
        avg_score="-" if last.average_edge_score is None
        else f"{last.average_edge_score:.4f}",
        imprecise_rate=f"{last.relation_imprecise_rate:.4f}",
        edges=len(graph.edges),
        out=out,
    )
    return 2 if unjudged else 0


def cmd_map(
    config: PipelineConfig, in_path: str | None, out_path: str | None
) -> int:
    source = in_path or config.artifact("validated")
    out = out_path or config.artifact("fused")
    graph = kg_core.import_graph(source, "jsonlines")
    catalog = _load_catalog(config.catalog_path)
    if not catalog:
        raise ConfigError(f"catalog {config.catalog_path} is empty")
    provider = _provider(config)
    index = build_index(catalog, provider, mode=config.index_mode)
    mappings = map_nodes(
        graph,
        index,
        provider,
        threshold=config.map_threshold,
        max_matches=config.max_matches,
    )
    fused = fuse_graph(graph, mappings, catalog)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    kg_core.export_graph(fused, "jsonlines", out)

    unmapped_records = []
    for result in mappings:
        if result.mapped:
            continue
        best = result.matches[0] if result.matches else None
        unmapped_records.append(
            {
                "node_id": result.node_id,
                "best_item": best[0] if best else None,
                "best_similarity": round(best[1], 6) if best else None,
            }
        )
    _write_jsonl(config.artifact("unmapped"), unmapped_records)

    fused_stats = kg_core.compute_stats(fused)
    _summary(
        "map",
        "ok" if not unmapped_records else "partial",
        nodes=len(graph.product_nodes),
        mapped=len(graph.product_nodes) - len(unmapped_records),
        unmapped=len(unmapped_records),
        fused_nodes=fused_stats.node_count,
        fused_edges=fused_stats.edge_count,
        out=out,
    )
    return 2 if unmapped_records else 0


def cmd_compile(
    config: PipelineConfig, in_path: str | None, out_path: str | None
) -> int:
    source = in_path or config.artifact("fused")
    out = out_path or config.artifact("cache")
    graph = kg_core.import_graph(source, "jsonlines")
    if config.self_loops:
        kg_core.add_self_loops(graph)
    # Replay chains must be byte-identical run to run, so the build
    # timestamp is pinned; live builds take SOURCE_DATE_EPOCH or now.
    timestamp = 0 if config.gateway_mode == "replay" else None
    cache = serving.compile_cache(graph, build_timestamp=timestamp)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    serving.save_cache(cache, out)
    serving.export_cache_debug(cache, config.artifact("cache_debug"))
    _summary(
        "compile",
        "ok",
        entries=cache.metadata.entry_count,
        items=len(cache.item_entries),
        groups=len(cache.group_entries),
        content_hash=cache.metadata.content_hash[:16],
        out=out,
    )
    return 0


def _last_report(config: PipelineConfig) -> dict[str, object] | None:
    path = config.artifact("reports")
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = [line for line in handle.read().splitlines() if line.strip()]
    except OSError:
        return None
    if not lines:
        return None
    try:
        record = json.loads(lines[-1])
    except ValueError:
        return None
    return record if isinstance(record, dict) else None


def cmd_serve(config: PipelineConfig, in_path: str | None) -> int:
    source = in_path or config.artifact("cache")
    cache = serving.load_cache(source)
    service = serving.serve_http(
        cache,
        bind_address=config.bind_address,
        default_k=config.serve_k,
        validation_report=_last_report(config),
    )
    _summary(
        "serve",
        "ok",
        address=service.address,
        entries=cache.entry_count(),
        build=cache.metadata.content_hash[:16],
    )
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        return 0
    finally:
        service.stop()


def _graph_row(label: str, graph: kg_core.KnowledgeGraph) -> dict[str, object]:
    stats = kg_core.compute_stats(graph)
    scores = [edge.score for edge in graph.edges if edge.score is not None]
    judged = [
        edge for edge in graph.edges if edge.rationale_accurate is not None
    ]
    inaccurate = sum(1 for edge in judged if edge.rationale_accurate is False)
    return {
        "graph": label,
        "nodes": stats.node_count,
        "edges": stats.edge_count,
        "avg_edge_score": (
            f"{sum(scores) / len(scores):.4f}" if scores else "-"
        ),
        "relation_imprecise_rate": (
            f"{inaccurate / len(judged):.4f}" if judged else "-"
        ),
    }


_CACHE_SNIFF = b"PKGCACHE"


def cmd_stats(config: PipelineConfig, in_path: str | None) -> int:
    """Print a per-graph metrics table (nodes, edges, avg edge score,
    relation imprecise rate), one row per pipeline stage present, so the
    before/after-mapping comparison is visible at a glance."""
    rows: list[dict[str, object]] = []
    if in_path:
        with open(in_path, "rb") as handle:
            sniff = handle.read(len(_CACHE_SNIFF))
        if sniff == _CACHE_SNIFF:
            cache = serving.load_cache(in_path)
            print(json.dumps({"kind": "cache", **cache.metadata.to_dict()}))
            _summary("stats", "ok", rows=1)
            return 0
        rows.append(_graph_row(in_path, kg_core.import_graph(in_path, "jsonlines")))
    else:
        stages = [
            ("initial", "initial"),
            ("validated", "validated"),
            ("enterprise", "fused"),
        ]
        for label, artifact in stages:
            path = config.artifact(artifact)
            if os.path.exists(path):
                rows.append(
                    _graph_row(label, kg_core.import_graph(path, "jsonlines"))
                )
        if not rows:
            raise ConfigError(
                f"no graph artifacts found under {config.output_dir}"
            )

    columns = [
        "graph",
        "nodes",
        "edges",
        "avg_edge_score",
        "relation_imprecise_rate",
    ]
    widths = {
        column: max(len(column), *(len(str(row[column])) for row in rows))
        for column in columns
    }
    print("  ".join(column.ljust(widths[column]) for column in columns).rstrip())
    for row in rows:
        print(
            "  ".join(
                str(row[column]).ljust(widths[column]) for column in columns
            ).rstrip()
        )
    _summary("stats", "ok", rows=len(rows))
    return 0


def cmd_export(
    config: PipelineConfig,
    in_path: str | None,
    out_path: str | None,
    fmt: str,
) -> int:
    if fmt not in kg_core.GRAPH_FORMATS:
        raise ConfigError(
            f"unknown format {fmt!r}; expected one of {', '.join(kg_core.GRAPH_FORMATS)}"
        )
    source = in_path
    if source is None:
        for artifact in ("fused", "validated", "initial"):
            candidate = config.artifact(artifact)
            if os.path.exists(candidate):
                source = candidate
                break
    if source is None:
        raise ConfigError("no graph artifact to export; pass --in")
    extensions = {"jsonlines": "jsonl", "ntriples": "nt", "viz_csv": "viz"}
    out = out_path or os.path.join(
        config.output_dir, f"export.{extensions[fmt]}"
    )
    graph = kg_core.import_graph(source, "jsonlines")
    if fmt == "viz_csv":
        os.makedirs(out, exist_ok=True)
    else:
        os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    kg_core.export_graph(graph, fmt, out)
    stats = kg_core.compute_stats(graph)
    _summary(
        "export",
        "ok",
        format=fmt,
        nodes=stats.node_count,
        edges=stats.edge_count,
        out=out,
    )
    return 0


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; bad invocations are fatal
    # config problems here, exit code 1.
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="pkgforge",
        description=(
            "Build and serve a product knowledge graph: generate with an "
            "LLM, judge and prune, map onto the catalog, compile a serving "
            "cache, and answer recommendation lookups."
        ),
    )
    parser.add_argument(
        "command",
        choices=[
            "generate",
            "validate",
            "map",
            "compile",
            "serve",
            "stats",
            "export",
        ],
    )
    parser.add_argument("--config", required=True, help="pipeline config JSON")
    parser.add_argument("--in", dest="in_path", help="input artifact path")
    parser.add_argument("--out", dest="out_path", help="output artifact path")
    parser.add_argument(
        "--format",
        dest="fmt",
        default="jsonlines",
        help="export format: jsonlines, ntriples, viz_csv",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        os.makedirs(config.output_dir, exist_ok=True)
        if args.command == "generate":
            return cmd_generate(config, args.out_path)
        if args.command == "validate":
            return cmd_validate(config, args.in_path, args.out_path)
        if args.command == "map":
            return cmd_map(config, args.in_path, args.out_path)
        if args.command == "compile":
            return cmd_compile(config, args.in_path, args.out_path)
        if args.command == "serve":
            return cmd_serve(config, args.in_path)
        if args.command == "stats":
            return cmd_stats(config, args.in_path)
        return cmd_export(config, args.in_path, args.out_path, args.fmt)
    except (
        ConfigError,
        OSError,
        kg_core.GraphFormatError,
        serving.CacheFormatError,
        MappingError,
        ValueError,
    ) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
