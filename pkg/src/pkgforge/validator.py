"""LLM-as-judge validation and iterative graph refinement.

Every generated edge is judged for acceptability (1-10) and rationale
accuracy; inaccurate rationales carry a suggested replacement. Metrics
follow from the judgments: average edge score and relation imprecise
rate (denominator: judged edges). Refinement repeats judge, report,
fix, prune until quality targets hold or the iteration budget runs out.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

from . import prompt_engine
from .kg_core import Edge, KnowledgeGraph, parse_json_lenient
from .llm_gateway import GatewayError, LlmGateway, LlmRequest

DEFAULT_PRUNE_THRESHOLD = 6
VALIDATION_TEMPERATURE = 0.0

# How the imprecise-rate denominator was chosen; recorded in every report.
RATE_DENOMINATOR = "judged_edges"


@dataclass(frozen=True)
class EdgeJudgment:
    """One judged edge. edge_key matches Edge.key(), i.e. the predicate
    component is lowercased."""

    edge_key: tuple[str, str, str]
    acceptability_score: int
    rationale_accurate: bool
    alternative_rationale: str | None = None

    def __post_init__(self) -> None:
        if not 1 <= self.acceptability_score <= 10:
            raise ValueError(f"score out of range: {self.acceptability_score}")
        if self.rationale_accurate and self.alternative_rationale is not None:
            raise ValueError("accurate judgments carry no alternative")
        if not self.rationale_accurate and not self.alternative_rationale:
            raise ValueError("inaccurate judgments require an alternative")


@dataclass(frozen=True)
class ValidationReport:
    average_edge_score: float | None
    relation_imprecise_rate: float
    judged_edge_count: int
    pruned_edge_count: int = 0
    pruned_node_count: int = 0
    iteration_index: int = 0

    def to_dict(self) -> dict[str, object]:
        return {
            "iteration_index": self.iteration_index,
            "average_edge_score": self.average_edge_score,
            "relation_imprecise_rate": self.relation_imprecise_rate,
            "rate_denominator": RATE_DENOMINATOR,
            "judged_edge_count": self.judged_edge_count,
            "pruned_edge_count": self.pruned_edge_count,
            "pruned_node_count": self.pruned_node_count,
        }

    @classmethod
    def from_dict(cls, record: dict[str, object]) -> "ValidationReport":
        return cls(
            average_edge_score=record.get("average_edge_score"),  # type: ignore[arg-type]
            relation_imprecise_rate=float(record["relation_imprecise_rate"]),  # type: ignore[arg-type]
            judged_edge_count=int(record["judged_edge_count"]),  # type: ignore[arg-type]
            pruned_edge_count=int(record.get("pruned_edge_count", 0)),  # type: ignore[arg-type]
            pruned_node_count=int(record.get("pruned_node_count", 0)),  # type: ignore[arg-type]
            iteration_index=int(record.get("iteration_index", 0)),  # type: ignore[arg-type]
        )


@dataclass(frozen=True)
class PruneSummary:
    removed_edge_count: int
    removed_node_count: int
    unjudged_edge_count: int


@dataclass(frozen=True)
class RefineTargets:
    min_avg_score: float = 8.0
    max_imprecise_rate: float = 0.10


def parse_judgment_response(
    raw: str, expected_title: str
) -> tuple[int, bool, str | None] | None:
    """Extract (score, accurate, alternative) from a judge completion.

    The expected shape keys the recommended title to an object holding
    acceptability_score and a reason block. Falls back to the first
    entry when the echoed title differs. Returns None when the response
    does not yield a coherent judgment.
    """
    payload, _, _ = parse_json_lenient(raw)
    if not isinstance(payload, dict) or not payload:
        return None
    entry = payload.get(expected_title)
    if not isinstance(entry, dict):
        entry = next(
            (value for value in payload.values() if isinstance(value, dict)), None
        )
    if entry is None:
        return None
    score = entry.get("acceptability_score")
    if isinstance(score, bool) or not isinstance(score, (int, float)):
        return None
    if isinstance(score, float):
        if not score.is_integer():
            return None
        score = int(score)
    if not 1 <= score <= 10:
        return None
    reason = entry.get("reason")
    if not isinstance(reason, dict):
        return None
    accurate = reason.get("accurate")
    if not isinstance(accurate, bool):
        return None
    alternative = reason.get("alternative")
    if accurate:
        alternative = None
    else:
        if not isinstance(alternative, str) or not alternative.strip():
            return None
        alternative = alternative.strip()
    return int(score), accurate, alternative


def _judge_one(
    graph: KnowledgeGraph, edge: Edge, gateway: LlmGateway
) -> EdgeJudgment | None:
    subject_title = graph.product_nodes[edge.subject_id].title
    object_title = graph.product_nodes[edge.object_id].title
    prompt = prompt_engine.render_validation_prompt(
        subject_title, object_title, edge.predicate
    )
    request = LlmRequest(prompt=prompt.text, temperature=VALIDATION_TEMPERATURE)
    # Unparseable or failed judgments get one retry, then count as missing.
    for _ in range(2):
        try:
            response = gateway.complete(request)
        except GatewayError:
            continue
        parsed = parse_judgment_response(response.text, object_title)
        if parsed is not None:
            score, accurate, alternative = parsed
            return EdgeJudgment(
                edge_key=edge.key(),
                acceptability_score=score,
                rationale_accurate=accurate,
                alternative_rationale=alternative,
            )
    return None


def judge_edges(graph: KnowledgeGraph, gateway: LlmGateway) -> list[EdgeJudgment]:
    """Judge every generated edge; self-loop and audience edges carry no
    LLM rationale and are exempt. Failures never abort the batch; edges
    whose judgment is missing are simply absent from the result."""
    targets = [edge for edge in graph.edges if edge.source == "generated"]
    if not targets:
        return []
    workers = min(gateway.config.max_in_flight, len(targets))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(lambda edge: _judge_one(graph, edge, gateway), targets)
            )
    else:
        results = [_judge_one(graph, edge, gateway) for edge in targets]
    return [judgment for judgment in results if judgment is not None]


def compute_report(
    judgments: list[EdgeJudgment], iteration_index: int = 0
) -> ValidationReport:
    """Average edge score and relation imprecise rate over the judged
    set. Zero judgments report an absent average and a zero rate."""
    judged = len(judgments)
    if judged == 0:
        return ValidationReport(
            average_edge_score=None,
            relation_imprecise_rate=0.0,
            judged_edge_count=0,
            iteration_index=iteration_index,
        )
    total = sum(j.acceptability_score for j in judgments)
    inaccurate = sum(1 for j in judgments if not j.rationale_accurate)
    return ValidationReport(
        average_edge_score=total / judged,
        relation_imprecise_rate=inaccurate / judged,
        judged_edge_count=judged,
        iteration_index=iteration_index,
    )


def attach_judgments(graph: KnowledgeGraph, judgments: list[EdgeJudgment]) -> int:
    """Copy judgment outcomes onto matching edges; returns match count."""
    by_key = {j.edge_key: j for j in judgments}
    matched = 0
    for edge in graph.edges:
        judgment = by_key.get(edge.key())
        if judgment is None:
            continue
        edge.score = judgment.acceptability_score
        edge.rationale_accurate = judgment.rationale_accurate
        matched += 1
    return matched


def apply_pruning(
    graph: KnowledgeGraph,
    judgments: list[EdgeJudgment],
    threshold: int = DEFAULT_PRUNE_THRESHOLD,
) -> tuple[KnowledgeGraph, PruneSummary]:
    """Remove generated edges scoring strictly below threshold, then
    garbage-collect non-seed nodes left without any generated or
    self-loop edge (their audience edges go too). Unjudged edges survive
    and are tallied separately."""
    if not 1 <= threshold <= 10:
        raise ValueError(f"threshold out of range: {threshold}")
    attach_judgments(graph, judgments)
    kept: list[Edge] = []
    removed_edges = 0
    unjudged = 0
    for edge in graph.edges:
        if edge.source != "generated":
            kept.append(edge)
            continue
        if edge.score is None:
            unjudged += 1
            kept.append(edge)
            continue
        if edge.score < threshold:
            removed_edges += 1
        else:
            kept.append(edge)
    graph.set_edges(kept)
    anchored: set[str] = set()
    for edge in graph.edges:
        if edge.source in ("generated", "self_loop"):
            anchored.add(edge.subject_id)
            anchored.add(edge.object_id)
    doomed = {
        node_id
        for node_id, node in graph.product_nodes.items()
        if not node.is_seed and node_id not in anchored
    }
    if doomed:
        graph.set_edges([e for e in graph.edges if e.subject_id not in doomed and e.object_id not in doomed])
        graph.drop_product_nodes(doomed)
    return graph, PruneSummary(removed_edges, len(doomed), unjudged)


def apply_rationale_fixes(
    graph: KnowledgeGraph, judgments: list[EdgeJudgment]
) -> KnowledgeGraph:
    """Rewrite predicates the judge called inaccurate to the suggested
    alternative; rewritten triples that collide collapse to one edge."""
    by_key = {j.edge_key: j for j in judgments}
    rewritten: list[Edge] = []
    seen: set[tuple[str, str, str]] = set()
    for edge in graph.edges:
        judgment = by_key.get(edge.key())
        if (
            edge.source == "generated"
            and judgment is not None
            and not judgment.rationale_accurate
            and judgment.alternative_rationale
        ):
            edge.predicate = judgment.alternative_rationale
            edge.word_count = len(edge.predicate.split())
        key = edge.key()
        if key in seen:
            continue
        seen.add(key)
        rewritten.append(edge)
    graph.set_edges(rewritten)
    return graph


def meets_targets(report: ValidationReport, targets: RefineTargets) -> bool:
    """Targets hold when both metrics clear their bounds; a report with
    nothing judged leaves no room for improvement and also stops."""
    if report.judged_edge_count == 0:
        return True
    assert report.average_edge_score is not None
    return (
        report.average_edge_score >= targets.min_avg_score
        and report.relation_imprecise_rate <= targets.max_imprecise_rate
    )


def refine_loop(
    graph: KnowledgeGraph,
    gateway: LlmGateway,
    threshold: int = DEFAULT_PRUNE_THRESHOLD,
    max_iterations: int = 3,
    targets: RefineTargets | None = None,
) -> tuple[KnowledgeGraph, list[ValidationReport]]:
    """Iterate judge, report, fix, prune until the report meets both
    targets or max_iterations is reached. Returns the refined graph and
    one report per executed iteration (prune counts filled in)."""
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    targets = targets or RefineTargets()
    reports: list[ValidationReport] = []
    for iteration in range(1, max_iterations + 1):
        judgments = judge_edges(graph, gateway)
        attach_judgments(graph, judgments)
        report = compute_report(judgments, iteration_index=iteration)
        apply_rationale_fixes(graph, judgments)
        _, summary = apply_pruning(graph, judgments, threshold)
        report = replace(
            report,
            pruned_edge_count=summary.removed_edge_count,
            pruned_node_count=summary.removed_node_count,
        )
        reports.append(report)
        if meets_targets(report, targets):
            break
    return graph, reports
