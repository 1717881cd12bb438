"""Prompt construction for knowledge graph generation and edge validation.

A generation prompt is assembled from four template components in fixed
order: behavior injection (seats the model in a shopping session around a
seed product), task description (asks for k recommendations with short
rationales plus brand/type/audience predictions), format indicator (pins
the JSON knowledge graph output contract), and a one-shot example of that
output format. Components are joined with single blank lines.

Placeholders use single-brace ``{name}`` syntax; a literal brace is
written doubled (``{{``). Rendering is pure: same inputs, same text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

COMPONENT_ORDER = (
    "behavior_injection",
    "task_description",
    "format_indicator",
    "one_shot_example",
)

GENERATION_PLACEHOLDERS = ("seed_product", "k")


class TemplateError(ValueError):
    """Raised when a template cannot be loaded or fails validation."""


class PlaceholderError(TemplateError):
    """Raised when placeholder substitution cannot be performed."""


@dataclass(frozen=True)
class SeedProduct:
    """A product title that anchors one generation request.

    Attributes:
        id: Unique identifier for the seed within a run.
        title: Product title as listed; must be non-blank.
    """

    id: str
    title: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("seed id must be non-empty")
        if not self.title.strip():
            raise ValueError(f"seed {self.id!r} has a blank title")


@dataclass(frozen=True)
class PromptTemplate:
    """The four-component generation prompt template.

    Attributes:
        behavior_injection: Opening sentence; must reference {seed_product}.
        task_description: Task statement; must reference {k}.
        format_indicator: Output contract statement.
        one_shot_example: Worked example of the expected output format.
    """

    behavior_injection: str
    task_description: str
    format_indicator: str
    one_shot_example: str

    def components(self) -> tuple[str, str, str, str]:
        return (
            self.behavior_injection,
            self.task_description,
            self.format_indicator,
            self.one_shot_example,
        )


@dataclass(frozen=True)
class RenderedPrompt:
    """Final prompt text ready for completion.

    Attributes:
        text: The full prompt.
        seed_id: Identifier of the seed the prompt concerns.
        kind: "generation" or "validation".
        k: Recommendation count for generation prompts, else None.
    """

    text: str
    seed_id: str
    kind: str
    k: int | None = None


@dataclass(frozen=True)
class TemplateViolation:
    component: str
    message: str


DEFAULT_GENERATION_TEMPLATE = PromptTemplate(
    behavior_injection=(
        "One user of eBay is browsing a product titled '{seed_product}', "
        "hereinafter we refer to it as the seed product."
    ),
    task_description=(
        "Provide {k} recommendations that the user might be interested in "
        "related to the seed product. For each recommendation, offer a "
        "reasonable rationale in 5 words, then predict the brand, type, and "
        "target audience demographics of each product."
    ),
    format_indicator=(
        "Organize the answer to knowledge graph in JSON format. Nodes should "
        "be products extracted from the seed product and recommendations. "
        "Edges should be (Subject, Predicate, Object) triplets, where "
        "predicate is the recommendation rationale from Subject to Object."
    ),
    one_shot_example=(
        "An example of output format is as below:\n"
        '{{"nodes":[{{"product_title", seed_product, "brand": "", type: "", '
        'audience: ["", "", ""]}}, {{"product_title": recommendation1}}, ...], \n'
        '"edges": [{{"subject": seed_product, "predicate", "", '
        '"object": recommendation1}}, ...]}}'
    ),
)

VALIDATION_PROMPT_TEMPLATE = (
    "As an e-commerce user browsing a product, you've received "
    "recommendations with accompanying reasons. Your task is to assign a "
    "score from 1 to 10 indicating the acceptability of each recommended "
    "item. Additionally, evaluate the accuracy and appropriateness of the "
    "provided reasons. If needed, suggest better reasons. Please format all "
    "output in JSON format.\n"
    "\n"
    "Here are two examples of input and output:\n"
    "\n"
    "Input: You are browsing 'Jordan Dub Zero Mid White Cool Grey'. The "
    "recommended item is 'Jordan Dub Zero Mid Black White', and the reason "
    "is 'Same series'.\n"
    "\n"
    "Output: {{\n"
    '    "Jordan Dub Zero Mid Black White": {{\n'
    '        "acceptability_score": 9,\n'
    '        "reason": {{\n'
    '            "original": "Same series",\n'
    '            "accurate": True,\n'
    '            "alternative": None\n'
    "        }}\n"
    "    }}}}\n"
    "\n"
    "Input: You are browsing 'Jordan Dub Zero Mid White Cool Grey'. The "
    "recommended item is 'Jordan Dub Zero Mid Black White', and the reason "
    "is 'Same colorway'.\n"
    "\n"
    "Output: {{\n"
    '    "Jordan Dub Zero Mid Black White": {{\n'
    '        "acceptability_score": 9,\n'
    '        "reason": {{\n'
    '            "original": "Same colorway",\n'
    '            "accurate": False,\n'
    '            "alternative": "different colorway"\n'
    "        }}\n"
    "    }}}}\n"
    "\n"
    "Now you are viewing '{seed_title}'. The recommended item is "
    "'{recommended_title}', and the recommendation reason is '{rationale}'."
)

_SECTION_RE = re.compile(r"^\[([a-z_]+)\]\s*$")


def substitute(text: str, values: dict[str, str]) -> str:
    """Replace {name} placeholders in text with the given values.

    Doubled braces render as literal braces. Unknown placeholders, an
    unterminated '{', or a bare '}' raise PlaceholderError.
    """
    out: list[str] = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "{":
            if i + 1 < n and text[i + 1] == "{":
                out.append("{")
                i += 2
                continue
            end = text.find("}", i + 1)
            if end < 0:
                raise PlaceholderError(f"unterminated placeholder at index {i}")
            name = text[i + 1 : end]
            if name not in values:
                raise PlaceholderError(f"unknown placeholder {{{name}}}")
            out.append(str(values[name]))
            i = end + 1
            continue
        if ch == "}":
            if i + 1 < n and text[i + 1] == "}":
                out.append("}")
                i += 2
                continue
            raise PlaceholderError(f"unmatched '}}' at index {i}")
        out.append(ch)
        i += 1
    return "".join(out)


def validate_template(template: PromptTemplate) -> list[TemplateViolation]:
    """Check a template against the component contract.

    Returns an empty list when the template is valid, otherwise one
    violation record per problem naming the offending component.
    """
    violations: list[TemplateViolation] = []
    dummy = {"seed_product": "x", "k": "1"}
    for name, text in zip(COMPONENT_ORDER, template.components()):
        if not text.strip():
            violations.append(TemplateViolation(name, "component is empty"))
            continue
        try:
            substitute(text, dummy)
        except PlaceholderError as exc:
            violations.append(TemplateViolation(name, str(exc)))
    if "{seed_product}" not in template.behavior_injection:
        violations.append(
            TemplateViolation(
                "behavior_injection", "missing required placeholder {seed_product}"
            )
        )
    if "{k}" not in template.task_description:
        violations.append(
            TemplateViolation("task_description", "missing required placeholder {k}")
        )
    return violations


def render_generation_prompt(
    template: PromptTemplate,
    seed: SeedProduct,
    k: int,
    extra_context: str = "",
) -> RenderedPrompt:
    """Render the four components for one seed into a generation prompt.

    Components are joined in fixed order with single blank lines. The
    optional extra_context is appended to the behavior injection. Raises
    TemplateError when the template is invalid, ValueError for a
    non-positive k.
    """
    violations = validate_template(template)
    if violations:
        detail = "; ".join(f"{v.component}: {v.message}" for v in violations)
        raise TemplateError(f"invalid template: {detail}")
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    values = {"seed_product": seed.title, "k": str(k)}
    parts = [substitute(text, values) for text in template.components()]
    if extra_context:
        parts[0] = f"{parts[0]} {extra_context}"
    return RenderedPrompt(
        text="\n\n".join(parts), seed_id=seed.id, kind="generation", k=k
    )


def render_one_shot(
    template: PromptTemplate, values: dict[str, str] | None = None
) -> str:
    """The one-shot example component as it appears in rendered prompts."""
    return substitute(template.one_shot_example, values or {})


def render_validation_prompt(
    seed_title: str, recommended_title: str, rationale: str
) -> RenderedPrompt:
    """Render an edge-judging prompt for one (seed, recommendation, reason).

    The prompt fixes the 1-10 scoring task, embeds two worked examples
    (an accurate reason and an inaccurate one with its replacement), and
    ends with the sentence naming the item under judgment and its reason.
    """
    if not seed_title.strip():
        raise ValueError("seed title must be non-blank")
    if not recommended_title.strip():
        raise ValueError("recommended title must be non-blank")
    text = substitute(
        VALIDATION_PROMPT_TEMPLATE,
        {
            "seed_title": seed_title,
            "recommended_title": recommended_title,
            "rationale": rationale,
        },
    )
    return RenderedPrompt(text=text, seed_id=seed_title, kind="validation", k=None)


def load_template(path: str) -> PromptTemplate:
    """Load a template from a UTF-8 sectioned text file.

    The file holds one ``[component_name]`` header per component followed
    by that component's text. Section order is free; all four components
    must appear exactly once. Blank lines around a section body are
    trimmed, interior lines are kept verbatim.
    """
    with open(path, encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    sections: dict[str, list[str]] = {}
    current: str | None = None
    for lineno, line in enumerate(lines, start=1):
        header = _SECTION_RE.match(line)
        if header:
            name = header.group(1)
            if name not in COMPONENT_ORDER:
                raise TemplateError(f"{path}:{lineno}: unknown section [{name}]")
            if name in sections:
                raise TemplateError(f"{path}:{lineno}: duplicate section [{name}]")
            sections[name] = []
            current = name
            continue
        if current is None:
            if line.strip():
                raise TemplateError(
                    f"{path}:{lineno}: content before the first section header"
                )
            continue
        sections[current].append(line)
    missing = [name for name in COMPONENT_ORDER if name not in sections]
    if missing:
        raise TemplateError(f"{path}: missing sections: {', '.join(missing)}")
    bodies = {name: "\n".join(body).strip("\n") for name, body in sections.items()}
    return PromptTemplate(**bodies)
