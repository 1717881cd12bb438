"""Prompt rendering: component assembly, placeholder substitution, and
the fixed judging prompt."""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from pkgforge.prompt_engine import (
    DEFAULT_GENERATION_TEMPLATE,
    VALIDATION_PROMPT_TEMPLATE,
    PlaceholderError,
    PromptTemplate,
    SeedProduct,
    TemplateError,
    load_template,
    render_generation_prompt,
    render_one_shot,
    render_validation_prompt,
    substitute,
    validate_template,
)

JORDAN = "Jordan 1 Retro OG High UNC Toe University Blue"
CHICAGO = "Air Jordan 1 Retro High OG 'Chicago'"


class TestSubstitute:
    def test_replaces_placeholder(self) -> None:
        assert substitute("hi {name}", {"name": "there"}) == "hi there"

    def test_doubled_braces_are_literal(self) -> None:
        assert substitute('{{"a": 1}}', {}) == '{"a": 1}'

    def test_unknown_placeholder_raises(self) -> None:
        with pytest.raises(PlaceholderError):
            substitute("{missing}", {})

    def test_unterminated_brace_raises(self) -> None:
        with pytest.raises(PlaceholderError):
            substitute("oops {name", {"name": "x"})

    def test_bare_close_brace_raises(self) -> None:
        with pytest.raises(PlaceholderError):
            substitute("oops }", {})

    def test_extra_values_are_ignored(self) -> None:
        assert substitute("plain", {"unused": "x"}) == "plain"


class TestSeedProduct:
    def test_blank_title_rejected(self) -> None:
        with pytest.raises(ValueError):
            SeedProduct(id="s1", title="   ")

    def test_empty_id_rejected(self) -> None:
        with pytest.raises(ValueError):
            SeedProduct(id="", title="x")


def test_default_template_renders_worked_example() -> None:
    seed = SeedProduct(id="s1", title=JORDAN)
    prompt = render_generation_prompt(DEFAULT_GENERATION_TEMPLATE, seed, 5)
    assert prompt.text.startswith(
        "One user of eBay is browsing a product titled "
        "'Jordan 1 Retro OG High UNC Toe University Blue'"
    )
    assert "Provide 5 recommendations" in prompt.text
    assert "where predicate is the recommendation rationale" in prompt.text
    assert prompt.kind == "generation"
    assert prompt.seed_id == "s1"
    assert prompt.k == 5


def test_components_joined_by_blank_lines() -> None:
    seed = SeedProduct(id="s1", title="T")
    prompt = render_generation_prompt(DEFAULT_GENERATION_TEMPLATE, seed, 3)
    parts = prompt.text.split("\n\n")
    # One-shot example holds one interior blank-line-free newline; the
    # four components arrive in fixed order.
    assert parts[0].startswith("One user of eBay")
    assert parts[1].startswith("Provide 3 recommendations")
    assert parts[2].startswith("Organize the answer")
    assert parts[3].startswith("An example of output format")


def test_rendered_prompt_has_no_unsubstituted_placeholders() -> None:
    seed = SeedProduct(id="s1", title="Some Product")
    prompt = render_generation_prompt(DEFAULT_GENERATION_TEMPLATE, seed, 7)
    assert "{seed_product}" not in prompt.text
    assert "{k}" not in prompt.text


def test_one_shot_renders_literal_json_skeleton() -> None:
    text = render_one_shot(DEFAULT_GENERATION_TEMPLATE)
    assert '"nodes":[' in text
    assert '"edges": [' in text
    assert "{{" not in text


def test_non_positive_k_rejected() -> None:
    seed = SeedProduct(id="s1", title="T")
    with pytest.raises(ValueError):
        render_generation_prompt(DEFAULT_GENERATION_TEMPLATE, seed, 0)


def test_extra_context_is_appended_to_behavior_injection() -> None:
    seed = SeedProduct(id="s1", title="T")
    prompt = render_generation_prompt(
        DEFAULT_GENERATION_TEMPLATE, seed, 2, extra_context="Focus on shoes."
    )
    first = prompt.text.split("\n\n")[0]
    assert first.endswith("Focus on shoes.")


class TestValidateTemplate:
    def test_default_template_is_valid(self) -> None:
        assert validate_template(DEFAULT_GENERATION_TEMPLATE) == []

    def test_missing_seed_placeholder_flagged(self) -> None:
        template = PromptTemplate(
            behavior_injection="no placeholder here",
            task_description="Provide {k} things",
            format_indicator="JSON please",
            one_shot_example="{{}}",
        )
        violations = validate_template(template)
        assert any(v.component == "behavior_injection" for v in violations)

    def test_missing_k_placeholder_flagged(self) -> None:
        template = PromptTemplate(
            behavior_injection="seed {seed_product}",
            task_description="no count",
            format_indicator="JSON please",
            one_shot_example="{{}}",
        )
        violations = validate_template(template)
        assert any(v.component == "task_description" for v in violations)

    def test_empty_component_flagged(self) -> None:
        template = PromptTemplate(
            behavior_injection="seed {seed_product}",
            task_description="Provide {k}",
            format_indicator="   ",
            one_shot_example="{{}}",
        )
        violations = validate_template(template)
        assert any(v.component == "format_indicator" for v in violations)

    def test_invalid_template_fails_render(self) -> None:
        template = PromptTemplate(
            behavior_injection="{seed_product} and {typo",
            task_description="Provide {k}",
            format_indicator="JSON",
            one_shot_example="{{}}",
        )
        with pytest.raises(TemplateError):
            render_generation_prompt(template, SeedProduct(id="s", title="T"), 1)


class TestValidationPrompt:
    def test_ends_with_judgment_sentence(self) -> None:
        prompt = render_validation_prompt(JORDAN, CHICAGO, "Classic colorway appeal")
        assert prompt.text.endswith(
            f"Now you are viewing '{JORDAN}'. The recommended item is "
            f"'{CHICAGO}', and the recommendation reason is "
            "'Classic colorway appeal'."
        )

    def test_contains_both_worked_examples(self) -> None:
        prompt = render_validation_prompt("a", "b", "c")
        assert '"original": "Same series"' in prompt.text
        assert '"original": "Same colorway"' in prompt.text
        assert '"alternative": "different colorway"' in prompt.text

    def test_fixes_score_range_instruction(self) -> None:
        prompt = render_validation_prompt("a", "b", "c")
        assert "score from 1 to 10" in prompt.text

    def test_blank_titles_rejected(self) -> None:
        with pytest.raises(ValueError):
            render_validation_prompt(" ", "b", "c")
        with pytest.raises(ValueError):
            render_validation_prompt("a", "", "c")

    def test_template_has_no_stray_placeholders(self) -> None:
        rendered = substitute(
            VALIDATION_PROMPT_TEMPLATE,
            {"seed_title": "s", "recommended_title": "r", "rationale": "x"},
        )
        assert "{seed_title}" not in rendered
        assert "{recommended_title}" not in rendered
        assert "{rationale}" not in rendered


class TestLoadTemplate:
    def test_round_trip(self, tmp_path) -> None:
        path = tmp_path / "template.txt"
        path.write_text(
            "[behavior_injection]\n"
            "Browsing {seed_product} today.\n"
            "\n"
            "[task_description]\n"
            "Provide {k} ideas.\n"
            "\n"
            "[format_indicator]\n"
            "JSON only.\n"
            "\n"
            "[one_shot_example]\n"
            '{{"nodes": []}}\n',
            encoding="utf-8",
        )
        template = load_template(str(path))
        assert template.behavior_injection == "Browsing {seed_product} today."
        assert template.task_description == "Provide {k} ideas."
        assert validate_template(template) == []

    def test_missing_section_raises(self, tmp_path) -> None:
        path = tmp_path / "template.txt"
        path.write_text("[behavior_injection]\n{seed_product}\n", encoding="utf-8")
        with pytest.raises(TemplateError, match="missing sections"):
            load_template(str(path))

    def test_duplicate_section_raises(self, tmp_path) -> None:
        path = tmp_path / "template.txt"
        path.write_text(
            "[behavior_injection]\na {seed_product}\n[behavior_injection]\nb\n",
            encoding="utf-8",
        )
        with pytest.raises(TemplateError, match="duplicate"):
            load_template(str(path))

    def test_unknown_section_raises(self, tmp_path) -> None:
        path = tmp_path / "template.txt"
        path.write_text("[mystery]\nwhat\n", encoding="utf-8")
        with pytest.raises(TemplateError, match="unknown section"):
            load_template(str(path))


@given(
    title=st.text(
        alphabet=st.characters(blacklist_characters="{}", blacklist_categories=("Cs",)),
        min_size=1,
    ).filter(lambda s: s.strip()),
    k=st.integers(min_value=1, max_value=50),
)
def test_render_never_leaves_placeholders(title: str, k: int) -> None:
    seed = SeedProduct(id="s", title=title)
    prompt = render_generation_prompt(DEFAULT_GENERATION_TEMPLATE, seed, k)
    assert "{seed_product}" not in prompt.text
    assert "{k}" not in prompt.text
    assert title in prompt.text
