"""Prompt templates, the running reasoning context, and prompt rendering."""
from __future__ import annotations

import string
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

from .graph_store import NodeText

if TYPE_CHECKING:
    from .actions import Observation

TEMPLATE_ROOT = Path(__file__).parent / "templates"

TEMPLATE_NAMES = (
    "preamble",
    "task_instruction",
    "thought_generation",
    "topo_summary",
    "sem_summary",
    "refinement",
    "search_query",
    "final_question",
    "neighbor_intro",
    "similar_intro",
    "search_intro",
)

# Slots each template must expose for the renderer to work.
REQUIRED_SLOTS = {
    "task_instruction": {"title", "description", "token_placeholders"},
    "topo_summary": {"nodes"},
    "sem_summary": {"nodes"},
    "final_question": {"categories"},
}

SUMMARY_LABELS = {
    "topological": "Neighbor summary",
    "semantic": "Node summary",
    "refinement": "Summary",
    "search": "Search results",
}
SUMMARY_INTROS = {"topological": "neighbor_intro", "semantic": "similar_intro", "search": "search_intro"}

USER_CUE = "USER:"
ASSISTANT_CUE = "ASSISTANT:"
TRUNCATION_MARKER = "[truncated]"
DEFAULT_BUDGET = 8000


class TemplateError(ValueError):
    pass


class BudgetExhaustedError(ValueError):
    pass


class ContextOrderError(ValueError):
    pass


def template_slots(template: str) -> set[str]:
    return {name for _, name, _, _ in string.Formatter().parse(template) if name is not None}


def fill(template: str, **values: str) -> str:
    """``str.format`` with a typed error for missing slots.

    Substituted values are inserted verbatim, so braces inside node text are
    never interpreted; ``{{``/``}}`` in a template render as literal braces.
    """
    missing = template_slots(template) - values.keys()
    if missing:
        raise TemplateError(f"no value for template slot(s): {sorted(missing)}")
    return template.format(**values)


@dataclass(frozen=True)
class PromptTemplateSet:
    templates: Mapping[str, str]
    name: str = "custom"

    def __post_init__(self) -> None:
        missing = [n for n in TEMPLATE_NAMES if n not in self.templates]
        if missing:
            raise TemplateError(f"template set {self.name!r} lacks {missing}")
        for tname, slots in REQUIRED_SLOTS.items():
            absent = slots - template_slots(self.templates[tname])
            if absent:
                raise TemplateError(f"template {tname!r} lacks slot(s) {sorted(absent)}")

    def __getitem__(self, key: str) -> str:
        return self.templates[key]

    @classmethod
    def load(cls, dataset: str | Path = "generic", overrides: Mapping[str, str] | None = None) -> "PromptTemplateSet":
        """Load ``<name>.txt`` files from a bundled dataset name or a directory.

        Files missing from a custom directory fall back to the bundled
        ``generic`` set so a dataset only needs to override what differs.
        """
        path = Path(dataset)
        if not path.is_dir():
            path = TEMPLATE_ROOT / str(dataset)
            if not path.is_dir():
                raise TemplateError(f"unknown template set {dataset!r}")
        texts = {}
        for tname in TEMPLATE_NAMES:
            f = path / f"{tname}.txt"
            if not f.exists():
                f = TEMPLATE_ROOT / "generic" / f"{tname}.txt"
            text = f.read_text(encoding="utf-8")
            texts[tname] = text[:-1] if text.endswith("\n") else text
        if overrides:
            texts.update(overrides)
        return cls(texts, name=path.name)

    def with_overrides(self, **overrides: str) -> "PromptTemplateSet":
        return PromptTemplateSet({**self.templates, **overrides}, self.name)


def token_placeholders(t: int) -> str:
    return " ".join(f"<Token {i}>" for i in range(1, t + 1))


def format_categories(label_names: Sequence[str]) -> str:
    return ", ".join(f'"{name}"' for name in label_names)


def build_instruction(node: NodeText, t: int, templates: PromptTemplateSet) -> str:
    """Node-specific instruction with ``t`` ordered ``<Token i>`` markers."""
    if t < 1:
        raise ValueError("need at least one graph token")
    return fill(
        templates["task_instruction"],
        title=node.title,
        description=node.description,
        token_placeholders=token_placeholders(t),
    )


def build_question(label_names: Sequence[str], templates: PromptTemplateSet) -> str:
    return fill(templates["final_question"], categories=format_categories(label_names))


# --- reasoning context -------------------------------------------------------


@dataclass(frozen=True)
class ContextRecord:
    step: int
    thought: str
    observation: "Observation"


@dataclass(frozen=True)
class ReasoningContext:
    records: tuple[ContextRecord, ...] = ()
    char_budget: int = DEFAULT_BUDGET

    @property
    def last_step(self) -> int:
        return self.records[-1].step if self.records else 0

    def summaries(self):
        for rec in self.records:
            yield from rec.observation.summaries


def init_context(thought: str, obs: "Observation", budget: int = DEFAULT_BUDGET) -> ReasoningContext:
    if obs.step != 1:
        raise ContextOrderError(f"initial observation must be step 1, got {obs.step}")
    return ReasoningContext((ContextRecord(1, thought, obs),), budget)


def update_context(c: ReasoningContext, thought: str, obs: "Observation") -> ReasoningContext:
    """Append one record; earlier records are carried over unchanged."""
    if obs.step != c.last_step + 1:
        raise ContextOrderError(f"expected step {c.last_step + 1}, got {obs.step}")
    return replace(c, records=c.records + (ContextRecord(obs.step, thought, obs),))


# --- rendering ---------------------------------------------------------------


@dataclass
class _Segment:
    kind: str  # "thought" | "summary"
    record: int
    text: str
    dropped: bool = field(default=False)


def _summary_segment(summary, templates: PromptTemplateSet) -> str:
    label = SUMMARY_LABELS[summary.kind]
    intro_name = SUMMARY_INTROS.get(summary.kind)
    body = f"{label}: {summary.text}"
    if intro_name:
        body = f"{templates[intro_name]}\n{body}"
    return "\n\n" + body


def _segments(c: ReasoningContext, templates, pending_thought: str | None) -> list[_Segment]:
    segs = []
    for idx, rec in enumerate(c.records):
        if rec.thought:
            segs.append(_Segment("thought", idx, f"\n\nThought: {rec.thought}"))
        for s in rec.observation.summaries:
            segs.append(_Segment("summary", idx, _summary_segment(s, templates)))
    if pending_thought is not None:
        segs.append(_Segment("thought", len(c.records), f"\n\nThought: {pending_thought}"))
    return segs


def _join(segs: list[_Segment]) -> str:
    parts = []
    prev_dropped = False
    for s in segs:
        if s.dropped:
            if not prev_dropped:
                parts.append(f"\n\n{TRUNCATION_MARKER}")
            prev_dropped = True
        else:
            parts.append(s.text)
            prev_dropped = False
    return "".join(parts)


def _drop_order(segs: list[_Segment]) -> list[_Segment]:
    if not segs:
        return []
    final = max(s.record for s in segs if s.kind == "summary") if any(s.kind == "summary" for s in segs) else -1
    older = [s for s in segs if s.kind == "summary" and s.record != final]
    thoughts = [s for s in segs if s.kind == "thought"]
    newest = [s for s in segs if s.kind == "summary" and s.record == final]
    return older + thoughts + newest


def render_prompt(
    instruction: str,
    context: ReasoningContext | None,
    question: str,
    templates: PromptTemplateSet,
    budget: int | None = None,
    *,
    task: str | None = None,
    pending_thought: str | None = None,
) -> str:
    """Lay out preamble, instruction, context records, question and cue.

    ``task`` appends a trailing request (thought generation, refinement,
    query generation) after the question. When the prompt exceeds
    ``budget`` characters, summaries of older records are dropped first,
    then thoughts oldest-first, then the newest record's summaries; the
    instruction and question are never cut.
    """
    context = context or ReasoningContext()
    budget = context.char_budget if budget is None else budget
    if budget <= 0:
        raise ValueError("budget must be positive")
    head = f"{templates['preamble']} {USER_CUE} {instruction}"
    tail = f"\n\n{question}"
    if task:
        tail += f"\n\n{task}"
    tail += f" {ASSISTANT_CUE}"
    segs = _segments(context, templates, pending_thought)

    def assemble() -> str:
        return head + _join(segs) + tail

    out = assemble()
    if len(out) <= budget:
        return out
    if len(head) + len(tail) > budget:
        raise BudgetExhaustedError(
            f"budget {budget} cannot hold instruction and question ({len(head) + len(tail)} chars)"
        )
    for seg in _drop_order(segs):
        seg.dropped = True
        out = assemble()
        if len(out) <= budget:
            return out
    # everything dropped and the lone marker still does not fit
    return head + tail


def render_context(c: ReasoningContext, templates: PromptTemplateSet) -> str:
    """Context records alone, as they appear inside a full prompt."""
    return _join(_segments(c, templates, None)).lstrip("\n")
