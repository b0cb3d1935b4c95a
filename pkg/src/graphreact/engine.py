"""Episode orchestration: the reason/act schedule for one target node."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .actions import DocumentIndex, Toggles, act_refine, act_retrieve
from .backend import BackendError, BackendRequest, BackendResponse, Decode, LabelVerbalizer
from .embed_store import EmbeddingMatrix
from .encoder import Projector, SageParams, project_tokens, sage_forward_array
from .graph_store import TextAttributedGraph
from .prompting import (
    PromptTemplateSet,
    build_instruction,
    build_question,
    init_context,
    render_prompt,
    update_context,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    K: int = 4
    N: int = 4
    M: int = 4
    T: int = 5
    S: int = 6
    tau: float = 0.1
    toggles: Toggles = field(default_factory=Toggles)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    budget: int = 8000
    backend: str = "mock"
    templates: str = "generic"
    layers: int = 3
    hidden_dim: int = 64
    d_tok: int = 32
    normalize: bool = True
    max_chars: int = 2048
    max_tokens: int = 256
    temperature: float = 0.0
    paths: dict[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if isinstance(self.toggles, dict):
            object.__setattr__(self, "toggles", Toggles(**self.toggles))
        self.validate()

    def validate(self) -> None:
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if min(self.N, self.M, self.S) < 0:
            raise ConfigError("N, M and S must be non-negative")
        if self.T < 1:
            raise ConfigError("T must be at least 1")
        if self.toggles.cf and self.K < 3:
            raise ConfigError("context refinement needs K >= 3")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.budget <= 0:
            raise ConfigError("budget must be positive")
        if self.layers < 1:
            raise ConfigError("encoder needs at least one layer")

    @property
    def decode(self) -> Decode:
        return Decode(self.max_chars, self.max_tokens, self.temperature)

    def with_k(self, k: int) -> "RunConfig":
        """Same config at ``K=k``; refinement is switched off where it cannot run."""
        toggles = self.toggles if k >= 3 else replace(self.toggles, cf=False)
        return replace(self, K=k, toggles=toggles)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        d = dict(d)
        if "toggles" in d:
            d["toggles"] = Toggles(**d["toggles"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("paths")
        d.pop("seeds")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TraceEvent:
    step: int
    purpose: str
    prompt_sha256: str
    context_chars: int
    response: str


@dataclass
class TraceRecord:
    node_id: int
    seed: int
    config_hash: str
    events: list[TraceEvent] = field(default_factory=list)
    observations: list[dict] = field(default_factory=list)
    final_answer: str | None = None
    matched_label: int | None = None
    true_label: int | None = None
    correct: bool = False
    error: dict | None = None

    def count(self, purpose: str) -> int:
        return sum(1 for e in self.events if e.purpose == purpose)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)


class EpisodeError(RuntimeError):
    """A backend failure aborted an episode; ``trace`` holds what ran before it."""

    def __init__(self, trace: TraceRecord, cause: BackendError):
        super().__init__(f"episode for node {trace.node_id} failed: {type(cause).__name__}: {cause}")
        self.trace = trace
        self.cause = cause


class _TracingBackend:
    """Forwards to the real backend and logs one event per call."""

    def __init__(self, inner, trace: TraceRecord):
        self.inner = inner
        self.trace = trace
        self.step = 1
        self.differentiable = getattr(inner, "differentiable", False)

    def complete(self, request: BackendRequest) -> BackendResponse:
        resp = self.inner.complete(request)
        self.trace.events.append(
            TraceEvent(self.step, request.purpose, request.prompt_sha256, len(request.prompt), resp.text)
        )
        return resp


def run_episode(
    g: TextAttributedGraph,
    x_feats: EmbeddingMatrix | None,
    e: EmbeddingMatrix,
    v: int,
    proj: Projector,
    params: SageParams | None,
    config: RunConfig,
    backend,
    templates: PromptTemplateSet,
    *,
    encoded: np.ndarray | None = None,
    index: DocumentIndex | None = None,
    seed: int = 0,
) -> tuple[int | None, TraceRecord]:
    """Reason and act over node ``v`` and return the matched label and its trace.

    ``K=1`` is a single prediction call. Otherwise step 1 produces a thought
    and the enabled retrievals, steps ``2..K-1`` a thought plus a refinement
    each (only with CF on), and a separate final call predicts the label.
    ``encoded`` is the precomputed encoder output for the whole graph; it is
    derived from ``x_feats`` and ``params`` when absent.
    """
    if e.rows != g.node_count:
        raise ConfigError(f"embedding rows {e.rows} != graph nodes {g.node_count}")
    if encoded is None:
        if x_feats is None or params is None:
            raise ConfigError("need either encoded representations or features plus encoder params")
        encoded = sage_forward_array(g, x_feats.data, params, normalize=config.normalize)
    tokens = project_tokens(encoded[v], proj)
    if tokens.shape[0] != config.T:
        raise ConfigError(f"projector emits {tokens.shape[0]} tokens, config.T is {config.T}")

    trace = TraceRecord(node_id=v, seed=seed, config_hash=config.config_hash(), true_label=g.labels[v])
    tb = _TracingBackend(backend, trace)
    decode = config.decode
    instruction = build_instruction(g.node_texts[v], config.T, templates)
    question = build_question(g.label_names, templates)
    thought_task = templates["thought_generation"]

    def ask(purpose: str, prompt: str) -> str:
        return tb.complete(BackendRequest(prompt, purpose, tokens, decode, v)).text

    try:
        context = None
        if config.K >= 2:
            tb.step = 1
            thought = ask("thought", render_prompt(instruction, None, question, templates, config.budget, task=thought_task))
            obs = act_retrieve(
                g, e, v, config.N, config.M, tb, templates, config.toggles,
                step=1, index=index, s=config.S, instruction=instruction, question=question,
                pending_thought=thought, token_vectors=tokens, decode=decode,
            )
            context = init_context(thought, obs, config.budget)
            trace.observations.append(obs.to_dict())
            if config.toggles.cf:
                for k in range(2, config.K):
                    tb.step = k
                    prompt = render_prompt(instruction, context, question, templates, config.budget, task=thought_task)
                    thought = ask("thought", prompt)
                    obs = act_refine(
                        context, thought, tb, templates, instruction=instruction, question=question,
                        token_vectors=tokens, node_id=v, decode=decode,
                    )
                    context = update_context(context, thought, obs)
                    trace.observations.append(obs.to_dict())
        tb.step = config.K
        answer = ask("final", render_prompt(instruction, context, question, templates, config.budget))
    except BackendError as exc:
        trace.error = {
            "type": type(exc).__name__,
            "message": str(exc),
            "purpose": exc.purpose,
            "summary_kind": exc.summary_kind,
        }
        raise EpisodeError(trace, exc) from exc

    label = LabelVerbalizer(g.label_names).match(answer)
    trace.final_answer = answer
    trace.matched_label = label
    trace.correct = label is not None and label == g.labels[v]
    return label, trace
