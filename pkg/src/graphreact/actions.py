"""The action space: topological and semantic retrieval, refinement, text search."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .backend import BackendError, BackendRequest, Decode
from .embed_store import EmbeddingMatrix, top_m_similar
from .graph_store import TextAttributedGraph, bfs_first_n
from .prompting import (
    ASSISTANT_CUE,
    USER_CUE,
    PromptTemplateSet,
    ReasoningContext,
    fill,
    format_categories,
    render_context,
    render_prompt,
)

KINDS = ("topological", "semantic", "search", "refinement")
PASSAGE_CHARS = 400
QUERY_MAX_WORDS = 5


@dataclass(frozen=True)
class EvidenceSummary:
    kind: str
    text: str
    source_ids: tuple[int, ...] = ()
    step: int = 1

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown summary kind {self.kind!r}")
        if not self.text:
            raise ValueError("summary text must be non-empty")
        object.__setattr__(self, "source_ids", tuple(int(i) for i in self.source_ids))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "text": self.text, "source_ids": list(self.source_ids), "step": self.step}


@dataclass(frozen=True)
class Observation:
    step: int
    summaries: tuple[EvidenceSummary, ...] = ()

    def __post_init__(self) -> None:
        if self.step < 1:
            raise ValueError("observation step starts at 1")
        object.__setattr__(self, "summaries", tuple(self.summaries))
        order = [KINDS.index(s.kind) for s in self.summaries]
        if order != sorted(order):
            raise ValueError("summaries must be ordered topological, semantic, search, refinement")

    def to_dict(self) -> dict:
        return {"step": self.step, "summaries": [s.to_dict() for s in self.summaries]}


@dataclass(frozen=True)
class Toggles:
    """Which actions an episode may take (TR, SR, CF, Search)."""

    tr: bool = True
    sr: bool = True
    cf: bool = True
    search: bool = False


def _single_turn(body: str, templates: PromptTemplateSet) -> str:
    return f"{templates['preamble']} {USER_CUE} {body} {ASSISTANT_CUE}"


def _one_line(text: str, fallback: str) -> str:
    text = " ".join(text.split())
    return text or fallback


def _call(backend, request: BackendRequest, kind: str) -> str:
    try:
        return backend.complete(request).text
    except BackendError as exc:
        if exc.purpose is None:
            exc.purpose = request.purpose
        exc.summary_kind = kind
        raise


def format_evidence(g: TextAttributedGraph, target: int, ids: Sequence[int], empty_note: str) -> str:
    """Evidence block: the target node, then one ``[Node i]`` line per retrieved node."""
    t = g.node_texts[target]
    lines = [f"[Target] Title: {t.title}; Description: {t.description}"]
    for i in ids:
        nt = g.node_texts[i]
        lines.append(f"[Node {i}] Title: {nt.title}; Description: {nt.description}")
    if not ids:
        lines.append(empty_note)
    return "\n" + "\n".join(lines)


def _summary_request(g, v, ids, template, empty_note, purpose, templates, decode) -> BackendRequest:
    body = fill(
        template,
        categories=format_categories(g.label_names),
        nodes=format_evidence(g, v, ids, empty_note),
    )
    return BackendRequest(_single_turn(body, templates), purpose, decode=decode, node_id=v)


def act_retrieve_topological(
    g: TextAttributedGraph,
    v: int,
    n: int,
    backend,
    templates: PromptTemplateSet,
    *,
    step: int = 1,
    decode: Decode = Decode(),
) -> EvidenceSummary:
    ids = bfs_first_n(g, v, n)
    note = "No neighboring nodes are reachable from the target node; state that no neighbor evidence is available."
    req = _summary_request(g, v, ids, templates["topo_summary"], note, "topo_summary", templates, decode)
    text = _call(backend, req, "topological")
    return EvidenceSummary("topological", _one_line(text, "No neighbor summary was produced."), ids, step)


def act_retrieve_semantic(
    g: TextAttributedGraph,
    e: EmbeddingMatrix,
    v: int,
    m: int,
    backend,
    templates: PromptTemplateSet,
    *,
    step: int = 1,
    decode: Decode = Decode(),
) -> EvidenceSummary:
    ids = [i for i, _ in top_m_similar(e, v, m)]
    note = "No similar nodes are available for the target node; state that no similar-node evidence is available."
    req = _summary_request(g, v, ids, templates["sem_summary"], note, "sem_summary", templates, decode)
    text = _call(backend, req, "semantic")
    return EvidenceSummary("semantic", _one_line(text, "No similar-node summary was produced."), ids, step)


def act_refine(
    context: ReasoningContext,
    thought: str,
    backend,
    templates: PromptTemplateSet,
    *,
    instruction: str | None = None,
    question: str | None = None,
    token_vectors=None,
    node_id: int | None = None,
    decode: Decode = Decode(),
) -> Observation:
    """Ask the backend to distill the context plus ``thought`` into one sentence."""
    step = context.last_step + 1
    if instruction is not None and question is not None:
        prompt = render_prompt(
            instruction, context, question, templates, task=templates["refinement"], pending_thought=thought
        )
    else:
        token_vectors = None
        body = render_context(context, templates)
        body = f"{body}\n\nThought: {thought}\n\n{templates['refinement']}".lstrip("\n")
        prompt = _single_turn(body, templates)
    req = BackendRequest(prompt, "refinement", token_vectors=token_vectors, decode=decode, node_id=node_id)
    text = _call(backend, req, "refinement")
    return Observation(step, (EvidenceSummary("refinement", _one_line(text, "No digest was produced."), (), step),))


# --- textual search ----------------------------------------------------------


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass(frozen=True)
class Document:
    id: int
    title: str
    body: str


class DocumentIndex:
    """TF-IDF index with ``1 + ln(N / df)`` idf and unit-length document vectors."""

    def __init__(self, docs: Sequence[Document]):
        self.docs = sorted(docs, key=lambda d: d.id)
        if len({d.id for d in self.docs}) != len(self.docs):
            raise ValueError("duplicate document id")
        n = len(self.docs)
        df: Counter[str] = Counter()
        tfs = []
        for d in self.docs:
            tf = Counter(tokenize(f"{d.title} {d.body}"))
            tfs.append(tf)
            df.update(tf.keys())
        self.idf = {t: 1.0 + math.log(n / c) for t, c in df.items()}
        self.vectors = []
        for tf in tfs:
            vec = {t: c * self.idf[t] for t, c in tf.items()}
            norm = math.sqrt(sum(w * w for w in vec.values()))
            self.vectors.append({t: w / norm for t, w in vec.items()} if norm else {})

    def __len__(self) -> int:
        return len(self.docs)

    def query_vector(self, query: str) -> dict[str, float]:
        tf = Counter(t for t in tokenize(query) if t in self.idf)
        vec = {t: c * self.idf[t] for t, c in tf.items()}
        norm = math.sqrt(sum(w * w for w in vec.values()))
        return {t: w / norm for t, w in vec.items()} if norm else {}

    def search(self, query: str, s: int) -> list[tuple[Document, float]]:
        if not self.docs:
            raise ValueError("document index is empty")
        q = self.query_vector(query)
        scored = []
        for doc, vec in zip(self.docs, self.vectors):
            score = sum(w * vec.get(t, 0.0) for t, w in q.items())
            scored.append((doc, score))
        scored.sort(key=lambda pair: (-pair[1], pair[0].id))
        return scored[:s]

    @classmethod
    def load(cls, path: str | Path) -> "DocumentIndex":
        docs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    docs.append(Document(int(obj["id"]), str(obj["title"]), str(obj["body"])))
                except (ValueError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad document record ({exc})") from None
        return cls(docs)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for d in self.docs:
                fh.write(json.dumps({"id": d.id, "title": d.title, "body": d.body}, ensure_ascii=False) + "\n")


def clean_query(text: str) -> str:
    first = text.strip().splitlines()[0] if text.strip() else ""
    return " ".join(first.strip().strip("\"'").split()[:QUERY_MAX_WORDS])


def act_search(
    index: DocumentIndex,
    context: ReasoningContext,
    backend,
    s: int,
    templates: PromptTemplateSet,
    *,
    instruction: str,
    question: str,
    pending_thought: str | None = None,
    token_vectors=None,
    node_id: int | None = None,
    step: int | None = None,
    decode: Decode = Decode(),
) -> EvidenceSummary:
    """Generate a short query, fetch the top-``s`` documents, and concatenate their passages."""
    if len(index) == 0:
        raise ValueError("document index is empty")
    if s < 1:
        raise ValueError("need s >= 1")
    prompt = render_prompt(
        instruction, context, question, templates, task=templates["search_query"], pending_thought=pending_thought
    )
    req = BackendRequest(prompt, "search_query", token_vectors=token_vectors, decode=decode, node_id=node_id)
    query = clean_query(_call(backend, req, "search"))
    hits = index.search(query, s)
    passages = [f"[Doc {d.id}] {d.title}: {d.body[:PASSAGE_CHARS]}" for d, _ in hits]
    text = f"Query: {query or '(empty)'}\n" + "\n".join(passages)
    return EvidenceSummary("search", text, [d.id for d, _ in hits], context.last_step + 1 if step is None else step)


def act_retrieve(
    g: TextAttributedGraph,
    e: EmbeddingMatrix,
    v: int,
    n: int,
    m: int,
    backend,
    templates: PromptTemplateSet,
    toggles: Toggles,
    *,
    step: int = 1,
    index: DocumentIndex | None = None,
    s: int = 6,
    instruction: str | None = None,
    question: str | None = None,
    pending_thought: str | None = None,
    token_vectors=None,
    decode: Decode = Decode(),
) -> Observation:
    """Run every enabled retrieval and collect summaries topological, semantic, search."""
    summaries = []
    if toggles.tr:
        summaries.append(act_retrieve_topological(g, v, n, backend, templates, step=step, decode=decode))
    if toggles.sr:
        summaries.append(act_retrieve_semantic(g, e, v, m, backend, templates, step=step, decode=decode))
    if toggles.search:
        if index is None or instruction is None or question is None:
            raise ValueError("search needs a document index, instruction and question")
        summaries.append(
            act_search(
                index, ReasoningContext(), backend, s, templates,
                instruction=instruction, question=question, pending_thought=pending_thought,
                token_vectors=token_vectors, node_id=v, step=step, decode=decode,
            )
        )
    return Observation(step, tuple(summaries))
