"""LLM completion backends and answer matching.

All backends expose ``complete(request) -> BackendResponse``. The mock and
replay backends are deterministic; the HTTP backend talks to an
OpenAI-compatible chat completions endpoint.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import requests

from .encoder import score_labels_mock
from .graph_store import TextAttributedGraph
from .prompting import SUMMARY_LABELS

log = logging.getLogger(__name__)

PURPOSES = ("thought", "topo_summary", "sem_summary", "refinement", "search_query", "final")
TOKEN_RE = re.compile(r"<Token \d+>")
TOKEN_RUN_RE = re.compile(r"<Token \d+>(?: <Token \d+>)*")
EVIDENCE_NODE_RE = re.compile(r"^\[Node (\d+)\]", re.MULTILINE)
SUMMARY_LINE_RE = re.compile(
    r"^(?:" + "|".join(re.escape(label) for label in SUMMARY_LABELS.values()) + r"): (.*)$",
    re.MULTILINE,
)
MIGHT_BE_RE = re.compile(r"category might be ", re.IGNORECASE)


class BackendError(RuntimeError):
    """Base class for every failure a backend may surface."""

    purpose: str | None = None
    summary_kind: str | None = None


class TransportError(BackendError):
    pass


class ScriptExhaustedError(BackendError):
    pass


class ReplayMismatchError(BackendError):
    pass


class MalformedEvidenceError(BackendError):
    pass


@dataclass(frozen=True)
class Decode:
    max_chars: int = 2048
    max_tokens: int = 256
    temperature: float = 0.0


@dataclass(frozen=True, eq=False)
class BackendRequest:
    prompt: str
    purpose: str
    token_vectors: np.ndarray | None = None
    decode: Decode = field(default_factory=Decode)
    node_id: int | None = None  # routing metadata, never sent over the wire

    def __post_init__(self) -> None:
        if self.purpose not in PURPOSES:
            raise ValueError(f"unknown purpose {self.purpose!r}")
        if self.token_vectors is not None:
            n_markers = len(TOKEN_RE.findall(self.prompt))
            if n_markers != len(self.token_vectors):
                raise ValueError(
                    f"prompt has {n_markers} token placeholders but {len(self.token_vectors)} vectors were bound"
                )

    @property
    def prompt_sha256(self) -> str:
        return prompt_sha256(self.prompt)


@dataclass(frozen=True)
class BackendResponse:
    text: str
    prompt_chars: int
    response_chars: int
    latency: float = 0.0

    @classmethod
    def make(cls, request: BackendRequest, text: str, latency: float = 0.0) -> "BackendResponse":
        text = text[: request.decode.max_chars]
        return cls(text, len(request.prompt), len(text), latency)


class Backend(Protocol):
    differentiable: bool

    def complete(self, request: BackendRequest) -> BackendResponse: ...


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


# --- answer matching ---------------------------------------------------------

_PUNCT_RE = re.compile(r"[^\w\s&]|_")
_WS_RE = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    """Lowercase, turn punctuation other than ``&`` into spaces, collapse whitespace."""
    return _WS_RE.sub(" ", _PUNCT_RE.sub(" ", text.lower())).strip()


class LabelVerbalizer:
    def __init__(self, label_names: Sequence[str]):
        self.label_names = tuple(label_names)
        self.normalized = tuple(normalize_answer(n) for n in self.label_names)
        if len(set(self.normalized)) != len(self.normalized):
            raise ValueError("label names collide after normalization")
        if any(not n for n in self.normalized):
            raise ValueError("label name normalizes to the empty string")
        self._longest_first = sorted(range(len(self.normalized)), key=lambda i: (-len(self.normalized[i]), i))

    def match(self, text: str) -> int | None:
        return match_answer(text, self)


def match_answer(text: str, verb: LabelVerbalizer) -> int | None:
    """Map a completion to a label index, or ``None`` when no label name occurs.

    Names are scanned longest first and claim their spans, so a shorter name
    only matches outside longer matches. Among the names found, the one whose
    occurrence starts earliest wins.
    """
    padded = f" {normalize_answer(text)} "
    claimed: list[tuple[int, int]] = []
    best: tuple[int, int] | None = None  # (start, label)
    for idx in verb._longest_first:
        needle = f" {verb.normalized[idx]} "
        start = padded.find(needle)
        found = []
        while start >= 0:
            # compare spans without their padding spaces
            lo, hi = start + 1, start + len(needle) - 1
            if not any(lo < c_hi and c_lo < hi for c_lo, c_hi in claimed):
                found.append((lo, hi))
            start = padded.find(needle, start + 1)
        claimed.extend(found)
        if found and (best is None or found[0][0] < best[0]):
            best = (found[0][0], idx)
    return None if best is None else best[1]


# --- mock backend ------------------------------------------------------------


def _majority(labels: Iterable[int], tie: str) -> int | None:
    """Most common label; ties go to the smallest index or the first seen."""
    labels = list(labels)
    if not labels:
        return None
    counts = Counter(labels)
    top = max(counts.values())
    winners = [y for y in counts if counts[y] == top]
    if tie == "smallest":
        return min(winners)
    return next(y for y in labels if y in winners)


class MockBackend:
    """Deterministic evidence-voting stand-in for an LLM.

    Retrieval summaries name the majority true label of the evidence nodes
    listed in the prompt (ties to the smallest label index). Refinements and
    final answers vote over the labels named by the summaries present in the
    prompt, ties going to the label named first.
    """

    differentiable = False

    def __init__(self, graph: TextAttributedGraph):
        self.graph = graph
        self.verbalizer = LabelVerbalizer(graph.label_names)

    def complete(self, request: BackendRequest) -> BackendResponse:
        handler = getattr(self, f"_{request.purpose}")
        return BackendResponse.make(request, handler(request))

    # purpose handlers
    def _thought(self, request: BackendRequest) -> str:
        who = "the target node" if request.node_id is None else f"node {request.node_id}"
        return f"I should classify {who} using its own text and the graph evidence gathered so far."

    def _evidence_label(self, request: BackendRequest, kind: str) -> str:
        ids = [int(m) for m in EVIDENCE_NODE_RE.findall(request.prompt)]
        n = self.graph.node_count
        bad = [i for i in ids if i >= n]
        if bad:
            err = MalformedEvidenceError(f"evidence block references unknown node(s) {bad}")
            err.purpose = request.purpose
            raise err
        labels = [self.graph.labels[i] for i in ids if self.graph.labels[i] is not None]
        winner = _majority(labels, tie="smallest")
        lead = "This subgraph" if kind == "topo" else "This node set"
        if winner is None:
            return f"{lead} contains no usable evidence nodes, so no category can be inferred."
        name = self.graph.label_names[winner]
        return f"{lead} features {len(ids)} nodes that are mostly about {name}, so the category might be {name}."

    def _topo_summary(self, request: BackendRequest) -> str:
        return self._evidence_label(request, "topo")

    def _sem_summary(self, request: BackendRequest) -> str:
        return self._evidence_label(request, "sem")

    def summary_votes(self, prompt: str) -> list[int]:
        """Labels named by ``category might be`` in each summary line of ``prompt``."""
        votes = []
        names = self.graph.label_names
        order = sorted(range(len(names)), key=lambda i: -len(names[i]))
        for line in SUMMARY_LINE_RE.findall(prompt):
            for m in MIGHT_BE_RE.finditer(line):
                rest = line[m.end():].lower()
                hit = next((i for i in order if rest.startswith(names[i].lower())), None)
                if hit is not None:
                    votes.append(hit)
                    break
        return votes

    def _refinement(self, request: BackendRequest) -> str:
        winner = _majority(self.summary_votes(request.prompt), tie="first")
        if winner is None:
            return "So far the discussion relies only on the node text itself and no graph evidence has been collected."
        name = self.graph.label_names[winner]
        return f"The evidence gathered so far mainly points to {name}, so the category might be {name}."

    def _final(self, request: BackendRequest) -> str:
        winner = _majority(self.summary_votes(request.prompt), tie="first")
        return self.graph.label_names[0 if winner is None else winner]

    def _search_query(self, request: BackendRequest) -> str:
        if request.node_id is None:
            return "graph node topic"
        return " ".join(self.graph.node_texts[request.node_id].title.split()[:5])


class MockScoringBackend:
    """Differentiable scorer: cosine-softmax of mean graph token vs label embeddings.

    Final-answer requests are answered with the argmax label; other purposes
    go to ``fallback`` when one is given.
    """

    differentiable = True

    def __init__(self, label_names: Sequence[str], label_embeddings, tau: float = 0.1, fallback=None):
        self.label_names = tuple(label_names)
        self.label_embeddings = np.array(label_embeddings, dtype=np.float64)
        self.label_embeddings.setflags(write=False)
        if self.label_embeddings.shape[0] != len(self.label_names):
            raise ValueError("one label embedding per label name is required")
        self.tau = tau
        self.fallback = fallback

    def score(self, tokens) -> np.ndarray:
        return score_labels_mock(tokens, self.label_embeddings, self.tau)

    def complete(self, request: BackendRequest) -> BackendResponse:
        if request.purpose == "final" and request.token_vectors is not None:
            p = self.score(request.token_vectors)
            return BackendResponse.make(request, self.label_names[int(np.argmax(p))])
        if self.fallback is None:
            err = BackendError(f"scoring backend cannot answer purpose {request.purpose!r}")
            err.purpose = request.purpose
            raise err
        return self.fallback.complete(request)


# --- replay / recording ------------------------------------------------------


@dataclass(frozen=True)
class TraceTurn:
    purpose: str
    prompt_sha256: str
    response_text: str


def read_trace_script(path: str | Path) -> list[TraceTurn]:
    turns = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                turns.append(TraceTurn(obj["purpose"], obj["prompt_sha256"], obj["response_text"]))
    return turns


def write_trace_script(turns: Iterable[TraceTurn], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in turns:
            rec = {"purpose": t.purpose, "prompt_sha256": t.prompt_sha256, "response_text": t.response_text}
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


class ReplayBackend:
    """Serves recorded responses keyed by (purpose, prompt hash); each turn is used once."""

    differentiable = False

    def __init__(self, turns: Sequence[TraceTurn]):
        self._pending: dict[tuple[str, str], list[str]] = {}
        for t in turns:
            self._pending.setdefault((t.purpose, t.prompt_sha256), []).append(t.response_text)
        self._remaining = len(turns)
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayBackend":
        return cls(read_trace_script(path))

    @property
    def remaining(self) -> int:
        return self._remaining

    def complete(self, request: BackendRequest) -> BackendResponse:
        with self._lock:
            if self._remaining == 0:
                err = ScriptExhaustedError("replay script exhausted")
                err.purpose = request.purpose
                raise err
            queue = self._pending.get((request.purpose, request.prompt_sha256))
            if not queue:
                err = ReplayMismatchError(
                    f"no recorded {request.purpose} turn for prompt {request.prompt_sha256[:12]}"
                )
                err.purpose = request.purpose
                raise err
            text = queue.pop(0)
            self._remaining -= 1
        return BackendResponse.make(request, text)


class RecordingBackend:
    """Wraps another backend and keeps every turn for later replay."""

    def __init__(self, inner):
        self.inner = inner
        self.differentiable = getattr(inner, "differentiable", False)
        self.turns: list[TraceTurn] = []
        self._lock = threading.Lock()

    def complete(self, request: BackendRequest) -> BackendResponse:
        resp = self.inner.complete(request)
        with self._lock:
            self.turns.append(TraceTurn(request.purpose, request.prompt_sha256, resp.text))
        return resp

    def save(self, path: str | Path) -> None:
        write_trace_script(self.turns, path)


# --- HTTP --------------------------------------------------------------------

ENV_ENDPOINT = "GRAPHREACT_ENDPOINT"
ENV_API_KEY = "GRAPHREACT_API_KEY"
ENV_MODEL = "GRAPHREACT_MODEL"


def stub_graph_tokens(prompt: str) -> str:
    """Replace each run of ``<Token i>`` markers with ``[GRAPH_TOKENS:T]``."""
    return TOKEN_RUN_RE.sub(lambda m: f"[GRAPH_TOKENS:{len(TOKEN_RE.findall(m.group(0)))}]", prompt)


class HttpBackend:
    """OpenAI-compatible chat completions client.

    Graph token vectors cannot travel over a text API, so placeholder runs
    are replaced with a textual stub and the vectors are ignored.
    """

    differentiable = False

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        *,
        timeout: float = 60.0,
        retries: int = 3,
        backoff: float = 0.5,
        max_in_flight: int = 4,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._session = session or requests.Session()

    @classmethod
    def from_env(cls, **kwargs) -> "HttpBackend":
        endpoint = os.environ.get(ENV_ENDPOINT)
        if not endpoint:
            raise BackendError(f"{ENV_ENDPOINT} is not set")
        return cls(endpoint, os.environ.get(ENV_MODEL, "default"), os.environ.get(ENV_API_KEY), **kwargs)

    def payload(self, request: BackendRequest) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": stub_graph_tokens(request.prompt)}],
            "temperature": request.decode.temperature,
            "max_tokens": request.decode.max_tokens,
        }

    def complete(self, request: BackendRequest) -> BackendResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = self.payload(request)
        last: Exception | None = None
        start = time.monotonic()
        with self._slots:
            for attempt in range(self.retries + 1):
                if attempt:
                    log.warning("%s request failed (%s); retry %d/%d", request.purpose, last, attempt, self.retries)
                    time.sleep(self.backoff * 2 ** (attempt - 1))
                try:
                    resp = self._session.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
                except (requests.ConnectionError, requests.Timeout) as exc:
                    last = exc
                    continue
                if resp.status_code >= 500 or resp.status_code == 429:
                    last = TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                    continue
                if resp.status_code >= 400:
                    last = TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                    break
                try:
                    text = resp.json()["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    last = TransportError(f"unparseable completion body: {exc}")
                    break
                return BackendResponse.make(request, str(text), time.monotonic() - start)
        err = last if isinstance(last, TransportError) else TransportError(f"request failed: {last}")
        err.purpose = request.purpose
        raise err
