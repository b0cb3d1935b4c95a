"""Immutable text-attributed graphs with deterministic traversal."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class GraphFormatError(ValueError):
    """Raised when a dataset directory cannot be parsed or validated."""

    def __init__(self, message: str, path: Path | str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class NodeText:
    title: str
    description: str


@dataclass(frozen=True, eq=False)
class TextAttributedGraph:
    """Undirected graph in CSR form with per-node text and optional labels.

    Construct through :meth:`from_edges` unless the CSR arrays are already
    canonical (sorted, deduplicated, symmetric, loop-free).
    """

    offsets: np.ndarray
    neighbor_array: np.ndarray
    node_texts: tuple[NodeText, ...]
    labels: tuple[int | None, ...]
    label_names: tuple[str, ...]
    _label_array: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        offsets = np.ascontiguousarray(self.offsets, dtype=np.int64)
        nbrs = np.ascontiguousarray(self.neighbor_array, dtype=np.int64)
        offsets.setflags(write=False)
        nbrs.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "neighbor_array", nbrs)
        object.__setattr__(self, "node_texts", tuple(self.node_texts))
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "label_names", tuple(self.label_names))
        self.validate()
        arr = np.array([-1 if y is None else y for y in self.labels], dtype=np.int64)
        arr.setflags(write=False)
        object.__setattr__(self, "_label_array", arr)

    @property
    def node_count(self) -> int:
        return len(self.offsets) - 1

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    @property
    def label_array(self) -> np.ndarray:
        """Labels as int64 with -1 for unlabeled nodes."""
        return self._label_array

    def validate(self) -> None:
        n = len(self.offsets) - 1
        if n < 0:
            raise GraphFormatError("offset array must have at least one entry")
        if len(self.node_texts) != n or len(self.labels) != n:
            raise GraphFormatError("node_texts/labels length must equal node_count")
        if self.offsets[0] != 0 or np.any(np.diff(self.offsets) < 0):
            raise GraphFormatError("offsets must start at 0 and be non-decreasing")
        if self.offsets[-1] != len(self.neighbor_array):
            raise GraphFormatError("last offset must equal neighbor-array length")
        nbrs = self.neighbor_array
        if len(nbrs) and (nbrs.min() < 0 or nbrs.max() >= n):
            raise GraphFormatError("neighbor id out of range")
        owner = np.repeat(np.arange(n, dtype=np.int64), np.diff(self.offsets))
        if np.any(owner == nbrs):
            raise GraphFormatError("self-loop present")
        if len(nbrs) > 1:
            same_row = owner[1:] == owner[:-1]
            if np.any(same_row & (nbrs[1:] <= nbrs[:-1])):
                raise GraphFormatError("neighbor lists must be sorted and duplicate-free")
        # symmetry: the multiset of (u, v) equals the multiset of (v, u)
        fwd = owner * max(n, 1) + nbrs
        rev = nbrs * max(n, 1) + owner
        if not np.array_equal(np.sort(fwd), np.sort(rev)):
            raise GraphFormatError("adjacency is not symmetric")
        c = len(self.label_names)
        for i, y in enumerate(self.labels):
            if y is not None and not (0 <= y < c):
                raise GraphFormatError(f"label {y} of node {i} outside [0, {c})")

    @classmethod
    def from_edges(
        cls,
        node_count: int,
        edges: Iterable[tuple[int, int]],
        node_texts: Sequence[NodeText] | None = None,
        labels: Sequence[int | None] | None = None,
        label_names: Sequence[str] = (),
    ) -> "TextAttributedGraph":
        """Build a canonical graph: symmetrize, drop self-loops, sort, dedupe."""
        pairs = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        if len(pairs) and (pairs.min() < 0 or pairs.max() >= node_count):
            raise GraphFormatError("dangling edge endpoint")
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        both = np.concatenate([pairs, pairs[:, ::-1]])
        if len(both):
            both = np.unique(both, axis=0)  # lexicographic: by src then dst
        counts = np.bincount(both[:, 0], minlength=node_count) if len(both) else np.zeros(node_count, np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        nbrs = both[:, 1] if len(both) else np.zeros(0, np.int64)
        if node_texts is None:
            node_texts = [NodeText(f"Node {i}", "") for i in range(node_count)]
        if labels is None:
            labels = [None] * node_count
        return cls(offsets, nbrs, tuple(node_texts), tuple(labels), tuple(label_names))

    def edge_list(self) -> list[tuple[int, int]]:
        """Each undirected edge once, as (u, v) with u < v, sorted."""
        out = []
        for u in range(self.node_count):
            for v in neighbors(self, u):
                if u < v:
                    out.append((u, v))
        return out

    def structurally_equal(self, other: "TextAttributedGraph") -> bool:
        return (
            np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.neighbor_array, other.neighbor_array)
            and self.node_texts == other.node_texts
            and self.labels == other.labels
            and self.label_names == other.label_names
        )


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple[int, ...]
    eval_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "train_ids", tuple(int(i) for i in self.train_ids))
        object.__setattr__(self, "eval_ids", tuple(int(i) for i in self.eval_ids))
        if set(self.train_ids) & set(self.eval_ids):
            raise GraphFormatError("train and eval splits overlap")

    def check(self, g: TextAttributedGraph) -> None:
        for i in self.train_ids + self.eval_ids:
            if not 0 <= i < g.node_count:
                raise GraphFormatError(f"split id {i} outside graph of {g.node_count} nodes")


def neighbors(g: TextAttributedGraph, v: int) -> list[int]:
    return g.neighbor_array[g.offsets[v] : g.offsets[v + 1]].tolist()


def bfs_first_n(g: TextAttributedGraph, v: int, n: int) -> list[int]:
    """First ``n`` nodes visited by BFS from ``v``, excluding ``v``.

    Frontiers are expanded in ascending-id order, so the output is fully
    determined by the graph. Returns fewer than ``n`` nodes when fewer are
    reachable.
    """
    if n <= 0:
        return []
    seen = {v}
    out: list[int] = []
    queue = deque([v])
    offsets, nbrs = g.offsets, g.neighbor_array
    while queue:
        u = queue.popleft()
        for w in nbrs[offsets[u] : offsets[u + 1]].tolist():
            if w in seen:
                continue
            seen.add(w)
            out.append(w)
            if len(out) == n:
                return out
            queue.append(w)
    return out


# --- dataset directory I/O -------------------------------------------------


def _read_jsonl(path: Path) -> list[tuple[int, dict]]:
    if not path.exists():
        raise GraphFormatError("missing file", path)
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphFormatError(f"malformed JSON ({exc.msg})", path, lineno) from None
            if not isinstance(obj, dict):
                raise GraphFormatError("record is not an object", path, lineno)
            rows.append((lineno, obj))
    return rows


def _read_json(path: Path):
    if not path.exists():
        raise GraphFormatError("missing file", path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"malformed JSON ({exc.msg})", path, exc.lineno) from None


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def load_graph(path: str | Path) -> TextAttributedGraph:
    """Load ``nodes.jsonl``, ``edges.jsonl`` and ``labels.json`` from a dataset directory."""
    root = Path(path)
    label_names = _read_json(root / "labels.json")
    if not isinstance(label_names, list) or not all(isinstance(s, str) for s in label_names):
        raise GraphFormatError("labels.json must be an array of strings", root / "labels.json")

    nodes_path = root / "nodes.jsonl"
    records = _read_jsonl(nodes_path)
    by_id: dict[int, tuple[NodeText, int | None]] = {}
    for lineno, obj in records:
        nid = obj.get("id")
        title = obj.get("title")
        desc = obj.get("description")
        label = obj.get("label")
        if not _is_int(nid) or nid < 0:
            raise GraphFormatError("node id must be a non-negative integer", nodes_path, lineno)
        if not isinstance(title, str) or not isinstance(desc, str):
            raise GraphFormatError("title and description must be strings", nodes_path, lineno)
        if label is not None and not _is_int(label):
            raise GraphFormatError("label must be an integer or null", nodes_path, lineno)
        if label is not None and not 0 <= label < len(label_names):
            raise GraphFormatError(
                f"label index {label} out of range [0, {len(label_names)})", nodes_path, lineno
            )
        if nid in by_id:
            raise GraphFormatError(f"duplicate node id {nid}", nodes_path, lineno)
        by_id[nid] = (NodeText(title, desc), label)
    n = len(by_id)
    if set(by_id) != set(range(n)):
        raise GraphFormatError(f"node ids must be exactly 0..{n - 1}", nodes_path)

    edges_path = root / "edges.jsonl"
    edges = []
    for lineno, obj in _read_jsonl(edges_path):
        src, dst = obj.get("src"), obj.get("dst")
        if not _is_int(src) or not _is_int(dst):
            raise GraphFormatError("src and dst must be integers", edges_path, lineno)
        if not (0 <= src < n and 0 <= dst < n):
            raise GraphFormatError(f"dangling edge endpoint ({src}, {dst})", edges_path, lineno)
        edges.append((src, dst))

    texts = [by_id[i][0] for i in range(n)]
    labels = [by_id[i][1] for i in range(n)]
    return TextAttributedGraph.from_edges(n, edges, texts, labels, label_names)


def load_split(path: str | Path, g: TextAttributedGraph | None = None) -> DatasetSplit:
    p = Path(path)
    if p.is_dir():
        p = p / "splits.json"
    obj = _read_json(p)
    if not isinstance(obj, dict) or not isinstance(obj.get("train"), list) or not isinstance(obj.get("eval"), list):
        raise GraphFormatError('splits.json must be {"train": [...], "eval": [...]}', p)
    if not all(_is_int(i) for i in obj["train"] + obj["eval"]):
        raise GraphFormatError("split ids must be integers", p)
    split = DatasetSplit(obj["train"], obj["eval"])
    if g is not None:
        split.check(g)
    return split


def save_graph(g: TextAttributedGraph, path: str | Path, split: DatasetSplit | None = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with (root / "nodes.jsonl").open("w", encoding="utf-8", newline="\n") as fh:
        for i, (text, y) in enumerate(zip(g.node_texts, g.labels)):
            rec = {"id": i, "title": text.title, "description": text.description, "label": y}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    with (root / "edges.jsonl").open("w", encoding="utf-8", newline="\n") as fh:
        for u, v in g.edge_list():
            fh.write(json.dumps({"src": u, "dst": v}) + "\n")
    (root / "labels.json").write_text(json.dumps(list(g.label_names), ensure_ascii=False) + "\n", encoding="utf-8")
    if split is not None:
        body = {"train": list(split.train_ids), "eval": list(split.eval_ids)}
        (root / "splits.json").write_text(json.dumps(body) + "\n", encoding="utf-8")
