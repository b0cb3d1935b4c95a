"""Seeded stochastic-block-model text-attributed graphs for desk-scale runs."""
from __future__ import annotations

import numpy as np

from .actions import Document, DocumentIndex
from .embed_store import EmbeddingMatrix
from .graph_store import DatasetSplit, NodeText, TextAttributedGraph

CLASS_NAMES = (
    "Astronomy", "Botany", "Chemistry", "Dance", "Economics", "Folklore",
    "Geology", "Linguistics", "Music", "Navigation", "Oceanography", "Poetry",
)
FILLER = "general interest matters"
NOISE_SIGMA = 0.3


def class_names(c: int) -> list[str]:
    if c <= len(CLASS_NAMES):
        return list(CLASS_NAMES[:c])
    return list(CLASS_NAMES) + [f"Topic {i}" for i in range(len(CLASS_NAMES), c)]


def generate_synthetic(
    classes: int,
    nodes: int,
    p_in: float,
    p_out: float,
    signal_q: float,
    dim: int,
    seed: int = 0,
) -> tuple[TextAttributedGraph, EmbeddingMatrix, DatasetSplit]:
    """SBM graph, keyword-or-filler node text, noisy one-hot features, half/half split per class.

    Class labels are assigned to ids by a seeded permutation so that id order
    carries no class information.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise ValueError("need 0 <= p_out <= p_in <= 1")
    if not 0.0 <= signal_q <= 1.0:
        raise ValueError("signal_q must lie in [0, 1]")
    if dim < classes:
        raise ValueError("feature dim must be at least the number of classes")
    if nodes < classes:
        raise ValueError("need at least one node per class")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(nodes) % classes)

    iu, ju = np.triu_indices(nodes, k=1)
    probs = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(len(iu)) < probs
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    names = class_names(classes)
    has_keyword = rng.random(nodes) < signal_q
    texts = []
    for i in range(nodes):
        topic = names[labels[i]].lower() if has_keyword[i] else FILLER
        texts.append(NodeText(f"Item {i}", f"A short text about {topic}."))

    feats = np.zeros((nodes, dim))
    feats[np.arange(nodes), labels] = 1.0
    feats += rng.normal(0.0, NOISE_SIGMA, size=(nodes, dim))

    train, evals = [], []
    for c in range(classes):
        members = np.flatnonzero(labels == c)
        half = len(members) // 2
        train.extend(members[:half].tolist())
        evals.extend(members[half:].tolist())
    g = TextAttributedGraph.from_edges(nodes, edges.tolist(), texts, labels.tolist(), names)
    return g, EmbeddingMatrix(feats), DatasetSplit(sorted(train), sorted(evals))


def synthetic_documents(label_names, per_class: int = 3, seed: int = 0) -> DocumentIndex:
    """A small encyclopedia: a few articles per class name plus unrelated filler articles."""
    rng = np.random.default_rng(seed)
    docs = []
    for name in label_names:
        for j in range(per_class):
            docs.append((f"{name} ({j + 1})", f"{name.lower()} is a field of study. Article {j + 1} about {name.lower()}."))
    for j in range(per_class):
        docs.append((f"Miscellany ({j + 1})", "item short text about general interest matters."))
    order = rng.permutation(len(docs))
    return DocumentIndex([Document(i, *docs[k]) for i, k in enumerate(order)])
