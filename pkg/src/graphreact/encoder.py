"""Mean-aggregator message-passing encoder, token projector and its trainers.

Everything here is plain numpy with hand-written gradients. The encoder is
frozen at adaptation time; only the projector is optimized against a
differentiable scoring backend.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .embed_store import EmbeddingMatrix
from .graph_store import DatasetSplit, TextAttributedGraph


class UnsupportedBackendError(TypeError):
    """Training was requested against a backend that cannot provide gradients."""


# --- parameters --------------------------------------------------------------


@dataclass
class SageLayer:
    w_self: np.ndarray  # (d_out, d_in)
    w_neigh: np.ndarray  # (d_out, d_in)

    @property
    def d_in(self) -> int:
        return self.w_self.shape[1]

    @property
    def d_out(self) -> int:
        return self.w_self.shape[0]


@dataclass
class SageParams:
    layers: list[SageLayer]
    activate_last: bool = False

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("encoder needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.w_self.shape != layer.w_neigh.shape:
                raise ValueError(f"layer {i}: w_self and w_neigh shapes differ")
            if not (np.all(np.isfinite(layer.w_self)) and np.all(np.isfinite(layer.w_neigh))):
                raise ValueError(f"layer {i}: non-finite weights")
            if i and layer.d_in != self.layers[i - 1].d_out:
                raise ValueError(f"layer {i}: d_in {layer.d_in} != previous d_out {self.layers[i - 1].d_out}")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"sage.{i}.w_self"] = layer.w_self
            out[f"sage.{i}.w_neigh"] = layer.w_neigh
        return out

    def copy(self) -> "SageParams":
        return SageParams(
            [SageLayer(l.w_self.copy(), l.w_neigh.copy()) for l in self.layers], self.activate_last
        )


@dataclass
class Projector:
    weight: np.ndarray  # (T * d_tok, d_enc)
    bias: np.ndarray  # (T * d_tok,)
    num_tokens: int
    d_tok: int

    def __post_init__(self) -> None:
        if self.num_tokens < 1:
            raise ValueError("projector needs at least one graph token")
        rows = self.num_tokens * self.d_tok
        if self.weight.ndim != 2 or self.weight.shape[0] != rows or self.bias.shape != (rows,):
            raise ValueError(
                f"projector shapes inconsistent: weight {self.weight.shape}, bias {self.bias.shape}, "
                f"T={self.num_tokens}, d_tok={self.d_tok}"
            )

    @property
    def d_enc(self) -> int:
        return self.weight.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"proj.weight": self.weight, "proj.bias": self.bias}

    def copy(self) -> "Projector":
        return Projector(self.weight.copy(), self.bias.copy(), self.num_tokens, self.d_tok)

    def pooled_affine(self) -> tuple[np.ndarray, np.ndarray]:
        """Weight and bias of the map h -> mean over the T tokens."""
        w = self.weight.reshape(self.num_tokens, self.d_tok, self.d_enc).mean(axis=0)
        b = self.bias.reshape(self.num_tokens, self.d_tok).mean(axis=0)
        return w, b


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_sage_params(
    dims: Sequence[int], seed: int = 0, activate_last: bool = False
) -> SageParams:
    """``dims`` lists layer widths input-first, e.g. ``[d_x, 64, 64, 64]`` for 3 layers."""
    if len(dims) < 2:
        raise ValueError("dims must hold at least input and output width")
    rng = np.random.default_rng(seed)
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        layers.append(SageLayer(_uniform(rng, (d_out, d_in), d_in), _uniform(rng, (d_out, d_in), d_in)))
    return SageParams(layers, activate_last)


def init_projector(d_enc: int, num_tokens: int = 5, d_tok: int = 32, seed: int = 0) -> Projector:
    rng = np.random.default_rng([seed, 1])
    rows = num_tokens * d_tok
    return Projector(_uniform(rng, (rows, d_enc), d_enc), _uniform(rng, (rows,), d_enc), num_tokens, d_tok)


# --- forward / backward ------------------------------------------------------


def mean_adjacency(g: TextAttributedGraph) -> sp.csr_matrix:
    """Row-stochastic adjacency; rows of isolated nodes are all zero."""
    deg = np.diff(g.offsets)
    inv = np.zeros(len(deg))
    inv[deg > 0] = 1.0 / deg[deg > 0]
    data = np.repeat(inv, deg)
    n = g.node_count
    return sp.csr_matrix((data, g.neighbor_array, g.offsets), shape=(n, n))


@dataclass
class _ForwardCache:
    adj: sp.csr_matrix
    inputs: list[np.ndarray] = field(default_factory=list)  # H^{l-1}
    aggregated: list[np.ndarray] = field(default_factory=list)  # mean of neighbors of H^{l-1}
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activation
    raw_out: np.ndarray | None = None
    normalized: bool = False


def _forward(adj, x: np.ndarray, p: SageParams, normalize: bool, cache: _ForwardCache | None) -> np.ndarray:
    h = x
    last = p.num_layers - 1
    for i, layer in enumerate(p.layers):
        agg = adj @ h
        z = h @ layer.w_self.T + agg @ layer.w_neigh.T
        if cache is not None:
            cache.inputs.append(h)
            cache.aggregated.append(agg)
            cache.pre.append(z)
        h = np.maximum(z, 0.0) if (i < last or p.activate_last) else z
    if cache is not None:
        cache.raw_out = h
        cache.normalized = normalize
    if normalize:
        norms = np.linalg.norm(h, axis=1, keepdims=True)
        h = h / np.where(norms > 0, norms, 1.0)
    return h


def sage_forward_array(
    g: TextAttributedGraph, x: np.ndarray, p: SageParams, normalize: bool = False
) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != g.node_count:
        raise ValueError(f"feature matrix shape {x.shape} does not match {g.node_count} nodes")
    if x.shape[1] != p.d_in:
        raise ValueError(f"feature dim {x.shape[1]} != encoder input dim {p.d_in}")
    return _forward(mean_adjacency(g), x, p, normalize, None)


def sage_forward(
    g: TextAttributedGraph, x: EmbeddingMatrix, p: SageParams, normalize: bool = False
) -> EmbeddingMatrix:
    """Run every layer: ``h_v <- act(W_self h_v + W_neigh mean(h_u, u in N(v)))``.

    An empty neighborhood aggregates to the zero vector. With ``normalize``
    the final rows are scaled to unit length (zero rows stay zero).
    """
    return EmbeddingMatrix(sage_forward_array(g, x.data, p, normalize))


def sage_forward_with_cache(g, x: np.ndarray, p: SageParams, normalize: bool = False):
    cache = _ForwardCache(mean_adjacency(g))
    h = _forward(cache.adj, np.asarray(x, dtype=np.float64), p, normalize, cache)
    return h, cache


def sage_backward(cache: _ForwardCache, p: SageParams, d_out: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients ``(dW_self, dW_neigh)`` per layer given dLoss/dOutput."""
    d = d_out
    if cache.normalized:
        h = cache.raw_out
        norms = np.linalg.norm(h, axis=1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)
        hat = h / safe
        d = (d - hat * np.sum(hat * d, axis=1, keepdims=True)) / safe
        d = np.where(norms > 0, d, 0.0)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * p.num_layers  # type: ignore[list-item]
    last = p.num_layers - 1
    adj_t = cache.adj.T.tocsr()
    for i in range(last, -1, -1):
        layer = p.layers[i]
        z = cache.pre[i]
        dz = d * (z > 0) if (i < last or p.activate_last) else d
        grads[i] = (dz.T @ cache.inputs[i], dz.T @ cache.aggregated[i])
        if i:
            d = dz @ layer.w_self + adj_t @ (dz @ layer.w_neigh)
    return grads


def project_tokens(h: np.ndarray, proj: Projector) -> np.ndarray:
    """Affine map of one encoder vector to ``(T, d_tok)`` graph tokens."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (proj.d_enc,):
        raise ValueError(f"encoder vector shape {h.shape} != ({proj.d_enc},)")
    return (proj.weight @ h + proj.bias).reshape(proj.num_tokens, proj.d_tok)


# --- losses ------------------------------------------------------------------


def cosine_cross_entropy(
    anchors: np.ndarray, keys: np.ndarray, targets: np.ndarray, tau: float
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``softmax(cos(anchor_i, key_j) / tau)`` against ``targets``.

    Returns the loss and its gradient with respect to ``anchors``. Zero-norm
    vectors have cosine 0 and receive a zero gradient.
    """
    a = np.asarray(anchors, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    b = a.shape[0]
    a_norm = np.linalg.norm(a, axis=1, keepdims=True)
    k_norm = np.linalg.norm(k, axis=1, keepdims=True)
    a_hat = a / np.where(a_norm > 0, a_norm, 1.0)
    k_hat = k / np.where(k_norm > 0, k_norm, 1.0)
    logits = a_hat @ k_hat.T / tau
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = float(-logp[rows, targets].mean())
    dlogits = np.exp(logp)
    dlogits[rows, targets] -= 1.0
    dlogits /= b
    d_hat = dlogits @ k_hat / tau
    grad = (d_hat - a_hat * np.sum(a_hat * d_hat, axis=1, keepdims=True)) / np.where(a_norm > 0, a_norm, 1.0)
    grad = np.where(a_norm > 0, grad, 0.0)
    return loss, grad


def infonce_loss(graph_reps, text_reps, tau: float) -> tuple[float, np.ndarray]:
    """Graph-to-text InfoNCE with in-batch negatives; row ``i`` of each is a positive pair."""
    g = np.asarray(graph_reps, dtype=np.float64)
    t = np.asarray(text_reps, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise ValueError("need at least one graph representation")
    if g.shape != t.shape:
        raise ValueError(f"graph/text batch shapes differ: {g.shape} vs {t.shape}")
    if not tau > 0:
        raise ValueError("temperature must be positive")
    return cosine_cross_entropy(g, t, np.arange(g.shape[0]), tau)


def score_labels_mock(tokens, label_embs, tau: float) -> np.ndarray:
    """``softmax(cos(mean(tokens), label_c) / tau)`` over the C labels."""
    u = np.asarray(tokens, dtype=np.float64).mean(axis=0)
    labels = np.asarray(label_embs, dtype=np.float64)
    if labels.ndim != 2 or labels.shape[0] < 1:
        raise ValueError("need at least one label embedding")
    if not tau > 0:
        raise ValueError("temperature must be positive")
    un = np.linalg.norm(u)
    ln = np.linalg.norm(labels, axis=1)
    denom = un * ln
    cos = np.where(denom > 0, labels @ u / np.where(denom > 0, denom, 1.0), 0.0)
    z = cos / tau
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def label_nll(tokens, label_embs, y: int, tau: float) -> tuple[float, np.ndarray]:
    """``-log p(y)`` under :func:`score_labels_mock` and its gradient w.r.t. each token."""
    tok = np.asarray(tokens, dtype=np.float64)
    u = tok.mean(axis=0, keepdims=True)
    loss, du = cosine_cross_entropy(u, label_embs, np.array([y]), tau)
    return loss, np.repeat(du / tok.shape[0], tok.shape[0], axis=0)


# --- optimization ------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 200
    epochs: int = 10
    batch_size: int = 64
    tau: float = 0.07
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    train_encoder: bool = False
    normalize: bool = True


@dataclass
class TrainState:
    """Adam moments keyed by tensor name."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], config: TrainConfig) -> "TrainState":
        return cls(
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            seed=config.seed,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )

    def apply(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """One in-place Adam update of every tensor in ``grads``."""
        self.step += 1
        if self.lr == 0:
            return
        t = self.step
        for name, grad in grads.items():
            if self.m[name].shape != grad.shape:
                raise ValueError(f"accumulator shape mismatch for {name}")
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
            m_hat = self.m[name] / (1 - self.beta1**t)
            v_hat = self.v[name] / (1 - self.beta2**t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out


@dataclass
class TrainResult:
    projector: Projector
    params: SageParams
    losses: list[float]
    state: TrainState


def pooled_gradients(
    h: np.ndarray, d_pooled: np.ndarray, proj: Projector
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backprop through ``pooled = mean_t(W_t h + b_t)``: returns dW, db, dh."""
    t = proj.num_tokens
    dw_block = d_pooled.T @ h / t  # (d_tok, d_enc)
    db_block = d_pooled.sum(axis=0) / t
    dw = np.tile(dw_block, (t, 1))
    db = np.tile(db_block, t)
    w_bar, _ = proj.pooled_affine()
    return dw, db, d_pooled @ w_bar


def pooled_tokens(h: np.ndarray, proj: Projector) -> np.ndarray:
    w_bar, b_bar = proj.pooled_affine()
    return h @ w_bar.T + b_bar


def _check_dims(x: EmbeddingMatrix, g: TextAttributedGraph, proj: Projector, params: SageParams) -> None:
    if x.rows != g.node_count:
        raise ValueError(f"features have {x.rows} rows, graph has {g.node_count} nodes")
    if params.d_out != proj.d_enc:
        raise ValueError(f"encoder output {params.d_out} != projector input {proj.d_enc}")


def projector_nll(
    h: np.ndarray, y: np.ndarray, proj: Projector, label_embs: np.ndarray, tau: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean NLL over rows of ``h`` and gradients w.r.t. projector weight and bias."""
    u = pooled_tokens(h, proj)
    loss, du = cosine_cross_entropy(u, label_embs, y, tau)
    dw, db, _ = pooled_gradients(h, du, proj)
    return loss, dw, db


def train_projector_nll(
    g: TextAttributedGraph,
    x: EmbeddingMatrix,
    split: DatasetSplit,
    proj: Projector,
    params: SageParams,
    config: TrainConfig,
    scorer,
) -> TrainResult:
    """Fit the projector by full-batch Adam on the label NLL of the train nodes.

    ``scorer`` must be differentiable (see ``backend.MockScoringBackend``);
    the encoder and the scorer's label embeddings are never modified.
    """
    if not getattr(scorer, "differentiable", False):
        raise UnsupportedBackendError(
            f"{type(scorer).__name__} is inference-only; projector training needs a differentiable scorer"
        )
    _check_dims(x, g, proj, params)
    ids = np.array([i for i in split.train_ids if g.labels[i] is not None], dtype=np.int64)
    if len(ids) == 0:
        raise ValueError("no labeled training nodes")
    h = sage_forward_array(g, x.data, params, normalize=config.normalize)[ids]
    y = g.label_array[ids]
    label_embs = np.asarray(scorer.label_embeddings, dtype=np.float64)
    tau = scorer.tau

    proj = proj.copy()
    tensors = proj.tensors()
    state = TrainState.for_params(tensors, config)
    losses = []
    for _ in range(config.steps):
        loss, dw, db = projector_nll(h, y, proj, label_embs, tau)
        losses.append(loss)
        state.apply(tensors, {"proj.weight": dw, "proj.bias": db})
    losses.append(projector_nll(h, y, proj, label_embs, tau)[0])
    return TrainResult(proj, params, losses, state)


def contrastive_gradients(
    h: np.ndarray, text: np.ndarray, proj: Projector, tau: float
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """InfoNCE loss of one batch and gradients w.r.t. projector weight, bias and ``h``."""
    pooled = pooled_tokens(h, proj)
    loss, dpool = infonce_loss(pooled, text, tau)
    dw, db, dh = pooled_gradients(h, dpool, proj)
    return loss, dw, db, dh


def pretrain_contrastive(
    g: TextAttributedGraph,
    x: EmbeddingMatrix,
    text_embs: EmbeddingMatrix,
    proj: Projector,
    params: SageParams,
    config: TrainConfig,
) -> TrainResult:
    """Align pooled graph tokens with per-node text embeddings by mini-batch InfoNCE.

    Only the projector trains unless ``config.train_encoder`` is set. The
    recorded loss per epoch is the size-weighted mean of its batch losses.
    """
    _check_dims(x, g, proj, params)
    n = g.node_count
    if config.batch_size > n:
        raise ValueError(f"batch size {config.batch_size} exceeds node count {n}")
    if config.batch_size < 1:
        raise ValueError("batch size must be positive")
    if text_embs.rows != n or text_embs.dim != proj.d_tok:
        raise ValueError(f"text embeddings must be {n}x{proj.d_tok}, got {text_embs.rows}x{text_embs.dim}")
    text = text_embs.data.astype(np.float64)
    proj = proj.copy()
    params = params.copy() if config.train_encoder else params
    tensors = proj.tensors()
    if config.train_encoder:
        tensors.update(params.tensors())
    state = TrainState.for_params(tensors, config)
    rng = np.random.default_rng(config.seed)
    feats = x.data.astype(np.float64)

    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        if not config.train_encoder:
            h_all = sage_forward_array(g, feats, params, normalize=config.normalize)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            if config.train_encoder:
                h_all, cache = sage_forward_with_cache(g, feats, params, normalize=config.normalize)
            loss, dw, db, dh = contrastive_gradients(h_all[batch], text[batch], proj, config.tau)
            grads = {"proj.weight": dw, "proj.bias": db}
            if config.train_encoder:
                d_out = np.zeros_like(h_all)
                np.add.at(d_out, batch, dh)
                for i, (dws, dwn) in enumerate(sage_backward(cache, params, d_out)):
                    grads[f"sage.{i}.w_self"] = dws
                    grads[f"sage.{i}.w_neigh"] = dwn
            state.apply(tensors, grads)
            total += loss * len(batch)
        losses.append(total / n)
    return TrainResult(proj, params, losses, state)


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"EMB v1 checkpoint dtype=f32"


def save_checkpoint(
    path: str | Path,
    params: SageParams | None = None,
    projector: Projector | None = None,
    state: TrainState | None = None,
) -> None:
    """Write tensors as little-endian f32 behind a one-line JSON manifest."""
    tensors: dict[str, np.ndarray] = {}
    meta: dict = {}
    if params is not None:
        tensors.update(params.tensors())
        meta["sage"] = {"layers": params.num_layers, "activate_last": params.activate_last}
    if projector is not None:
        tensors.update(projector.tensors())
        meta["proj"] = {"num_tokens": projector.num_tokens, "d_tok": projector.d_tok}
    if state is not None:
        tensors.update(state.tensors())
        meta["adam"] = {
            "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
            "eps": state.eps, "seed": state.seed, "step": state.step,
        }
    manifest = {"meta": meta, "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for arr in tensors.values():
            fh.write(np.asarray(arr, dtype="<f4").tobytes(order="C"))


def load_checkpoint(path: str | Path) -> tuple[SageParams | None, Projector | None, TrainState | None]:
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    second = raw.find(b"\n", first + 1)
    if first < 0 or second < 0 or raw[:first] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    manifest = json.loads(raw[first + 1 : second])
    payload = memoryview(raw)[second + 1 :]
    tensors: dict[str, np.ndarray] = {}
    pos = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        chunk = payload[pos : pos + 4 * count]
        if len(chunk) != 4 * count:
            raise ValueError(f"{path}: truncated tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
        pos += 4 * count
    if pos != len(payload):
        raise ValueError(f"{path}: trailing bytes after last tensor")
    meta = manifest["meta"]

    params = None
    if "sage" in meta:
        layers = [
            SageLayer(tensors[f"sage.{i}.w_self"], tensors[f"sage.{i}.w_neigh"])
            for i in range(meta["sage"]["layers"])
        ]
        params = SageParams(layers, meta["sage"]["activate_last"])
    projector = None
    if "proj" in meta:
        projector = Projector(
            tensors["proj.weight"], tensors["proj.bias"], meta["proj"]["num_tokens"], meta["proj"]["d_tok"]
        )
    state = None
    if "adam" in meta:
        a = meta["adam"]
        state = TrainState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["seed"], a["step"])
        for name, arr in tensors.items():
            if name.startswith("adam.m."):
                state.m[name[len("adam.m."):]] = arr
            elif name.startswith("adam.v."):
                state.v[name[len("adam.v."):]] = arr
    return params, projector, state


def write_loss_csv(losses: Sequence[float], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([i, repr(float(loss))])
