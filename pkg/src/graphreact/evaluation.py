"""Metrics, multi-seed evaluation, and the ablation and sweep harnesses."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .actions import DocumentIndex, Toggles
from .embed_store import EmbeddingMatrix
from .encoder import Projector, SageParams, init_projector, init_sage_params, sage_forward_array
from .engine import EpisodeError, RunConfig, TraceRecord, run_episode
from .graph_store import DatasetSplit, TextAttributedGraph
from .prompting import PromptTemplateSet

ABLATION_VARIANTS: dict[str, Toggles] = {
    "V1": Toggles(tr=False, sr=False, cf=False),
    "V2": Toggles(tr=True, sr=False, cf=False),
    "V3": Toggles(tr=False, sr=True, cf=False),
    "V4": Toggles(tr=True, sr=True, cf=False),
    "V5": Toggles(tr=False, sr=False, cf=True),
    "full": Toggles(tr=True, sr=True, cf=True),
}
SWEEP_AXES = ("K", "N", "M", "S")


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


def classification_metrics(
    y_true: Sequence[int], y_pred: Sequence[int | None]
) -> tuple[float, float, dict[int, ClassScores]]:
    """Accuracy, macro-F1 and per-class scores.

    ``None`` predictions (unmatched answers) are wrong and count as a miss for
    the true class only. Macro-F1 averages over every class that occurs in
    the truth or the predictions; an undefined F1 is 0.
    """
    if len(y_true) != len(y_pred):
        raise ValueError("truth and prediction lengths differ")
    if not y_true:
        raise ValueError("no predictions to score")
    classes = sorted(set(y_true) | {p for p in y_pred if p is not None})
    correct = sum(1 for t, p in zip(y_true, y_pred) if p == t)
    per_class = {}
    for c in classes:
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per_class[c] = ClassScores(prec, rec, f1, tp + fn)
    macro = sum(s.f1 for s in per_class.values()) / len(per_class)
    return correct / len(y_true), macro, per_class


@dataclass
class MetricsReport:
    seeds: list[int]
    accuracy: list[float]
    macro_f1: list[float]
    per_class: dict[int, ClassScores]
    unmatched: int = 0
    errors: int = 0
    n_eval: int = 0
    traces: list[TraceRecord] = field(default_factory=list, repr=False)

    @property
    def accuracy_mean(self) -> float:
        return float(np.mean(self.accuracy))

    @property
    def accuracy_std(self) -> float:
        return float(np.std(self.accuracy))

    @property
    def macro_f1_mean(self) -> float:
        return float(np.mean(self.macro_f1))

    @property
    def macro_f1_std(self) -> float:
        return float(np.std(self.macro_f1))

    def rows(self) -> list[dict]:
        return [
            {"seed": s, "accuracy": a, "macro_f1": f}
            for s, a, f in zip(self.seeds, self.accuracy, self.macro_f1)
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "accuracy", "macro_f1"])
        for r in self.rows():
            w.writerow([r["seed"], f"{r['accuracy']:.6f}", f"{r['macro_f1']:.6f}"])
        w.writerow(["mean", f"{self.accuracy_mean:.6f}", f"{self.macro_f1_mean:.6f}"])
        w.writerow(["std", f"{self.accuracy_std:.6f}", f"{self.macro_f1_std:.6f}"])
        return buf.getvalue()

    def traces_jsonl(self) -> str:
        return "".join(t.to_json() + "\n" for t in self.traces)


def format_table(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """Left-aligned plain-text table."""
    rows = [[str(c) for c in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


@dataclass
class SeedModel:
    """Per-seed encoder, projector and derived representations."""

    params: SageParams | None
    projector: Projector
    encoded: np.ndarray
    semantic: EmbeddingMatrix


def build_seed_model(
    g: TextAttributedGraph,
    x: EmbeddingMatrix,
    config: RunConfig,
    seed: int,
    params: SageParams | None = None,
    projector: Projector | None = None,
) -> SeedModel:
    if params is None:
        dims = [x.dim] + [config.hidden_dim] * config.layers
        params = init_sage_params(dims, seed=seed)
    if projector is None:
        projector = init_projector(params.d_out, config.T, config.d_tok, seed=seed)
    encoded = sage_forward_array(g, x.data, params, normalize=config.normalize)
    return SeedModel(params, projector, encoded, EmbeddingMatrix(encoded))


def evaluate(
    g: TextAttributedGraph,
    split: DatasetSplit,
    config: RunConfig,
    backend,
    templates: PromptTemplateSet,
    x: EmbeddingMatrix,
    *,
    index: DocumentIndex | None = None,
    params: SageParams | None = None,
    projector: Projector | None = None,
    semantic: EmbeddingMatrix | None = None,
    workers: int = 1,
    keep_traces: bool = True,
    backend_factory: Callable[[int], object] | None = None,
) -> MetricsReport:
    """Run an episode per eval node and seed, then aggregate.

    Seeds drive encoder/projector initialization when ``params``/``projector``
    are not supplied. Semantic retrieval uses the encoder output unless
    ``semantic`` is given. Failed episodes and unmatched answers count as wrong.
    """
    eval_ids = sorted(i for i in split.eval_ids if g.labels[i] is not None)
    if not eval_ids:
        raise ValueError("eval split has no labeled nodes")
    accs, f1s = [], []
    all_true: list[int] = []
    all_pred: list[int | None] = []
    traces: list[TraceRecord] = []
    unmatched = errors = 0
    for seed in config.seeds:
        model = build_seed_model(g, x, config, seed, params, projector)
        sem = semantic if semantic is not None else model.semantic
        be = backend_factory(seed) if backend_factory is not None else backend

        def one(v: int):
            try:
                return run_episode(
                    g, x, sem, v, model.projector, model.params, config, be, templates,
                    encoded=model.encoded, index=index, seed=seed,
                )
            except EpisodeError as exc:
                return None, exc.trace

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = dict(zip(eval_ids, pool.map(one, eval_ids)))
        else:
            results = {v: one(v) for v in eval_ids}
        y_true, y_pred = [], []
        for v in eval_ids:
            label, trace = results[v]
            y_true.append(g.labels[v])
            y_pred.append(label)
            if trace.error is not None:
                errors += 1
            elif label is None:
                unmatched += 1
            if keep_traces:
                traces.append(trace)
        acc, f1, _ = classification_metrics(y_true, y_pred)
        accs.append(acc)
        f1s.append(f1)
        all_true += y_true
        all_pred += y_pred
    _, _, per_class = classification_metrics(all_true, all_pred)
    return MetricsReport(
        list(config.seeds), accs, f1s, per_class, unmatched, errors, len(eval_ids), traces
    )


@dataclass
class AblationRow:
    name: str
    toggles: Toggles
    report: MetricsReport


def run_ablation(
    g: TextAttributedGraph,
    split: DatasetSplit,
    config: RunConfig,
    backend,
    templates: PromptTemplateSet,
    x: EmbeddingMatrix,
    variants: dict[str, Toggles] | None = None,
    **eval_kwargs,
) -> list[AblationRow]:
    """Evaluate each toggle variant with everything else in ``config`` fixed."""
    variants = ABLATION_VARIANTS if variants is None else variants
    rows = []
    for name, toggles in variants.items():
        toggles = replace(toggles, search=config.toggles.search and toggles.search)
        cfg = replace(config, toggles=toggles)
        rows.append(AblationRow(name, toggles, evaluate(g, split, cfg, backend, templates, x, **eval_kwargs)))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "TR", "SR", "CF", "accuracy_mean", "accuracy_std", "macro_f1_mean", "macro_f1_std"])
    for r in rows:
        t, rep = r.toggles, r.report
        w.writerow([
            r.name, int(t.tr), int(t.sr), int(t.cf),
            f"{rep.accuracy_mean:.6f}", f"{rep.accuracy_std:.6f}",
            f"{rep.macro_f1_mean:.6f}", f"{rep.macro_f1_std:.6f}",
        ])
    return buf.getvalue()


def ablation_table(rows: Sequence[AblationRow]) -> str:
    mark = lambda b: "x" if b else "-"  # noqa: E731
    body = [
        (r.name, mark(r.toggles.tr), mark(r.toggles.sr), mark(r.toggles.cf),
         f"{r.report.accuracy_mean:.3f}±{r.report.accuracy_std:.3f}",
         f"{r.report.macro_f1_mean:.3f}±{r.report.macro_f1_std:.3f}")
        for r in rows
    ]
    return format_table(["variant", "TR", "SR", "CF", "accuracy", "macro_f1"], body)


@dataclass
class SweepRow:
    axis: str
    value: int
    seed: int
    accuracy: float
    macro_f1: float


def sweep_config(config: RunConfig, axis: str, value: int) -> RunConfig:
    if axis == "K":
        return config.with_k(value)
    if axis == "N":
        return replace(config, N=value)
    if axis == "M":
        return replace(config, M=value)
    if axis == "S":
        return replace(config, S=value, toggles=replace(config.toggles, search=True))
    raise ValueError(f"invalid sweep axis {axis!r}; choose from {SWEEP_AXES}")


def run_sweep(
    axis: str,
    values: Sequence[int],
    g: TextAttributedGraph,
    split: DatasetSplit,
    config: RunConfig,
    backend,
    templates: PromptTemplateSet,
    x: EmbeddingMatrix,
    **eval_kwargs,
) -> list[SweepRow]:
    """One evaluation per value of ``axis``; the S axis turns the search action on."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"invalid sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if not values:
        raise ValueError("sweep needs at least one value")
    rows = []
    for value in values:
        cfg = sweep_config(config, axis, value)
        rep = evaluate(g, split, cfg, backend, templates, x, **eval_kwargs)
        for seed, acc, f1 in zip(rep.seeds, rep.accuracy, rep.macro_f1):
            rows.append(SweepRow(axis, value, seed, acc, f1))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "seed", "accuracy", "macro_f1"])
    for r in rows:
        w.writerow([r.axis, r.value, r.seed, f"{r.accuracy:.6f}", f"{r.macro_f1:.6f}"])
    return buf.getvalue()


def sweep_table(rows: Sequence[SweepRow]) -> str:
    by_value: dict[int, list[SweepRow]] = {}
    for r in rows:
        by_value.setdefault(r.value, []).append(r)
    body = []
    for value, rs in by_value.items():
        acc = [r.accuracy for r in rs]
        f1 = [r.macro_f1 for r in rs]
        body.append((rs[0].axis, value, f"{np.mean(acc):.3f}±{np.std(acc):.3f}", f"{np.mean(f1):.3f}±{np.std(f1):.3f}"))
    return format_table(["axis", "value", "accuracy", "macro_f1"], body)


# --- synthetic benchmark -----------------------------------------------------

BENCHMARK = {"classes": 4, "nodes": 400, "p_in": 0.2, "p_out": 0.01, "signal_q": 0.3, "dim": 16}


def merge_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Concatenate single-seed reports; per-class scores are averaged over reports, supports summed."""
    if not reports:
        raise ValueError("nothing to merge")
    seeds, accs, f1s, traces = [], [], [], []
    for r in reports:
        seeds += r.seeds
        accs += r.accuracy
        f1s += r.macro_f1
        traces += r.traces
    grouped: dict[int, list[ClassScores]] = {}
    for r in reports:
        for c, sc in r.per_class.items():
            grouped.setdefault(c, []).append(sc)
    merged = {
        c: ClassScores(
            float(np.mean([s.precision for s in ss])),
            float(np.mean([s.recall for s in ss])),
            float(np.mean([s.f1 for s in ss])),
            sum(s.support for s in ss),
        )
        for c, ss in sorted(grouped.items())
    }
    return MetricsReport(
        seeds, accs, f1s, merged,
        sum(r.unmatched for r in reports), sum(r.errors for r in reports),
        reports[0].n_eval, traces,
    )


def _benchmark_seed(seed: int, synth_args: dict | None):
    from .synthetic import generate_synthetic, synthetic_documents

    g, x, split = generate_synthetic(**(synth_args or BENCHMARK), seed=seed)
    return g, x, split, synthetic_documents(g.label_names, seed=seed)


def benchmark_ablation(
    config: RunConfig,
    templates: PromptTemplateSet | None = None,
    variants: dict[str, Toggles] | None = None,
    synth_args: dict | None = None,
    keep_traces: bool = False,
) -> list[AblationRow]:
    """Ablation on freshly generated synthetic graphs, one graph per seed, mock backend."""
    from .backend import MockBackend

    templates = templates or PromptTemplateSet.load("generic")
    per_variant: dict[str, list[AblationRow]] = {}
    for seed in config.seeds:
        g, x, split, index = _benchmark_seed(seed, synth_args)
        cfg = replace(config, seeds=(seed,))
        for row in run_ablation(g, split, cfg, MockBackend(g), templates, x, variants, index=index,
                                keep_traces=keep_traces):
            per_variant.setdefault(row.name, []).append(row)
    return [
        AblationRow(name, rows[0].toggles, merge_reports([r.report for r in rows]))
        for name, rows in per_variant.items()
    ]


def benchmark_sweep(
    axis: str,
    values: Sequence[int],
    config: RunConfig,
    templates: PromptTemplateSet | None = None,
    synth_args: dict | None = None,
) -> list[SweepRow]:
    """Sweep on freshly generated synthetic graphs, one graph per seed, mock backend."""
    from .backend import MockBackend

    templates = templates or PromptTemplateSet.load("generic")
    rows: list[SweepRow] = []
    for seed in config.seeds:
        g, x, split, index = _benchmark_seed(seed, synth_args)
        cfg = replace(config, seeds=(seed,))
        rows += run_sweep(axis, values, g, split, cfg, MockBackend(g), templates, x,
                          index=index, keep_traces=False)
    rows.sort(key=lambda r: (values.index(r.value), r.seed))
    return rows
