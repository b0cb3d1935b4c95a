"""Command-line entry point.

A dataset directory holds ``nodes.jsonl``, ``edges.jsonl``, ``labels.json``,
``splits.json``, node features in ``features.emb`` and, optionally, a search
corpus in ``docs.jsonl``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .actions import DocumentIndex
from .backend import BackendError, HttpBackend, MockBackend, RecordingBackend, ReplayBackend
from .embed_store import EmbeddingFormatError, hashed_bow_embeddings, load_embeddings, save_embeddings
from .encoder import (
    TrainConfig,
    UnsupportedBackendError,
    init_projector,
    init_sage_params,
    load_checkpoint,
    pretrain_contrastive,
    save_checkpoint,
    sage_forward,
    train_projector_nll,
    write_loss_csv,
)
from .engine import ConfigError, EpisodeError, RunConfig, run_episode
from .evaluation import (
    BENCHMARK,
    SWEEP_AXES,
    ablation_csv,
    ablation_table,
    benchmark_ablation,
    benchmark_sweep,
    build_seed_model,
    evaluate,
    format_table,
    run_ablation,
    run_sweep,
    sweep_csv,
    sweep_table,
)
from .graph_store import GraphFormatError, load_graph, load_split, save_graph
from .prompting import PromptTemplateSet, TemplateError
from .synthetic import generate_synthetic, synthetic_documents

log = logging.getLogger("graphreact")

TYPED_ERRORS = (
    GraphFormatError, EmbeddingFormatError, ConfigError, TemplateError, BackendError,
    EpisodeError, UnsupportedBackendError, ValueError, OSError,
)

# flag name -> (RunConfig field, type)
CONFIG_FLAGS = {
    "K": int, "N": int, "M": int, "T": int, "S": int, "tau": float, "budget": int,
    "backend": str, "templates": str, "layers": int, "hidden_dim": int, "d_tok": int,
    "max_chars": int, "max_tokens": int, "temperature": float,
}


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", type=Path, help="JSON file with RunConfig fields; flags override it")
    for name, typ in CONFIG_FLAGS.items():
        flag = "--" + name.replace("_", "-") if len(name) > 1 else f"--{name}"
        kwargs = {"choices": ["mock", "replay", "http"]} if name == "backend" else {}
        g.add_argument(flag, dest=name, type=typ, default=None, **kwargs)
    g.add_argument("--seeds", type=lambda s: tuple(int(x) for x in s.split(",")), default=None,
                   help="comma-separated seeds")
    for tog in ("tr", "sr", "cf", "search"):
        g.add_argument(f"--{tog}", dest=tog, action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--trace-in", type=Path, help="recorded trace script for --backend replay")
    g.add_argument("--record", type=Path, help="save every backend turn as a replay script")
    return p


def _data_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--features", type=Path, help="feature file (default: DATA/features.emb)")
    p.add_argument("--checkpoint", type=Path, help="encoder/projector checkpoint")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = RunConfig.load(args.config).to_dict() if getattr(args, "config", None) else RunConfig().to_dict()
    for name in CONFIG_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            base[name] = value
    if getattr(args, "seeds", None) is not None:
        base["seeds"] = list(args.seeds)
    if getattr(args, "normalize", None) is not None:
        base["normalize"] = args.normalize
    toggles = dict(base["toggles"])
    for tog in ("tr", "sr", "cf", "search"):
        if getattr(args, tog, None) is not None:
            toggles[tog] = getattr(args, tog)
    base["toggles"] = toggles
    config = RunConfig.from_dict(base)
    log.debug("config %s (hash %s)", config.to_dict(), config.config_hash())
    return config


def make_backend(config: RunConfig, args, graph):
    if config.backend == "mock":
        be = MockBackend(graph)
    elif config.backend == "replay":
        if args.trace_in is None:
            raise ConfigError("--backend replay needs --trace-in")
        be = ReplayBackend.from_file(args.trace_in)
    else:
        be = HttpBackend.from_env()
    return RecordingBackend(be) if getattr(args, "record", None) else be


def _finish_backend(backend, args) -> None:
    if isinstance(backend, RecordingBackend):
        backend.save(args.record)


def _load_dataset(args):
    g = load_graph(args.data)
    split = load_split(args.data, g)
    x = load_embeddings(args.features or args.data / "features.emb")
    if x.rows != g.node_count:
        raise EmbeddingFormatError(f"features have {x.rows} rows, graph has {g.node_count} nodes")
    docs = args.data / "docs.jsonl"
    index = DocumentIndex.load(docs) if docs.exists() else None
    return g, split, x, index


def _checkpoint(args):
    if getattr(args, "checkpoint", None) is None:
        return None, None
    params, proj, _ = load_checkpoint(args.checkpoint)
    return params, proj


def _write(path: Path | None, text: str) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


# --- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    g, x, split = generate_synthetic(
        args.classes, args.nodes, args.p_in, args.p_out, args.signal_q, args.dim, args.seed
    )
    save_graph(g, args.out, split)
    save_embeddings(x, args.out / "features.emb")
    synthetic_documents(g.label_names, seed=args.seed).save(args.out / "docs.jsonl")
    print(f"wrote {g.node_count} nodes, {len(g.edge_list())} edges, {g.num_classes} classes to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    g = load_graph(args.src)
    split = load_split(args.src, g) if (args.src / "splits.json").exists() else None
    out = args.out or args.src
    save_graph(g, out, split)
    print(f"{g.node_count} nodes, {len(g.edge_list())} undirected edges, {g.num_classes} classes: ok")
    return 0


def cmd_embed(args) -> int:
    config = resolve_config(args)
    g = load_graph(args.data)
    x = load_embeddings(args.features or args.data / "features.emb")
    params, _ = _checkpoint(args)
    if params is None:
        params = init_sage_params([x.dim] + [config.hidden_dim] * config.layers, seed=config.seeds[0])
    h = sage_forward(g, x, params, normalize=config.normalize)
    save_embeddings(h, args.out)
    print(f"wrote {h.rows}x{h.dim} encoder output to {args.out}")
    return 0


def _train_config(args, config: RunConfig, **overrides) -> TrainConfig:
    fields = {"lr": args.lr, "seed": config.seeds[0], "normalize": config.normalize}
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**fields)


def cmd_pretrain(args) -> int:
    config = resolve_config(args)
    g, _, x, _ = _load_dataset(args)
    params, proj = _checkpoint(args)
    seed = config.seeds[0]
    if params is None:
        params = init_sage_params([x.dim] + [config.hidden_dim] * config.layers, seed=seed)
    if proj is None:
        proj = init_projector(params.d_out, config.T, config.d_tok, seed=seed)
    if args.text_emb is not None:
        text = load_embeddings(args.text_emb)
    else:
        text = hashed_bow_embeddings([f"{t.title} {t.description}" for t in g.node_texts], proj.d_tok)
    tc = _train_config(args, config, epochs=args.epochs, batch_size=min(args.batch_size, g.node_count),
                       tau=args.tau_train, train_encoder=args.train_encoder)
    result = pretrain_contrastive(g, x, text, proj, params, tc)
    save_checkpoint(args.out, result.params, result.projector, result.state)
    if args.loss_csv:
        write_loss_csv(result.losses, args.loss_csv)
    print(f"epoch losses: {' '.join(f'{v:.4f}' for v in result.losses)}")
    return 0


def cmd_adapt(args) -> int:
    from .backend import MockScoringBackend

    config = resolve_config(args)
    g, split, x, _ = _load_dataset(args)
    params, proj = _checkpoint(args)
    seed = config.seeds[0]
    if params is None:
        params = init_sage_params([x.dim] + [config.hidden_dim] * config.layers, seed=seed)
    if proj is None:
        proj = init_projector(params.d_out, config.T, config.d_tok, seed=seed)
    labels = hashed_bow_embeddings(list(g.label_names), proj.d_tok).data
    scorer = MockScoringBackend(g.label_names, labels, tau=args.scorer_tau)
    result = train_projector_nll(g, x, split, proj, params, _train_config(args, config, steps=args.steps), scorer)
    save_checkpoint(args.out, params, result.projector, result.state)
    if args.loss_csv:
        write_loss_csv(result.losses, args.loss_csv)
    print(f"NLL {result.losses[0]:.4f} -> {result.losses[-1]:.4f} over {args.steps} steps")
    return 0


def cmd_run(args) -> int:
    config = resolve_config(args)
    g, _, x, index = _load_dataset(args)
    params, proj = _checkpoint(args)
    seed = config.seeds[0]
    model = build_seed_model(g, x, config, seed, params, proj)
    templates = PromptTemplateSet.load(config.templates)
    backend = make_backend(config, args, g)
    try:
        _, trace = run_episode(
            g, x, model.semantic, args.node, model.projector, model.params, config, backend, templates,
            encoded=model.encoded, index=index, seed=seed,
        )
    except EpisodeError as exc:
        print(exc.trace.to_json())
        raise
    finally:
        _finish_backend(backend, args)
    print(trace.to_json())
    return 0


def cmd_eval(args) -> int:
    config = resolve_config(args)
    g, split, x, index = _load_dataset(args)
    params, proj = _checkpoint(args)
    templates = PromptTemplateSet.load(config.templates)
    backend = make_backend(config, args, g)
    try:
        report = evaluate(g, split, config, backend, templates, x, index=index, params=params,
                          projector=proj, workers=args.workers)
    finally:
        _finish_backend(backend, args)
    _write(args.traces_out, report.traces_jsonl())
    _write(args.metrics_out, report.to_csv())
    body = [(s, f"{a:.4f}", f"{f:.4f}") for s, a, f in zip(report.seeds, report.accuracy, report.macro_f1)]
    body.append(("mean±std", f"{report.accuracy_mean:.4f}±{report.accuracy_std:.4f}",
                 f"{report.macro_f1_mean:.4f}±{report.macro_f1_std:.4f}"))
    print(format_table(["seed", "accuracy", "macro_f1"], body), end="")
    print(f"eval nodes: {report.n_eval}  unmatched: {report.unmatched}  failed: {report.errors}")
    return 0


def _source(args):
    if args.synthetic == (args.data is not None):
        raise ConfigError("give exactly one of --data or --synthetic")


def cmd_ablate(args) -> int:
    _source(args)
    config = resolve_config(args)
    templates = PromptTemplateSet.load(config.templates)
    if args.synthetic:
        rows = benchmark_ablation(config, templates)
    else:
        g, split, x, index = _load_dataset(args)
        params, proj = _checkpoint(args)
        backend = make_backend(config, args, g)
        try:
            rows = run_ablation(g, split, config, backend, templates, x, index=index, params=params,
                                projector=proj, keep_traces=False, workers=args.workers)
        finally:
            _finish_backend(backend, args)
    _write(args.metrics_out, ablation_csv(rows))
    print(ablation_table(rows), end="")
    return 0


def cmd_sweep(args) -> int:
    _source(args)
    config = resolve_config(args)
    templates = PromptTemplateSet.load(config.templates)
    values = [int(v) for v in args.values.split(",") if v]
    if args.synthetic:
        rows = benchmark_sweep(args.axis, values, config, templates)
    else:
        g, split, x, index = _load_dataset(args)
        params, proj = _checkpoint(args)
        backend = make_backend(config, args, g)
        try:
            rows = run_sweep(args.axis, values, g, split, config, backend, templates, x, index=index,
                             params=params, projector=proj, keep_traces=False, workers=args.workers)
        finally:
            _finish_backend(backend, args)
    _write(args.metrics_out, sweep_csv(rows))
    print(sweep_table(rows), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    cfg, data = _config_parent(), _data_parent()
    parser = argparse.ArgumentParser(prog="graphreact", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--classes", type=int, default=BENCHMARK["classes"])
    p.add_argument("--nodes", type=int, default=BENCHMARK["nodes"])
    p.add_argument("--p-in", type=float, default=BENCHMARK["p_in"])
    p.add_argument("--p-out", type=float, default=BENCHMARK["p_out"])
    p.add_argument("--signal-q", type=float, default=BENCHMARK["signal_q"])
    p.add_argument("--dim", type=int, default=BENCHMARK["dim"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate a dataset directory and rewrite it canonically")
    p.add_argument("src", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("embed", parents=[cfg, data], help="run the encoder and save its output")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("pretrain", parents=[cfg, data], help="contrastive pretraining of the projector")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--text-emb", type=Path, help="per-node text embeddings (default: hashed bag of words)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--tau-train", type=float, default=0.07)
    p.add_argument("--train-encoder", action="store_true")
    p.add_argument("--loss-csv", type=Path)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", parents=[cfg, data], help="fit the projector on the label NLL")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--scorer-tau", type=float, default=0.1)
    p.add_argument("--loss-csv", type=Path)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("run", parents=[cfg, data], help="one episode; prints its trace as JSON")
    p.add_argument("--node", type=int, required=True)
    p.set_defaults(func=cmd_run)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate on the eval split"),
        ("ablate", cmd_ablate, "toggle ablation V1..V5 and full"),
        ("sweep", cmd_sweep, "sweep one of K, N, M, S"),
    ):
        parents = [cfg, data] if name == "eval" else [cfg]
        p = sub.add_parser(name, parents=parents, help=helptext)
        if name != "eval":
            p.add_argument("--data", type=Path, help="dataset directory")
            p.add_argument("--features", type=Path)
            p.add_argument("--checkpoint", type=Path)
            p.add_argument("--synthetic", action="store_true", help="fresh benchmark graph per seed")
        else:
            p.add_argument("--traces-out", type=Path)
        if name == "sweep":
            p.add_argument("--axis", choices=SWEEP_AXES, required=True)
            p.add_argument("--values", required=True, help="comma-separated values")
        p.add_argument("--metrics-out", type=Path)
        p.add_argument("--workers", type=int, default=1)
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except EpisodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TYPED_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
