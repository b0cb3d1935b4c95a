"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline; they
are also repeated in the terminal summary.
"""
import math

import numpy as np
from conftest import Criterion, make_graph
from oracles import (
    bfs_oracle,
    central_difference,
    reference_metrics,
    relative_error,
    top_m_oracle,
)
from stub_server import StubServer

from graphreact.actions import Toggles
from graphreact.backend import HttpBackend, MockBackend
from graphreact.cli import main
from graphreact.embed_store import EmbeddingMatrix, top_m_similar
from graphreact.encoder import (
    TrainConfig,
    infonce_loss,
    init_projector,
    label_nll,
    pretrain_contrastive,
    score_labels_mock,
    train_projector_nll,
)
from graphreact.engine import RunConfig, run_episode
from graphreact.evaluation import BENCHMARK, benchmark_ablation, benchmark_sweep, build_seed_model, classification_metrics
from graphreact.graph_store import bfs_first_n
from graphreact.prompting import PromptTemplateSet
from graphreact.synthetic import generate_synthetic


def test_criterion_1_retrieval_oracle():
    rng = np.random.default_rng(2024)
    with Criterion(1, "retrieval matches BFS and exhaustive top-M oracles on 100 graphs", limit=10):
        for _ in range(100):
            n = int(rng.integers(2, 501))
            dim = int(rng.integers(1, 65))
            m_edges = int(rng.integers(0, 3 * n))
            edges = [tuple(int(a) for a in rng.integers(0, n, 2)) for _ in range(m_edges)]
            g = make_graph(n, edges)
            # small integer entries produce many exact cosine ties
            e = EmbeddingMatrix(rng.integers(-1, 2, size=(n, dim)).astype(float))
            rows = e.data.tolist()
            for v in rng.integers(0, n, 2):
                v = int(v)
                k = int(rng.integers(0, n + 2))
                assert bfs_first_n(g, v, k) == bfs_oracle(n, edges, v, k)
                m = int(rng.integers(0, n + 1))
                got, want = top_m_similar(e, v, m), top_m_oracle(rows, v, m)
                assert [i for i, _ in got] == [i for i, _ in want]
                assert all(abs(a - b) <= 1e-12 for (_, a), (_, b) in zip(got, want))


def test_criterion_2_gradients():
    rng = np.random.default_rng(99)
    with Criterion(2, "InfoNCE and label-NLL gradients match central differences", limit=5):
        worst = 0.0
        for _ in range(20):
            b, d = int(rng.integers(2, 7)), int(rng.integers(2, 9))
            g, t = rng.standard_normal((b, d)), rng.standard_normal((b, d))
            tau = float(rng.uniform(0.1, 2.0))
            _, analytic = infonce_loss(g, t, tau)
            numeric = central_difference(lambda a: infonce_loss(a, t, tau)[0], g, step=1e-5)
            worst = max(worst, relative_error(analytic, numeric))
        for _ in range(20):
            nt, c, d = int(rng.integers(1, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 9))
            tokens, labels = rng.standard_normal((nt, d)), rng.standard_normal((c, d))
            y, tau = int(rng.integers(c)), float(rng.uniform(0.1, 2.0))
            loss, analytic = label_nll(tokens, labels, y, tau)
            assert abs(loss + math.log(score_labels_mock(tokens, labels, tau)[y])) < 1e-10
            numeric = central_difference(lambda a: label_nll(a, labels, y, tau)[0], tokens, step=1e-5)
            worst = max(worst, relative_error(analytic, numeric))
        assert worst < 1e-4, worst


def test_criterion_3_training_contracts():
    from test_encoder import contrastive_fixture, separable_fixture

    with Criterion(3, "NLL < 0.1 in 200 steps, monotone 10-epoch contrastive curve, frozen encoder"):
        g, x, split, params, scorer = separable_fixture()
        before = {k: v.tobytes() for k, v in params.tensors().items()}
        result = train_projector_nll(
            g, x, split, init_projector(4, 5, 8, seed=0), params, TrainConfig(lr=1e-2, steps=200), scorer
        )
        assert result.losses[-1] < 0.1, result.losses[-1]
        assert {k: v.tobytes() for k, v in params.tensors().items()} == before

        g, x, text, params, proj = contrastive_fixture()
        before = {k: v.tobytes() for k, v in params.tensors().items()}
        out = pretrain_contrastive(g, x, text, proj, params, TrainConfig(lr=1e-2, epochs=10, batch_size=50, tau=0.07))
        assert len(out.losses) == 10
        assert max(b - a for a, b in zip(out.losses, out.losses[1:])) <= 1e-6, out.losses
        assert {k: v.tobytes() for k, v in out.params.tensors().items()} == before
        assert {k: v.tobytes() for k, v in params.tensors().items()} == before


def test_criterion_4_golden_prompt(children_labels):
    from test_prompting import AMBER, GOLDEN, golden_context

    from graphreact.prompting import build_instruction, build_question, render_prompt, token_placeholders

    with Criterion(4, "full prompt reproduces the golden file byte for byte"):
        t = PromptTemplateSet.load("children")
        out = render_prompt(build_instruction(AMBER, 5, t), golden_context(), build_question(children_labels, t), t)
        golden = GOLDEN.read_bytes()
        assert out.encode("utf-8") == golden
        assert token_placeholders(5).encode() in golden
        for section in (b"\nNeighbor summary: ", b"\nNode summary: ", b"\nSummary: "):
            assert section in golden


def test_criterion_5_schedule_law():
    g, x, split = generate_synthetic(**BENCHMARK, seed=0)
    templates = PromptTemplateSet.load("generic")
    retrieval = ("topo_summary", "sem_summary", "search_query")
    with Criterion(5, "trace event counts follow the event-count law for K = 1..4"):
        for k in (1, 2, 3, 4):
            config = RunConfig(K=k, toggles=Toggles(cf=k >= 3), seeds=(0,))
            model = build_seed_model(g, x, config, 0)
            for v in split.eval_ids[:10]:
                _, trace = run_episode(g, x, model.semantic, v, model.projector, model.params, config,
                                       MockBackend(g), templates, encoded=model.encoded)
                want = 0 if k == 1 else k - 1
                observations = len({e.step for e in trace.events if e.purpose in retrieval}) + trace.count("refinement")
                assert trace.count("thought") == want, (k, trace.count("thought"))
                assert observations == want and len(trace.observations) == want
                assert trace.count("final") == 1 and trace.events[-1].step == k
                if k == 1:
                    assert [e.purpose for e in trace.events] == ["final"]
                if k == 2:
                    assert trace.count("refinement") == 0


def _accuracy(report):
    return report.accuracy_mean


def test_criterion_6_ablation_ordering():
    with Criterion(6, "ablation ordering on the synthetic benchmark over 5 seeds", limit=60) as c:
        rows = {r.name: _accuracy(r.report) for r in benchmark_ablation(RunConfig())}
        summary = "  ".join(f"{k}={v:.3f}" for k, v in rows.items())
        print(f"  ablation accuracy: {summary}")
        c.title += f" ({summary})"
        full, tr, sr, none = rows["full"], rows["V2"], rows["V3"], rows["V1"]
        assert full >= tr, (full, tr)
        assert tr >= none + 0.10, (tr, none)
        assert tr >= sr - 0.02, (tr, sr)


def test_criterion_7_k_sweep():
    with Criterion(7, "K sweep: K=2 beats K=1 by 0.10, K=4 holds within 0.02 of K=2", limit=60) as c:
        rows = benchmark_sweep("K", [1, 2, 3, 4], RunConfig())
        by_k = {k: float(np.mean([r.accuracy for r in rows if r.value == k])) for k in (1, 2, 3, 4)}
        summary = "  ".join(f"K{k}={v:.3f}" for k, v in by_k.items())
        print(f"  sweep accuracy: {summary}")
        c.title += f" ({summary})"
        assert by_k[2] >= by_k[1] + 0.10
        assert by_k[4] >= by_k[2] - 0.02


def test_criterion_8_metrics_oracle():
    rng = np.random.default_rng(8)
    with Criterion(8, "metrics equal the reference on 50 cases; hand case gives 0.75 / 0.7333"):
        for _ in range(50):
            n, k = int(rng.integers(1, 300)), int(rng.integers(2, 10))
            y = rng.integers(0, k, n).tolist()
            p = [None if rng.random() < 0.05 else int(q) for q in rng.integers(0, k, n)]
            acc, f1, _ = classification_metrics(y, p)
            ref_acc, ref_f1 = reference_metrics(y, p)
            assert abs(acc - ref_acc) <= 1e-9 and abs(f1 - ref_f1) <= 1e-9
        acc, f1, _ = classification_metrics([0, 0, 1, 1], [0, 1, 1, 1])
        assert acc == 0.75 and abs(f1 - 0.7333) <= 1e-4


def test_criterion_9_determinism(tmp_path):
    data = tmp_path / "bench"
    with Criterion(9, "two eval runs give byte-identical traces and metrics"):
        assert main(["synth", "--out", str(data), "--seed", "0"]) == 0
        for tag in ("a", "b"):
            assert main(["eval", "--data", str(data), "--traces-out", str(tmp_path / f"{tag}.jsonl"),
                         "--metrics-out", str(tmp_path / f"{tag}.csv")]) == 0
        a, b = (tmp_path / "a.jsonl").read_bytes(), (tmp_path / "b.jsonl").read_bytes()
        assert a and a == b
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_criterion_10_http_contract():
    g = make_graph(6, [(0, 1), (0, 2), (1, 3), (2, 4), (4, 5)], labels=[0, 1, 1, 0, 1, 0], names=("Alpha", "Beta"))
    x = EmbeddingMatrix(np.random.default_rng(0).standard_normal((6, 4)))
    config = RunConfig(K=4, seeds=(0,), backend="http", hidden_dim=8, d_tok=8)
    model = build_seed_model(g, x, config, 0)
    with Criterion(10, "K=4 episode over HTTP with a retried 500, purposes in schedule order"):
        with StubServer(lambda body: "The category might be Beta.") as srv:
            srv.fail_next = [500]
            backend = HttpBackend(srv.url, "stub-model", backoff=0.01)
            label, trace = run_episode(g, x, model.semantic, 0, model.projector, model.params, config,
                                       backend, PromptTemplateSet.load("generic"), encoded=model.encoded)
        assert srv.statuses[0] == 500 and srv.statuses[1:] == [200] * len(trace.events)
        assert [(e.step, e.purpose) for e in trace.events] == [
            (1, "thought"), (1, "topo_summary"), (1, "sem_summary"),
            (2, "thought"), (2, "refinement"),
            (3, "thought"), (3, "refinement"),
            (4, "final"),
        ]
        assert label == 1 and trace.error is None
        assert all("<Token" not in r["body"]["messages"][0]["content"] for r in srv.requests)
