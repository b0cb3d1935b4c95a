import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import reference_metrics

from graphreact.actions import Toggles
from graphreact.backend import MockBackend
from graphreact.engine import RunConfig
from graphreact.evaluation import (
    ABLATION_VARIANTS,
    ablation_csv,
    ablation_table,
    classification_metrics,
    evaluate,
    merge_reports,
    run_ablation,
    run_sweep,
    sweep_config,
    sweep_csv,
    sweep_table,
)
from graphreact.prompting import PromptTemplateSet
from graphreact.synthetic import generate_synthetic

SMALL = {"classes": 3, "nodes": 60, "p_in": 0.3, "p_out": 0.02, "signal_q": 0.3, "dim": 8}


@pytest.fixture(scope="module")
def small():
    g, x, split = generate_synthetic(**SMALL, seed=0)
    return g, x, split, PromptTemplateSet.load("generic")


def run(small, config, **kw):
    g, x, split, t = small
    return evaluate(g, split, config, MockBackend(g), t, x, **kw)


class TestMetrics:
    def test_hand_case(self):
        # class 0: one right, one predicted as class 1; class 1: both right
        acc, f1, per = classification_metrics([0, 0, 1, 1], [0, 1, 1, 1])
        assert acc == 0.75
        assert f1 == pytest.approx(0.7333, abs=1e-4)
        assert per[0].f1 == pytest.approx(2 / 3) and per[1].f1 == pytest.approx(0.8)
        assert (per[0].support, per[1].support) == (2, 2)

    def test_all_correct(self):
        acc, f1, _ = classification_metrics([0, 1, 2, 2], [0, 1, 2, 2])
        assert acc == 1.0 and f1 == 1.0

    def test_never_predicted_class(self):
        _, _, per = classification_metrics([0, 1], [0, 0])
        assert per[1].f1 == 0.0 and per[1].precision == 0.0

    def test_unmatched_is_wrong(self):
        acc, _, per = classification_metrics([0, 1], [None, 1])
        assert acc == 0.5 and per[0].recall == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            classification_metrics([0], [0, 1])

    def test_empty(self):
        with pytest.raises(ValueError):
            classification_metrics([], [])

    def test_fifty_random_cases_match_reference(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n, c = int(rng.integers(1, 200)), int(rng.integers(2, 8))
            y = rng.integers(0, c, n).tolist()
            p = [None if rng.random() < 0.1 else int(q) for q in rng.integers(0, c, n)]
            acc, f1, _ = classification_metrics(y, p)
            ref_acc, ref_f1 = reference_metrics(y, p)
            assert abs(acc - ref_acc) <= 1e-9 and abs(f1 - ref_f1) <= 1e-9

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 4), st.one_of(st.none(), st.integers(0, 4))), min_size=1, max_size=60))
    def test_bounds_and_reference(self, pairs):
        y, p = [a for a, _ in pairs], [b for _, b in pairs]
        acc, f1, _ = classification_metrics(y, p)
        assert 0.0 <= acc <= 1.0 and 0.0 <= f1 <= 1.0
        ref_acc, ref_f1 = reference_metrics(y, p)
        assert acc == pytest.approx(ref_acc, abs=1e-9) and f1 == pytest.approx(ref_f1, abs=1e-9)


class TestEvaluate:
    def test_report_shape(self, small):
        rep = run(small, RunConfig(seeds=(0, 1)))
        assert rep.seeds == [0, 1] and len(rep.accuracy) == 2
        assert len(rep.traces) == 2 * rep.n_eval
        assert rep.errors == 0

    def test_csv_layout(self, small):
        text = run(small, RunConfig(seeds=(0, 1))).to_csv()
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == ["seed", "accuracy", "macro_f1"]
        assert [r[0] for r in rows[1:]] == ["0", "1", "mean", "std"]

    def test_population_std(self, small):
        rep = run(small, RunConfig(seeds=(0, 1, 2)))
        assert rep.accuracy_std == pytest.approx(float(np.std(rep.accuracy, ddof=0)))

    def test_deterministic(self, small):
        a = run(small, RunConfig(seeds=(0,)))
        b = run(small, RunConfig(seeds=(0,)))
        assert a.to_csv() == b.to_csv() and a.traces_jsonl() == b.traces_jsonl()

    def test_workers_do_not_change_results(self, small):
        a = run(small, RunConfig(seeds=(0,)))
        b = run(small, RunConfig(seeds=(0,)), workers=4)
        assert a.traces_jsonl() == b.traces_jsonl()

    def test_traces_follow_sorted_eval_ids(self, small):
        import json

        rep = run(small, RunConfig(seeds=(0,)))
        ids = [json.loads(line)["node_id"] for line in rep.traces_jsonl().splitlines()]
        assert ids == sorted(ids)

    def test_unmatched_counted(self, small):
        from graphreact.backend import BackendResponse

        class Mumble:
            def complete(self, request):
                return BackendResponse.make(request, "unsure")

        g, x, split, t = small
        rep = evaluate(g, split, RunConfig(K=1, toggles=Toggles(cf=False), seeds=(0,)), Mumble(), t, x)
        assert rep.unmatched == rep.n_eval and rep.accuracy == [0.0]

    def test_errors_counted_not_raised(self, small):
        from graphreact.backend import TransportError

        class Down:
            def complete(self, request):
                raise TransportError("down")

        g, x, split, t = small
        rep = evaluate(g, split, RunConfig(seeds=(0,)), Down(), t, x)
        assert rep.errors == rep.n_eval and rep.accuracy == [0.0]


class TestAblation:
    def test_variant_flags(self):
        flags = {k: (v.tr, v.sr, v.cf) for k, v in ABLATION_VARIANTS.items()}
        assert flags == {
            "V1": (False, False, False), "V2": (True, False, False), "V3": (False, True, False),
            "V4": (True, True, False), "V5": (False, False, True), "full": (True, True, True),
        }

    def test_rows_and_outputs(self, small):
        g, x, split, t = small
        rows = run_ablation(g, split, RunConfig(seeds=(0,)), MockBackend(g), t, x)
        assert [r.name for r in rows] == list(ABLATION_VARIANTS)
        header = ablation_csv(rows).splitlines()[0]
        assert header == "variant,TR,SR,CF,accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std"
        assert "full" in ablation_table(rows)

    def test_no_action_variant_makes_single_step(self, small):
        g, x, split, t = small
        rows = run_ablation(g, split, RunConfig(seeds=(0,)), MockBackend(g), t, x,
                            variants={"V1": ABLATION_VARIANTS["V1"]})
        tr = rows[0].report.traces[0]
        assert tr.count("topo_summary") == 0 and tr.count("sem_summary") == 0 and tr.count("refinement") == 0


class TestSweep:
    def test_csv_header_and_rows(self, small):
        g, x, split, t = small
        rows = run_sweep("K", [1, 2], g, split, RunConfig(seeds=(0, 1)), MockBackend(g), t, x)
        lines = sweep_csv(rows).splitlines()
        assert lines[0] == "axis,value,seed,accuracy,macro_f1"
        assert [line.split(",")[:3] for line in lines[1:]] == [
            ["K", "1", "0"], ["K", "1", "1"], ["K", "2", "0"], ["K", "2", "1"]
        ]
        assert "K" in sweep_table(rows)

    def test_invalid_axis(self, small):
        g, x, split, t = small
        with pytest.raises(ValueError, match="axis"):
            run_sweep("Q", [1], g, split, RunConfig(), MockBackend(g), t, x)

    def test_config_per_axis(self):
        base = RunConfig()
        assert sweep_config(base, "K", 2).toggles.cf is False
        assert sweep_config(base, "N", 7).N == 7
        assert sweep_config(base, "M", 0).M == 0
        s = sweep_config(base, "S", 3)
        assert s.S == 3 and s.toggles.search


def test_merge_reports(small):
    a = run(small, RunConfig(seeds=(0,)))
    b = run(small, RunConfig(seeds=(1,)))
    m = merge_reports([a, b])
    assert m.seeds == [0, 1] and m.accuracy == a.accuracy + b.accuracy
    assert len(m.traces) == len(a.traces) + len(b.traces)
    for c, sc in m.per_class.items():
        assert sc.support == a.per_class[c].support + b.per_class[c].support
    with pytest.raises(ValueError):
        merge_reports([])
