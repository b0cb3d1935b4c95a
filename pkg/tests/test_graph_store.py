import json

import numpy as np
import pytest
from conftest import graphs, make_graph
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import bfs_oracle, hop_distances

from graphreact.graph_store import (
    DatasetSplit,
    GraphFormatError,
    NodeText,
    TextAttributedGraph,
    bfs_first_n,
    load_graph,
    load_split,
    neighbors,
    save_graph,
)


def write_dataset(root, nodes, edges, labels=("A", "B")):
    root.mkdir(parents=True, exist_ok=True)
    (root / "nodes.jsonl").write_text("".join(json.dumps(r) + "\n" for r in nodes), encoding="utf-8")
    (root / "edges.jsonl").write_text("".join(json.dumps({"src": u, "dst": v}) + "\n" for u, v in edges))
    (root / "labels.json").write_text(json.dumps(list(labels)))
    return root


def node_records(n, label=0):
    return [{"id": i, "title": f"t{i}", "description": f"d{i}", "label": label} for i in range(n)]


class TestLoad:
    def test_three_node_fixture(self, tmp_path):
        g = load_graph(write_dataset(tmp_path / "d", node_records(3), [(0, 1), (1, 2)]))
        assert neighbors(g, 1) == [0, 2]
        assert g.node_texts[2] == NodeText("t2", "d2")

    def test_duplicate_edge_deduplicated(self, tmp_path):
        g = load_graph(write_dataset(tmp_path / "d", node_records(3), [(0, 1), (0, 1), (1, 0)]))
        assert neighbors(g, 0) == [1]

    def test_directed_input_symmetrized(self, tmp_path):
        g = load_graph(write_dataset(tmp_path / "d", node_records(3), [(2, 0)]))
        assert neighbors(g, 0) == [2] and neighbors(g, 2) == [0]

    def test_self_loop_dropped(self, tmp_path):
        g = load_graph(write_dataset(tmp_path / "d", node_records(2), [(1, 1), (0, 1)]))
        assert neighbors(g, 1) == [0]

    def test_dangling_endpoint_reports_line(self, tmp_path):
        root = write_dataset(tmp_path / "d", node_records(3), [(0, 1), (1, 99)])
        with pytest.raises(GraphFormatError, match="dangling") as info:
            load_graph(root)
        assert info.value.line == 2

    def test_label_out_of_range(self, tmp_path):
        recs = node_records(3)
        recs[1]["label"] = 5
        with pytest.raises(GraphFormatError, match="out of range") as info:
            load_graph(write_dataset(tmp_path / "d", recs, []))
        assert info.value.line == 2

    def test_malformed_record(self, tmp_path):
        root = write_dataset(tmp_path / "d", node_records(2), [])
        with (root / "nodes.jsonl").open("a") as fh:
            fh.write("{not json\n")
        with pytest.raises(GraphFormatError, match="malformed") as info:
            load_graph(root)
        assert info.value.line == 3

    def test_missing_file(self, tmp_path):
        root = write_dataset(tmp_path / "d", node_records(2), [])
        (root / "edges.jsonl").unlink()
        with pytest.raises(GraphFormatError, match="missing file"):
            load_graph(root)

    def test_null_label_allowed(self, tmp_path):
        recs = node_records(2)
        recs[0]["label"] = None
        g = load_graph(write_dataset(tmp_path / "d", recs, []))
        assert g.labels == (None, 0)
        assert g.label_array.tolist() == [-1, 0]

    def test_non_contiguous_ids_rejected(self, tmp_path):
        recs = node_records(3)
        recs[2]["id"] = 7
        with pytest.raises(GraphFormatError, match="exactly 0..2"):
            load_graph(write_dataset(tmp_path / "d", recs, []))


class TestNeighbors:
    def test_path(self):
        assert neighbors(make_graph(3, [(0, 1), (1, 2)]), 1) == [0, 2]

    def test_isolated(self):
        assert neighbors(make_graph(3, [(0, 1)]), 2) == []

    def test_star_sorted(self):
        g = make_graph(4, [(0, 3), (0, 1), (0, 2)])
        assert neighbors(g, 0) == [1, 2, 3]


class TestBfs:
    def test_path_prefix(self):
        g = make_graph(4, [(0, 1), (1, 2), (2, 3)])
        assert bfs_first_n(g, 0, 2) == [1, 2]

    def test_isolated(self):
        assert bfs_first_n(make_graph(3, [(1, 2)]), 0, 4) == []

    def test_fewer_reachable_than_n(self):
        assert bfs_first_n(make_graph(3, [(0, 1), (0, 2)]), 0, 4) == [1, 2]

    def test_n_zero(self):
        assert bfs_first_n(make_graph(2, [(0, 1)]), 0, 0) == []

    def test_frontier_expands_in_parent_order(self):
        # depth-1 nodes 1 and 5; 1's child 9 precedes 5's child 2
        g = make_graph(10, [(0, 1), (0, 5), (1, 9), (5, 2)])
        assert bfs_first_n(g, 0, 4) == [1, 5, 9, 2]

    @settings(max_examples=200, deadline=None)
    @given(graphs(), st.data())
    def test_matches_oracle(self, graph_def, data):
        n, edges = graph_def
        g = make_graph(n, edges)
        v = data.draw(st.integers(0, n - 1))
        k = data.draw(st.integers(0, n + 1))
        out = bfs_first_n(g, v, k)
        assert out == bfs_oracle(n, edges, v, k)
        assert v not in out
        assert len(set(out)) == len(out)
        dist = hop_distances(n, edges, v)
        hops = [dist[i] for i in out]
        assert hops == sorted(hops)
        assert all(np.isfinite(hops))

    @settings(max_examples=100, deadline=None)
    @given(graphs(), st.data())
    def test_prefix_property(self, graph_def, data):
        n, edges = graph_def
        g = make_graph(n, edges)
        v = data.draw(st.integers(0, n - 1))
        k = data.draw(st.integers(0, n))
        assert bfs_first_n(g, v, k + 1)[:k] == bfs_first_n(g, v, k)


class TestInvariants:
    @settings(max_examples=100, deadline=None)
    @given(graphs())
    def test_canonical_form(self, graph_def):
        n, edges = graph_def
        g = make_graph(n, edges)
        for v in range(n):
            nb = neighbors(g, v)
            assert nb == sorted(set(nb))
            assert v not in nb
            for u in nb:
                assert v in neighbors(g, u)

    def test_asymmetric_csr_rejected(self):
        with pytest.raises(GraphFormatError, match="symmetric"):
            TextAttributedGraph(
                np.array([0, 1, 1]), np.array([1]), [NodeText("a", ""), NodeText("b", "")], [None, None], ["A"]
            )

    def test_unsorted_csr_rejected(self):
        texts = [NodeText(str(i), "") for i in range(3)]
        with pytest.raises(GraphFormatError, match="sorted"):
            TextAttributedGraph(np.array([0, 2, 3, 4]), np.array([2, 1, 0, 0]), texts, [None] * 3, ["A"])

    def test_from_edges_rejects_dangling(self):
        with pytest.raises(GraphFormatError):
            make_graph(2, [(0, 2)])


class TestRoundTrip:
    @settings(max_examples=30, deadline=None)
    @given(graphs(max_nodes=15), st.data())
    def test_save_load(self, tmp_path_factory, graph_def, data):
        n, edges = graph_def
        labels = data.draw(st.lists(st.one_of(st.none(), st.integers(0, 2)), min_size=n, max_size=n))
        texts = [NodeText(f"T{i} {{x}} ü", f'desc "{i}"\n') for i in range(n)]
        g = make_graph(n, edges, labels, names=("A", "B & C", "D"), texts=texts)
        root = tmp_path_factory.mktemp("rt")
        save_graph(g, root)
        assert load_graph(root).structurally_equal(g)

    def test_split_round_trip(self, tmp_path):
        g = make_graph(4, [(0, 1)], [0, 1, 0, 1])
        split = DatasetSplit([0, 1], [2, 3])
        save_graph(g, tmp_path, split)
        assert load_split(tmp_path, g) == split


class TestSplit:
    def test_overlap_rejected(self):
        with pytest.raises(GraphFormatError, match="overlap"):
            DatasetSplit([0, 1], [1, 2])

    def test_out_of_range_rejected(self, tmp_path):
        g = make_graph(2, [])
        (tmp_path / "splits.json").write_text('{"train": [0], "eval": [5]}')
        with pytest.raises(GraphFormatError, match="outside"):
            load_split(tmp_path, g)
