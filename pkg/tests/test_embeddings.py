import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphmt.embeddings import (
    EmbeddingError,
    EmbeddingStore,
    FileStoreProvider,
    StubProvider,
    embed_graph,
    fnv1a64,
    load_store,
    make_provider,
    save_store,
    stub_embed,
)
from graphmt.scene_graph import Edge, Node, Origin, SceneGraph, build_lsg, build_msg
from oracles import stub_embed_oracle

# frozen from the numpy-uint64 oracle in oracles.py
DOG_4 = [0.7029521465301514, 0.31585702300071716, 0.6329162120819092, 0.0742272213101387]


def test_dog_golden():
    assert stub_embed("dog", 4).tolist() == DOG_4
    assert stub_embed("dog", 4).dtype == np.float32


def test_fnv_reference_vectors():
    # published FNV-1a 64 test values
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=12), st.integers(1, 40))
def test_matches_oracle_and_is_unit(label, dim):
    v = stub_embed(label, dim)
    assert v.tobytes() == stub_embed_oracle(label, dim).tobytes()
    assert abs(float(np.linalg.norm(v.astype(np.float64))) - 1.0) < 1e-6


def test_deterministic_and_independent_copies():
    a = stub_embed("dog", 8)
    a[0] = 99.0
    assert stub_embed("dog", 8)[0] != 99.0


@pytest.mark.parametrize("dim", [0, -3])
def test_bad_dim(dim):
    with pytest.raises(EmbeddingError):
        stub_embed("dog", dim)


def test_lsg_rows_follow_labels():
    tsg = SceneGraph((Node(0, "a", Origin.TSG), Node(1, "b", Origin.TSG)), (Edge(0, 1, "r"),))
    e = embed_graph(build_lsg(tsg, "key"), StubProvider(6))
    for row, label in zip(e.node_features, ["a", "b", "key"]):
        assert row.tobytes() == stub_embed(label, 6).tobytes()
    assert e.edge_features.shape == (1 + 2, 6)
    assert e.edge_features[0].tobytes() == stub_embed("r", 6).tobytes()
    assert e.edge_features[1].tobytes() == stub_embed("global", 6).tobytes()
    assert e.edge_index.tolist() == [[0, 1]]
    assert e.super_index == 2


def test_shared_label_identical_rows():
    p = StubProvider(5)
    g1 = embed_graph(build_lsg(SceneGraph((Node(0, "man", Origin.TSG),), ()), "s1"), p)
    tsg = SceneGraph((Node(0, "dog", Origin.TSG), Node(1, "man", Origin.TSG)), ())
    g2 = embed_graph(build_msg(SceneGraph((), ()), tsg, "img"), p)
    assert g1.node_features[0].tobytes() == g2.node_features[1].tobytes()
    assert g2.edge_index.shape == (0, 2)


class TestStore:
    def test_round_trip(self, tmp_path):
        store = EmbeddingStore(3, {"a": [0.1, 0.2, 0.3], "ü": np.array([1e-30, -2.5, 7.0])})
        save_store(store, tmp_path / "s.jsonl")
        assert load_store(tmp_path / "s.jsonl") == store

    def test_empty_store_is_header_only(self, tmp_path):
        save_store(EmbeddingStore(4, {}), tmp_path / "s.jsonl")
        assert (tmp_path / "s.jsonl").read_text().splitlines() == ['{"dim": 4}']
        assert load_store(tmp_path / "s.jsonl") == EmbeddingStore(4, {})

    def test_dim_mismatch_names_line(self, tmp_path):
        f = tmp_path / "s.jsonl"
        f.write_text('{"dim": 4}\n{"label": "a", "vector": [1, 2, 3, 4]}\n{"label": "b", "vector": [1, 2, 3]}\n')
        with pytest.raises(EmbeddingError, match="line 3"):
            load_store(f)

    def test_duplicate_label(self, tmp_path):
        f = tmp_path / "s.jsonl"
        f.write_text('{"dim": 1}\n{"label": "a", "vector": [1]}\n{"label": "a", "vector": [2]}\n')
        with pytest.raises(EmbeddingError, match="duplicate"):
            load_store(f)

    def test_missing_label_is_named(self):
        provider = FileStoreProvider(EmbeddingStore(2, {"a": [1.0, 0.0]}))
        with pytest.raises(EmbeddingError, match="'zebra'"):
            provider("zebra")

    def test_make_provider(self, tmp_path):
        save_store(EmbeddingStore(2, {"a": [1.0, 0.0]}), tmp_path / "s.jsonl")
        assert make_provider(f"file:{tmp_path / 's.jsonl'}", 2)("a").tolist() == [1.0, 0.0]
        with pytest.raises(EmbeddingError):
            make_provider(f"file:{tmp_path / 's.jsonl'}", 3)
        with pytest.raises(EmbeddingError):
            make_provider("glove")
        assert isinstance(make_provider("stub", 4), StubProvider)

    def test_shape_checked(self):
        with pytest.raises(EmbeddingError):
            EmbeddingStore(2, {"a": [1.0]})
