"""Embedding, KNN retrieval (exact and approximate), index persistence,
node-to-catalog matching, and graph fusion."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pkgforge.fnv import fnv1a_64
from pkgforge.kg_core import (
    AudienceEdge,
    Edge,
    KnowledgeGraph,
    ProductNode,
    UserGroupNode,
)
from pkgforge.product_mapper import (
    CatalogItem,
    EmbeddingVector,
    HashingEmbedder,
    MappingError,
    MappingResult,
    build_index,
    embed_title,
    fuse_graph,
    load_index,
    map_nodes,
    query_knn,
    save_index,
)


class TestHashingEmbedder:
    def test_matches_independent_bucket_oracle(self) -> None:
        dimension = 32
        title = "Nike Air Force 1 Low"
        expected = np.zeros(dimension)
        for token in ["nike", "air", "force", "1", "low"]:
            expected[fnv1a_64(token.encode("utf-8")) % dimension] += 1.0
        expected /= np.linalg.norm(expected)
        got = HashingEmbedder(dimension).embed(title)
        assert np.allclose(got, expected)

    def test_deterministic(self) -> None:
        embedder = HashingEmbedder(64)
        a = embedder.embed("Adidas Yeezy Boost 350")
        b = embedder.embed("Adidas Yeezy Boost 350")
        assert np.array_equal(a, b)

    def test_unit_norm(self) -> None:
        vec = HashingEmbedder(64).embed("Converse Chuck Taylor All Star")
        assert np.linalg.norm(vec) == pytest.approx(1.0)

    def test_case_insensitive(self) -> None:
        embedder = HashingEmbedder(64)
        assert np.array_equal(embedder.embed("NIKE DUNK"), embedder.embed("nike dunk"))

    def test_underscores_split_tokens(self) -> None:
        embedder = HashingEmbedder(64)
        assert np.array_equal(embedder.embed("air_max"), embedder.embed("air max"))

    def test_empty_title_raises(self) -> None:
        with pytest.raises(MappingError):
            HashingEmbedder(64).embed("   ")

    def test_no_indexable_tokens_raises(self) -> None:
        with pytest.raises(MappingError):
            HashingEmbedder(64).embed("___")

    def test_bad_dimension_rejected(self) -> None:
        with pytest.raises(ValueError):
            HashingEmbedder(0)

    def test_embed_batch_stacks_rows(self) -> None:
        embedder = HashingEmbedder(16)
        matrix = embedder.embed_batch(["one shoe", "two shoe"])
        assert matrix.shape == (2, 16)
        assert np.array_equal(matrix[0], embedder.embed("one shoe"))


@given(
    title=st.text(
        alphabet="abcdefghijklmnopqrstuvwxyz0123456789 ", min_size=1, max_size=40
    ).filter(lambda s: any(ch.isalnum() for ch in s))
)
@settings(max_examples=50, deadline=None)
def test_embedding_is_deterministic_and_normalized(title: str) -> None:
    embedder = HashingEmbedder(32)
    first = embedder.embed(title)
    second = embedder.embed(title)
    assert np.array_equal(first, second)
    assert np.linalg.norm(first) == pytest.approx(1.0)


def test_embed_title_wraps_provider_output() -> None:
    vec = embed_title("Nike Dunk Low", HashingEmbedder(16))
    assert isinstance(vec, EmbeddingVector)
    assert len(vec.values) == 16
    assert vec.norm == pytest.approx(1.0)


def _random_catalog(n: int, dimension: int, seed: int = 0):
    """Catalog of n items with precomputed random unit vectors and an
    embedder stub that serves them by title."""
    rng = np.random.default_rng(seed)
    matrix = rng.normal(size=(n, dimension))
    matrix /= np.linalg.norm(matrix, axis=1)[:, None]
    items = [CatalogItem(item_id=f"item-{i:04d}", title=f"t{i}") for i in range(n)]

    class _StubProvider:
        def embed(self, title: str) -> np.ndarray:
            return matrix[int(title[1:])]

        def embed_batch(self, titles: list[str]) -> np.ndarray:
            return np.stack([self.embed(t) for t in titles])

    return items, matrix, _StubProvider()


def _brute_force_knn(item_ids, matrix, query, k):
    sims = matrix @ query
    order = sorted(range(len(item_ids)), key=lambda i: (-sims[i], item_ids[i]))
    return [(item_ids[i], float(sims[i])) for i in order[:k]]


class TestExactKnn:
    def test_matches_brute_force_oracle(self) -> None:
        items, matrix, provider = _random_catalog(100, 16, seed=1)
        index = build_index(items, provider, mode="exact")
        rng = np.random.default_rng(2)
        ids = [item.item_id for item in items]
        for _ in range(20):
            query = rng.normal(size=16)
            query /= np.linalg.norm(query)
            got = query_knn(index, query, 10)
            want = _brute_force_knn(ids, matrix, query, 10)
            assert [item_id for item_id, _ in got] == [item_id for item_id, _ in want]
            for (_, sim_got), (_, sim_want) in zip(got, want):
                assert sim_got == pytest.approx(sim_want)

    def test_ties_break_by_ascending_item_id(self) -> None:
        vec = np.zeros(8)
        vec[0] = 1.0
        items = [
            CatalogItem("item-b", "dup"),
            CatalogItem("item-a", "dup"),
            CatalogItem("item-c", "other"),
        ]

        class _Dup:
            def embed_batch(self, titles):
                rows = []
                for title in titles:
                    if title == "dup":
                        rows.append(vec)
                    else:
                        other = np.zeros(8)
                        other[1] = 1.0
                        rows.append(other)
                return np.stack(rows)

        index = build_index(items, _Dup(), mode="exact")
        got = query_knn(index, vec, 3)
        assert [item_id for item_id, _ in got] == ["item-a", "item-b", "item-c"]

    def test_k_larger_than_index_returns_all(self) -> None:
        items, _, provider = _random_catalog(5, 8)
        index = build_index(items, provider)
        assert len(query_knn(index, provider.embed("t0"), 50)) == 5

    def test_k_must_be_positive(self) -> None:
        items, _, provider = _random_catalog(5, 8)
        index = build_index(items, provider)
        with pytest.raises(ValueError):
            query_knn(index, provider.embed("t0"), 0)

    def test_dimension_mismatch_rejected(self) -> None:
        items, _, provider = _random_catalog(5, 8)
        index = build_index(items, provider)
        with pytest.raises(MappingError, match="dimension"):
            query_knn(index, np.ones(4), 1)

    def test_accepts_embedding_vector_queries(self) -> None:
        items, matrix, provider = _random_catalog(10, 8)
        index = build_index(items, provider)
        wrapped = EmbeddingVector(values=tuple(matrix[3].tolist()))
        got = query_knn(index, wrapped, 1)
        assert got[0][0] == "item-0003"


class TestBuildIndex:
    def test_empty_catalog_rejected(self) -> None:
        with pytest.raises(MappingError, match="empty"):
            build_index([], HashingEmbedder(8))

    def test_duplicate_item_id_rejected(self) -> None:
        items = [CatalogItem("dup", "one thing"), CatalogItem("dup", "another thing")]
        with pytest.raises(MappingError, match="duplicate"):
            build_index(items, HashingEmbedder(8))

    def test_unknown_mode_rejected(self) -> None:
        items = [CatalogItem("a", "thing")]
        with pytest.raises(MappingError, match="mode"):
            build_index(items, HashingEmbedder(8), mode="fuzzy")


def _clustered_catalog(n: int, dimension: int, centers: int, seed: int = 3):
    rng = np.random.default_rng(seed)
    hubs = rng.normal(size=(centers, dimension))
    hubs /= np.linalg.norm(hubs, axis=1)[:, None]
    rows = []
    for i in range(n):
        row = hubs[i % centers] + 0.3 * rng.normal(size=dimension)
        rows.append(row / np.linalg.norm(row))
    matrix = np.stack(rows)
    items = [CatalogItem(item_id=f"item-{i:04d}", title=f"t{i}") for i in range(n)]

    class _StubProvider:
        def embed(self, title: str) -> np.ndarray:
            return matrix[int(title[1:])]

        def embed_batch(self, titles: list[str]) -> np.ndarray:
            return np.stack([self.embed(t) for t in titles])

    return items, matrix, _StubProvider()


class TestApproximateKnn:
    def test_recall_against_exact_mode(self) -> None:
        items, matrix, provider = _clustered_catalog(300, 16, centers=10)
        exact = build_index(items, provider, mode="exact")
        approx = build_index(items, provider, mode="approximate")
        rng = np.random.default_rng(4)
        hits = total = 0
        for _ in range(30):
            query = matrix[rng.integers(0, 300)] + 0.1 * rng.normal(size=16)
            query /= np.linalg.norm(query)
            want = {item_id for item_id, _ in query_knn(exact, query, 5)}
            got = {item_id for item_id, _ in query_knn(approx, query, 5)}
            hits += len(want & got)
            total += len(want)
        assert hits / total >= 0.9

    def test_build_is_deterministic(self) -> None:
        items, _, provider = _clustered_catalog(80, 8, centers=5)
        first = build_index(items, provider, mode="approximate")
        second = build_index(items, provider, mode="approximate")
        assert first.levels == second.levels
        assert first.neighbors == second.neighbors
        assert first.entry_point == second.entry_point


class TestIndexPersistence:
    @pytest.mark.parametrize("mode", ["exact", "approximate"])
    def test_round_trip(self, tmp_path, mode) -> None:
        items, matrix, provider = _random_catalog(40, 8, seed=5)
        index = build_index(items, provider, mode=mode)
        path = str(tmp_path / "knn.bin")
        save_index(index, path)
        loaded = load_index(path)
        assert loaded.mode == mode
        assert loaded.item_ids == index.item_ids
        assert np.allclose(loaded.matrix, index.matrix)
        query = matrix[7]
        assert query_knn(loaded, query, 5) == query_knn(index, query, 5)

    def test_wrong_magic_rejected(self, tmp_path) -> None:
        path = tmp_path / "bogus.bin"
        path.write_bytes(b"NOTANIDX" + b"\x00" * 64)
        with pytest.raises(MappingError, match="not an index"):
            load_index(str(path))

    def test_truncated_file_rejected(self, tmp_path) -> None:
        path = tmp_path / "short.bin"
        path.write_bytes(b"\x01\x02")
        with pytest.raises(MappingError, match="truncated"):
            load_index(str(path))


def _graph_of_titles(titles: dict[str, str], edges=(), seeds=frozenset()):
    graph = KnowledgeGraph()
    for node_id, title in titles.items():
        graph.add_product(ProductNode(node_id, title, is_seed=node_id in seeds))
    for subject, predicate, obj in edges:
        graph.add_edge(Edge(subject, predicate, obj))
    return graph


class TestMapNodes:
    def test_threshold_and_audit(self) -> None:
        catalog = [
            CatalogItem("item-1", "Nike Air Jordan 1 Chicago Sneaker"),
            CatalogItem("item-2", "Garden Hose 50ft"),
        ]
        embedder = HashingEmbedder(128)
        index = build_index(catalog, embedder)
        graph = _graph_of_titles(
            {"jordan": "Nike Air Jordan 1 Chicago", "hose": "Kitchen Sink Faucet"}
        )
        results = {r.node_id: r for r in map_nodes(graph, index, embedder, threshold=0.75)}

        assert results["jordan"].mapped
        assert results["jordan"].matches[0][0] == "item-1"
        assert results["jordan"].matches[0][1] >= 0.75

        assert not results["hose"].mapped
        # Audit trail: the best candidate is still reported.
        assert len(results["hose"].matches) == 1
        assert results["hose"].matches[0][1] < 0.75

    def test_max_matches_caps_qualified_hits(self) -> None:
        catalog = [CatalogItem(f"item-{i}", "same exact title") for i in range(5)]
        embedder = HashingEmbedder(64)
        index = build_index(catalog, embedder)
        graph = _graph_of_titles({"node": "same exact title"})
        results = map_nodes(graph, index, embedder, threshold=0.9, max_matches=2)
        assert len(results[0].matches) == 2
        assert results[0].mapped

    def test_parameter_validation(self) -> None:
        catalog = [CatalogItem("item-1", "thing")]
        embedder = HashingEmbedder(16)
        index = build_index(catalog, embedder)
        graph = _graph_of_titles({"n": "thing"})
        with pytest.raises(ValueError):
            map_nodes(graph, index, embedder, threshold=-0.1)
        with pytest.raises(ValueError):
            map_nodes(graph, index, embedder, max_matches=0)

    def test_worked_example_designer_bag(self) -> None:
        catalog = [
            CatalogItem("lv-speedy", "Louis Vuitton Speedy 30 Damier Ebene Canvas Handbag"),
            CatalogItem("lv-neverfull", "Louis Vuitton Neverfull MM Monogram Tote"),
            CatalogItem("gucci-marmont", "Gucci Marmont Small Shoulder Bag"),
        ]
        embedder = HashingEmbedder(256)
        index = build_index(catalog, embedder)
        graph = _graph_of_titles(
            {"speedy": "Louis Vuitton Speedy 30 Damier Ebene Canvas"}
        )
        results = map_nodes(graph, index, embedder, threshold=0.75)
        assert results[0].mapped
        assert results[0].matches[0][0] == "lv-speedy"


def _mapping(node_id: str, *matches, mapped: bool = True) -> MappingResult:
    return MappingResult(node_id, tuple(matches), mapped)


class TestFuseGraph:
    CATALOG = [
        CatalogItem("item-a1", "A one", brand="BrandA", category="Shoes"),
        CatalogItem("item-a2", "A two", brand="BrandA", category="Shoes"),
        CatalogItem("item-b1", "B one", brand="BrandB", category="Shoes"),
        CatalogItem("item-b2", "B two", brand="BrandB", category="Shoes"),
    ]

    def test_cartesian_expansion_matches_set_oracle(self) -> None:
        graph = _graph_of_titles(
            {"a": "A", "b": "B"}, edges=[("a", "similar style", "b")]
        )
        mappings = [
            _mapping("a", ("item-a1", 0.9), ("item-a2", 0.8)),
            _mapping("b", ("item-b1", 0.95), ("item-b2", 0.85)),
        ]
        fused = fuse_graph(graph, mappings, self.CATALOG)
        expected = {
            (s, "similar style", o)
            for s in ("item-a1", "item-a2")
            for o in ("item-b1", "item-b2")
        }
        assert {e.key() for e in fused.edges} == expected
        assert set(fused.product_nodes) == {"item-a1", "item-a2", "item-b1", "item-b2"}

    def test_same_item_expansion_skipped_for_regular_edges(self) -> None:
        graph = _graph_of_titles(
            {"a": "A", "b": "B"}, edges=[("a", "similar style", "b")]
        )
        mappings = [
            _mapping("a", ("item-a1", 0.9)),
            _mapping("b", ("item-a1", 0.9)),  # both ends land on one item
        ]
        fused = fuse_graph(graph, mappings, self.CATALOG)
        assert fused.edges == []

    def test_self_loops_expand_over_full_item_product(self) -> None:
        # Items matched to one node are duplicates of the same product,
        # so the self-loop legitimately links them all, cross pairs
        # included.
        graph = _graph_of_titles({"a": "A"})
        graph.add_edge(Edge("a", "Same Product", "a", source="self_loop"))
        mappings = [_mapping("a", ("item-a1", 0.9), ("item-a2", 0.8))]
        fused = fuse_graph(graph, mappings, self.CATALOG)
        keys = {e.key() for e in fused.edges}
        assert keys == {
            (s, "same product", o)
            for s in ("item-a1", "item-a2")
            for o in ("item-a1", "item-a2")
        }
        assert all(e.source == "self_loop" for e in fused.edges)

    def test_duplicate_triples_keep_max_score(self) -> None:
        graph = _graph_of_titles({"a": "A", "b": "B", "c": "C"})
        low = Edge("a", "shared fans", "b", score=4)
        high = Edge("c", "shared fans", "b", score=9)
        graph.add_edge(low)
        graph.add_edge(high)
        # a and c both collapse onto item-a1, so the two edges expand to
        # the same fused triple.
        mappings = [
            _mapping("a", ("item-a1", 0.9)),
            _mapping("c", ("item-a1", 0.88)),
            _mapping("b", ("item-b1", 0.9)),
        ]
        fused = fuse_graph(graph, mappings, self.CATALOG)
        assert len(fused.edges) == 1
        assert fused.edges[0].score == 9

    def test_none_score_loses_to_any_score(self) -> None:
        graph = _graph_of_titles({"a": "A", "c": "C", "b": "B"})
        graph.add_edge(Edge("a", "shared fans", "b"))
        graph.add_edge(Edge("c", "shared fans", "b", score=2))
        mappings = [
            _mapping("a", ("item-a1", 0.9)),
            _mapping("c", ("item-a1", 0.88)),
            _mapping("b", ("item-b1", 0.9)),
        ]
        fused = fuse_graph(graph, mappings, self.CATALOG)
        assert fused.edges[0].score == 2

    def test_unmapped_nodes_dropped_with_incident_edges(self) -> None:
        graph = _graph_of_titles(
            {"a": "A", "ghost": "Ghost"}, edges=[("a", "haunted by", "ghost")]
        )
        mappings = [
            _mapping("a", ("item-a1", 0.9)),
            _mapping("ghost", ("item-b1", 0.2), mapped=False),
        ]
        fused = fuse_graph(graph, mappings, self.CATALOG)
        assert set(fused.product_nodes) == {"item-a1"}
        assert fused.edges == []

    def test_audience_edges_reattach_to_items(self) -> None:
        graph = _graph_of_titles({"a": "A"})
        graph.product_nodes["a"].audience.append("Collectors")
        graph.add_group(UserGroupNode("collectors", "Collectors"))
        graph.add_audience_edge(AudienceEdge("collectors", "a"))
        mappings = [_mapping("a", ("item-a1", 0.9), ("item-a2", 0.8))]
        fused = fuse_graph(graph, mappings, self.CATALOG)
        assert {ae.product_id for ae in fused.audience_edges} == {"item-a1", "item-a2"}
        assert "collectors" in fused.group_nodes

    def test_seed_flag_and_catalog_attributes_carried(self) -> None:
        graph = _graph_of_titles({"a": "A"}, seeds={"a"})
        mappings = [_mapping("a", ("item-a1", 0.9))]
        fused = fuse_graph(graph, mappings, self.CATALOG)
        node = fused.product_nodes["item-a1"]
        assert node.is_seed
        assert node.title == "A one"
        assert node.brand == "BrandA"
        assert node.product_type == "Shoes"

    def test_missing_mapping_coverage_rejected(self) -> None:
        graph = _graph_of_titles({"a": "A", "b": "B"})
        with pytest.raises(MappingError, match="do not cover"):
            fuse_graph(graph, [_mapping("a", ("item-a1", 0.9))], self.CATALOG)

    def test_unknown_catalog_item_rejected(self) -> None:
        graph = _graph_of_titles({"a": "A"})
        with pytest.raises(MappingError, match="unknown item"):
            fuse_graph(graph, [_mapping("a", ("item-zz", 0.9))], self.CATALOG)
