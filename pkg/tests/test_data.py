import numpy as np
import pytest

from fame.data import (
    Catalog,
    ConsistencyError,
    FormatError,
    Interaction,
    ParseError,
    SplitError,
    build_catalog,
    build_facet_table,
    build_sequences,
    build_text_string,
    export_facet_csv,
    extract_facets,
    k_core_filter,
    leave_one_out_split,
    load_embedding_matrix,
    load_facet_csv,
    load_interactions,
    pseudo_embed,
    read_embedding_file,
    write_embedding_matrix,
)


def interactions_of(triples):
    return [Interaction(u, i, t) for u, i, t in triples]


class TestLoadInteractions:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("")
        assert load_interactions(path) == []

    def test_three_lines_in_order(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("u1\ti1\t10\nu2\ti2\t5\nu1\ti2\t20\n")
        got = load_interactions(path)
        assert got == interactions_of([("u1", "i1", 10), ("u2", "i2", 5), ("u1", "i2", 20)])

    def test_bad_timestamp_names_line(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("u1\ti1\t10\nu2\ti2\tnope\n")
        with pytest.raises(ParseError, match="line 2"):
            load_interactions(path)

    def test_wrong_field_count(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("u1\ti1\n")
        with pytest.raises(ParseError, match="line 1"):
            load_interactions(path)


class TestKCore:
    def test_fixpoint_input_unchanged(self):
        # 2 users x 2 items, every degree is 2
        rows = interactions_of(
            [("u1", "a", 1), ("u1", "b", 2), ("u2", "a", 3), ("u2", "b", 4)]
        )
        assert k_core_filter(rows, 2) == rows

    def test_star_graph_cascades_to_empty(self):
        rows = interactions_of([(f"u{i}", "hub", i) for i in range(5)])
        assert k_core_filter(rows, 5) == []

    def test_random_bipartite_property(self):
        rng = np.random.default_rng(42)
        for trial in range(100):
            n_users, n_items = rng.integers(3, 15, size=2)
            n_edges = int(rng.integers(1, 60))
            rows = interactions_of(
                [
                    (f"u{rng.integers(n_users)}", f"i{rng.integers(n_items)}", int(t))
                    for t in range(n_edges)
                ]
            )
            out = k_core_filter(rows, 5)
            if out:
                from collections import Counter

                user_deg = Counter(x.user for x in out)
                item_deg = Counter(x.item for x in out)
                assert min(user_deg.values()) >= 5
                assert min(item_deg.values()) >= 5
            # idempotence
            assert k_core_filter(out, 5) == out


class TestBuildSequences:
    def test_sorted_by_timestamp(self):
        rows = interactions_of([("u", "c", 30), ("u", "a", 10), ("u", "b", 20)])
        catalog = build_catalog(rows)
        ds = build_sequences(rows, catalog, max_len=50)
        assert [catalog.item_ids[i] for i in ds.sequences[0]] == ["a", "b", "c"]

    def test_truncation_keeps_most_recent(self):
        rows = interactions_of([("u", f"i{k:03d}", k) for k in range(100)])
        catalog = build_catalog(rows)
        ds = build_sequences(rows, catalog, max_len=50)
        assert len(ds.sequences[0]) == 50
        assert [catalog.item_ids[i] for i in ds.sequences[0]] == [f"i{k:03d}" for k in range(50, 100)]

    def test_short_user_dropped(self):
        rows = interactions_of(
            [("long", "a", 1), ("long", "b", 2), ("long", "c", 3), ("short", "a", 1), ("short", "b", 2)]
        )
        catalog = build_catalog(rows)
        ds = build_sequences(rows, catalog, max_len=50)
        assert ds.user_ids == ["long"]

    def test_timestamp_ties_keep_input_order(self):
        rows = interactions_of([("u", "z", 7), ("u", "a", 7), ("u", "m", 7)])
        catalog = build_catalog(rows)
        ds = build_sequences(rows, catalog, max_len=50)
        assert [catalog.item_ids[i] for i in ds.sequences[0]] == ["z", "a", "m"]

    def test_unknown_item_rejected(self):
        rows = interactions_of([("u", "a", 1)])
        catalog = Catalog.from_items(["b"])
        with pytest.raises(ConsistencyError):
            build_sequences(rows, catalog, max_len=50)


class TestLeaveOneOut:
    def test_four_item_protocol(self):
        train, valid, test = leave_one_out_split([0, 1, 2, 3])
        assert test == ([0, 1, 2], 3)
        assert valid == ([0, 1], 2)
        assert train == [([0], 1)]

    def test_three_item_protocol(self):
        train, valid, test = leave_one_out_split([0, 1, 2])
        assert test == ([0, 1], 2)
        assert valid == ([0], 1)
        assert train == []

    def test_too_short(self):
        with pytest.raises(SplitError):
            leave_one_out_split([0, 1])

    def test_targets_never_in_own_prefix_position(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            seq = list(rng.integers(0, 50, size=rng.integers(3, 12)))
            seq = [int(v) for v in seq]
            train, valid, test = leave_one_out_split(seq)
            for prefix, target in train + [valid, test]:
                assert len(prefix) >= 1
                assert prefix == seq[: len(prefix)]
                assert target == seq[len(prefix)]


class TestFacets:
    def test_amazon_level2_category(self):
        record = {"category": ["Beauty", "Makeup", "Nails", "Nail Polish"]}
        assert extract_facets(record, "amazon")["category"] == "Makeup"

    def test_single_category_falls_back(self):
        assert extract_facets({"category": ["Beauty"]}, "amazon")["category"] == "Beauty"

    def test_movielens_primary_genre(self):
        record = {"genres": ["Action", "Adventure", "Sci-Fi"]}
        assert extract_facets(record, "movielens")["genre"] == "Action"

    def test_price_binning(self):
        assert extract_facets({"price": 75.0}, "amazon")["price"] == "price_bin_1"
        assert extract_facets({"price": 0.0}, "amazon")["price"] == "price_bin_0"
        assert extract_facets({"price": 10_000.0}, "amazon")["price"] == "price_bin_9"

    def test_missing_fields_are_none(self):
        out = extract_facets({}, "amazon")
        assert out == {"category": None, "brand": None, "price": None}

    def test_dense_class_indices(self):
        raw = [["x", None, "y", "x", None], [None, None, None, None, None]]
        table = build_facet_table(["f1", "f2"], raw)
        assert table.class_counts[0] == 3  # x, y + sentinel
        assert table.class_counts[1] == 1  # sentinel only
        assert sorted(set(table.labels[0].tolist())) == [0, 1, 2]
        for f in range(2):
            assert table.labels[f].min() >= 0
            assert table.labels[f].max() < table.class_counts[f]


class TestTextTemplates:
    def test_amazon_full_record(self):
        record = {
            "title": "Gel Polish",
            "description": "Long lasting",
            "category": ["Beauty", "Makeup"],
            "brand": "Acme",
        }
        assert build_text_string(record, "amazon") == (
            '"title": Gel Polish; "description": Long lasting; '
            '"category": Beauty, Makeup; "brand": Acme'
        )

    def test_missing_brand_renders_empty(self):
        out = build_text_string({"title": "T", "description": "D", "category": ["C"]}, "amazon")
        assert out.endswith('"brand": ')

    def test_movielens_five_fields(self):
        record = {
            "title": "Movie",
            "description": "Plot",
            "genres": ["Action"],
            "directors": ["Someone"],
            "cast": ["A", "B"],
        }
        out = build_text_string(record, "movielens")
        for key in ('"title"', '"description"', '"genres"', '"directors"', '"cast"'):
            assert key in out


class TestFembFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        values = np.random.default_rng(0).normal(size=(2, 4)).astype(np.float32)
        path = tmp_path / "emb.femb"
        write_embedding_matrix(path, values, ["a", "b"])
        catalog = Catalog.from_items(["a", "b"])
        loaded = load_embedding_matrix(path, catalog)
        assert loaded.values.tobytes() == values.tobytes()

    def test_reorders_to_catalog(self, tmp_path):
        values = np.array([[1.0, 1.0], [2.0, 2.0]], dtype=np.float32)
        path = tmp_path / "emb.femb"
        write_embedding_matrix(path, values, ["b", "a"])
        loaded = load_embedding_matrix(path, Catalog.from_items(["a", "b"]))
        np.testing.assert_array_equal(loaded.values, [[2.0, 2.0], [1.0, 1.0]])

    def test_row_count_mismatch(self, tmp_path):
        path = tmp_path / "emb.femb"
        write_embedding_matrix(path, np.zeros((3, 2), dtype=np.float32), ["a", "b", "c"])
        with pytest.raises(FormatError):
            load_embedding_matrix(path, Catalog.from_items(["a", "b"]))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "emb.femb"
        write_embedding_matrix(path, np.zeros((1, 2), dtype=np.float32), ["a"])
        raw = path.read_bytes()
        path.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FormatError, match="magic"):
            read_embedding_file(path)

    def test_unknown_id_rejected(self, tmp_path):
        path = tmp_path / "emb.femb"
        write_embedding_matrix(path, np.zeros((2, 2), dtype=np.float32), ["a", "mystery"])
        with pytest.raises(FormatError, match="unknown item"):
            load_embedding_matrix(path, Catalog.from_items(["a", "b"]))

    def test_sidecar_comments_skipped(self, tmp_path):
        path = tmp_path / "emb.femb"
        write_embedding_matrix(
            path, np.zeros((1, 2), dtype=np.float32), ["a"], sidecar_comments=["encoder: test"]
        )
        raw = read_embedding_file(path)
        assert raw.item_ids == ["a"]


class TestPseudoEmbed:
    def test_deterministic(self):
        a = pseudo_embed("nail polish red", 16, seed=7)
        b = pseudo_embed("nail polish red", 16, seed=7)
        np.testing.assert_array_equal(a, b)

    def test_empty_text_zero_vector(self):
        np.testing.assert_array_equal(pseudo_embed("", 8, seed=1), np.zeros(8, dtype=np.float32))

    def test_unit_norm(self):
        v = pseudo_embed("a few tokens here", 32, seed=3)
        assert abs(np.linalg.norm(v) - 1.0) <= 1e-6

    def test_token_order_invariant(self):
        a = pseudo_embed("alpha beta gamma", 16, seed=5)
        b = pseudo_embed("gamma alpha beta", 16, seed=5)
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_different_seed_differs(self):
        a = pseudo_embed("alpha beta", 16, seed=5)
        b = pseudo_embed("alpha beta", 16, seed=6)
        assert np.any(np.abs(a - b) > 1e-3)


class TestFacetCsvRoundTrip:
    def test_round_trip(self, tmp_path):
        catalog = Catalog.from_items(["a", "b", "c"])
        table = build_facet_table(["color", "size"], [["red", None, "blue"], ["s", "s", None]])
        path = tmp_path / "facets.csv"
        export_facet_csv(path, catalog, table)
        loaded = load_facet_csv(path, catalog)
        assert loaded.facet_names == table.facet_names
        for f in range(2):
            np.testing.assert_array_equal(loaded.labels[f], table.labels[f])
            assert loaded.class_counts[f] == table.class_counts[f]
