import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fecosr.datamodel import (
    CoverageError,
    DataError,
    FormatError,
    ItemCatalog,
    NormalizationError,
    ParseError,
    UnknownReferenceError,
    catalog_from_log,
    leave_one_out_split,
    load_catalog,
    load_embeddings,
    load_interactions,
    write_catalog,
    write_embeddings,
    write_interactions,
)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_empty_file_gives_empty_log(tmp_path):
    log = load_interactions(write(tmp_path / "x.tsv", ""))
    assert log.markets == [] and log.stats() == {}


def test_sorted_by_timestamp_with_stable_ties(tmp_path):
    p = write(tmp_path / "x.tsv", "m\tu\tc\t3\nm\tu\ta\t1\nm\tu\tb\t2\nm\tu\td\t2\n")
    seq = load_interactions(p).sequences["m"]["u"]
    assert [it for it, _ in seq] == ["a", "b", "d", "c"]


def test_stats_are_exact(tmp_path):
    p = write(tmp_path / "x.tsv", "m\tu1\ta\t1\nm\tu1\tb\t2\nm\tu2\ta\t5\nm\tu2\ta\t5\nn\tv\tz\t0\n")
    s = load_interactions(p).stats()
    # duplicate rows are kept as repeat interactions
    assert s["m"] == {"users": 2, "items": 2, "interactions": 4}
    assert s["n"] == {"users": 1, "items": 1, "interactions": 1}


@pytest.mark.parametrize(
    "line,needle",
    [("m\tu\ta\n", "4 columns"), ("m\tu\ta\tx\n", "non-integer"), ("m\tu\ta\t-1\n", "negative")],
)
def test_parse_errors_carry_line_numbers(tmp_path, line, needle):
    p = write(tmp_path / "x.tsv", "m\tu\tok\t1\n" + line)
    with pytest.raises(ParseError) as ei:
        load_interactions(p)
    assert ei.value.lineno == 2 and needle in str(ei.value)


def test_unknown_references(tmp_path):
    cat = ItemCatalog.build({"m": ["a"]})
    with pytest.raises(UnknownReferenceError):
        load_interactions(write(tmp_path / "x.tsv", "q\tu\ta\t1\n"), cat)
    with pytest.raises(UnknownReferenceError):
        load_interactions(write(tmp_path / "y.tsv", "m\tu\tb\t1\n"), cat)


def test_user_in_two_markets_rejected(tmp_path):
    with pytest.raises(DataError):
        load_interactions(write(tmp_path / "x.tsv", "m\tu\ta\t1\nn\tu\tb\t1\n"))


def test_embedding_normalization_examples(tmp_path):
    cat = ItemCatalog.build({"m": ["a", "b"]})
    out = load_embeddings(write(tmp_path / "e.tsv", "a\t3\t4\nb\t0\t2\n"), cat)
    np.testing.assert_allclose(out.embeddings[0], [0.6, 0.8], atol=1e-7)
    assert not out.embeddings.flags.writeable
    with pytest.raises(CoverageError) as ei:
        load_embeddings(write(tmp_path / "f.tsv", "a\t1\t0\n"), cat)
    assert ei.value.missing == ["b"]
    with pytest.raises(FormatError):
        load_embeddings(write(tmp_path / "g.tsv", "a\t1\t0\nb\t1\t0\t0\n"), cat)
    with pytest.raises(NormalizationError):
        load_embeddings(write(tmp_path / "h.tsv", "a\t1\t0\nb\t0\t0\n"), cat)


def test_d64_all_rows_unit(tmp_path):
    rng = np.random.default_rng(0)
    items = [f"i{k}" for k in range(50)]
    cat = ItemCatalog.build({"m": items[:20], "n": items[20:]})
    lines = "".join(it + "\t" + "\t".join(str(v) for v in rng.normal(size=64)) + "\n" for it in items)
    out = load_embeddings(write(tmp_path / "e.tsv", lines), cat)
    assert out.embeddings.shape == (50, 64)
    np.testing.assert_allclose(np.linalg.norm(out.embeddings, axis=1), 1.0, atol=1e-6)


def test_binary_and_tsv_embeddings_agree(tmp_path):
    rng = np.random.default_rng(1)
    cat = ItemCatalog.build({"m": ["a", "é"], "n": ["c"]}, rng.normal(size=(3, 5)))
    write_embeddings(cat, tmp_path / "e.bin", "binary")
    write_embeddings(cat, tmp_path / "e.tsv", "tsv")
    a = load_embeddings(tmp_path / "e.bin", cat).embeddings
    b = load_embeddings(tmp_path / "e.tsv", cat).embeddings
    np.testing.assert_array_equal(a, cat.embeddings)
    np.testing.assert_array_equal(b, cat.embeddings)
    raw = (tmp_path / "e.bin").read_bytes()
    assert raw[:8] == b"FECOEMB1"
    (tmp_path / "t.bin").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_embeddings(tmp_path / "t.bin", cat)


def test_index_ranges_cover_global_union():
    cat = ItemCatalog.build({"m": ["a", "b"], "n": ["c", "d", "e"]})
    idx = np.concatenate([cat.market_global_indices(m) for m in cat.markets])
    assert sorted(idx.tolist()) == list(range(len(cat.global_items)))
    assert cat.market_index("n") == {"c": 0, "d": 1, "e": 2}


def split_of(seq):
    cat = ItemCatalog.build({"m": sorted(set(seq))})
    from fecosr.datamodel import InteractionLog

    log = InteractionLog({"m": {"u": tuple((it, k) for k, it in enumerate(seq))}})
    return cat, leave_one_out_split(log, cat)


def test_leave_one_out_examples():
    cat, sp = split_of(["a", "b", "c", "d"])
    ix = cat.market_index("m")
    u = sp.markets["m"].users[0]
    assert u.train == (ix["a"], ix["b"])
    assert u.valid_context == (ix["a"], ix["b"]) and u.valid_target == ix["c"]
    assert u.test_context == (ix["a"], ix["b"], ix["c"]) and u.test_target == ix["d"]
    cat, sp = split_of(["a", "b", "c"])
    u = sp.markets["m"].users[0]
    assert len(u.train) == 1 and u.valid_target == 1 and u.test_target == 2
    _, sp = split_of(["a", "b"])
    assert sp.markets["m"].users == () and sp.dropped == {"m": ("u",)}


def test_min_len_below_three_rejected():
    cat, _ = split_of(["a", "b", "c"])
    from fecosr.datamodel import InteractionLog

    with pytest.raises(ValueError):
        leave_one_out_split(InteractionLog({}), cat, min_len=2)


rows = st.lists(
    st.tuples(st.sampled_from(["m0", "m1"]), st.integers(0, 5), st.sampled_from("abcdef"), st.integers(0, 20)),
    max_size=40,
)


@settings(max_examples=40, deadline=None)
@given(rows)
def test_roundtrip_and_split_invariants(tmp_path_factory, rs):
    d = tmp_path_factory.mktemp("rt")
    # users are market-scoped so the non-overlap invariant holds
    lines = "".join(f"{m}\t{m}_u{u}\t{m}_{it}\t{ts}\n" for m, u, it, ts in rs)
    log = load_interactions(write(d / "a.tsv", lines))
    write_interactions(log, d / "b.tsv")
    again = load_interactions(d / "b.tsv")
    write_interactions(again, d / "c.tsv")
    assert (d / "b.tsv").read_bytes() == (d / "c.tsv").read_bytes()
    assert again.sequences == log.sequences
    cat = catalog_from_log(log)
    write_catalog(cat, d / "cat.tsv")
    assert load_catalog(d / "cat.tsv").market_items == cat.market_items
    sp = leave_one_out_split(log, cat)
    for m, ms in sp.markets.items():
        for u in ms.users:
            assert len(u.train) + 2 == len(log.sequences[m][u.user])
            assert u.full == tuple(cat.market_index(m)[it] for it, _ in log.sequences[m][u.user])
        for seq in log.sequences[m].values():
            ts = [t for _, t in seq]
            assert ts == sorted(ts)
