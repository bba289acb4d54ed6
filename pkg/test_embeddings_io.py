import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.embeddings_io import (
    Dictionary, EmbeddingTable, build_frequency_dictionary, gather,
    load_word2vec_text, normalize, save_word2vec_text,
)
from src.errors import ArgumentError, DataError, ParseError


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def table(words, freqs, matrix):
    return EmbeddingTable(tuple(words), np.array(freqs, dtype=float), np.array(matrix, dtype=float))


def test_load_parses_header_and_rows(tmp_path):
    path = write(tmp_path / "e.vec", "2 3\ncat 1 0 0\ndog 0 1 0\n")
    t = load_word2vec_text(path)
    assert t.words == ("cat", "dog")
    assert t.dim == 3
    assert_array_equal(t.vector("dog"), [0.0, 1.0, 0.0])
    assert_array_equal(t.frequencies, [2.0, 1.0])


def test_load_header_only_gives_empty_table(tmp_path):
    t = load_word2vec_text(write(tmp_path / "e.vec", "0 50\n"))
    assert len(t) == 0
    assert t.dim == 50


def test_load_rejects_short_row_with_line_number(tmp_path):
    path = write(tmp_path / "e.vec", "2 3\ncat 1 0 0\ndog 0 1\n")
    with pytest.raises(ParseError) as info:
        load_word2vec_text(path)
    assert info.value.line == 3


def test_load_rejects_row_count_mismatch(tmp_path):
    with pytest.raises(ParseError):
        load_word2vec_text(write(tmp_path / "e.vec", "3 2\na 1 0\nb 0 1\n"))


def test_load_rejects_duplicate_tokens(tmp_path):
    with pytest.raises(ParseError):
        load_word2vec_text(write(tmp_path / "e.vec", "2 2\na 1 0\na 0 1\n"))


def test_sidecar_frequencies_are_used(tmp_path):
    vec = write(tmp_path / "e.vec", "2 2\na 1 0\nb 0 1\n")
    freq = write(tmp_path / "e.freq", "a 3\nb 40\n")
    assert_array_equal(load_word2vec_text(vec, freq).frequencies, [3.0, 40.0])


def test_save_then_load_preserves_table(tmp_path):
    rng = np.random.default_rng(0)
    original = table(["x", "y", "z"], [5, 2, 1], rng.standard_normal((3, 4)))
    save_word2vec_text(original, tmp_path / "t.vec", tmp_path / "t.freq")
    loaded = load_word2vec_text(tmp_path / "t.vec", tmp_path / "t.freq")
    assert loaded.words == original.words
    assert_allclose(loaded.matrix, original.matrix, atol=1e-9)
    assert_array_equal(loaded.frequencies, original.frequencies)


def test_table_is_read_only():
    t = table(["a"], [1], [[1.0, 2.0]])
    with pytest.raises(ValueError):
        t.matrix[0, 0] = 5.0


def test_normalize_gives_unit_rows():
    t = normalize(table(["a", "b"], [1, 1], [[3.0, 4.0], [0.0, 2.0]]))
    assert_allclose(np.linalg.norm(t.matrix, axis=1), [1.0, 1.0])
    assert_allclose(t.vector("a"), [0.6, 0.8])


def test_normalize_zero_row_names_token():
    with pytest.raises(DataError, match="b"):
        normalize(table(["a", "b"], [1, 1], [[1.0, 0.0], [0.0, 0.0]]))


def test_frequency_dictionary_picks_most_frequent_shared_tokens():
    speech = table(["a", "b", "c"], [10, 5, 1], np.eye(3))
    text = table(["c", "b", "a"], [0, 0, 0], np.eye(3))
    d = build_frequency_dictionary(speech, text, 2)
    assert d.k == 2
    assert [text.words[t] for _, t in d.pairs] == ["a", "b"]
    assert [speech.words[s] for s, _ in d.pairs] == ["a", "b"]


def test_frequency_dictionary_breaks_ties_lexicographically():
    speech = table(["b", "a"], [1, 1], np.eye(2))
    text = table(["a", "b"], [1, 1], np.eye(2))
    d = build_frequency_dictionary(speech, text, 1)
    assert speech.words[d.pairs[0][0]] == "a"


def test_disjoint_vocabularies_give_empty_dictionary_and_warning(caplog):
    speech = table(["a"], [1], [[1.0]])
    text = table(["b"], [1], [[1.0]])
    with caplog.at_level(logging.WARNING):
        d = build_frequency_dictionary(speech, text, 3)
    assert d.k == 0
    assert d.shortfall == 3
    assert "shared tokens" in caplog.text


def test_dictionary_size_must_be_positive():
    t = table(["a"], [1], [[1.0]])
    with pytest.raises(ArgumentError):
        build_frequency_dictionary(t, t, 0)


def test_gather_follows_dictionary_order():
    t = table(["a", "b", "c"], [3, 2, 1], np.arange(6.0).reshape(3, 2))
    d = Dictionary(((2, 0), (0, 1)))
    assert_array_equal(gather(t, d, "speech"), t.matrix[[2, 0]])
    assert_array_equal(gather(t, d, "text"), t.matrix[[0, 1]])


def test_gather_full_identity_dictionary_returns_matrix():
    t = table(["a", "b"], [2, 1], [[1.0, 2.0], [3.0, 4.0]])
    d = Dictionary(((0, 0), (1, 1)))
    assert_array_equal(gather(t, d, "speech"), t.matrix)


def test_gather_out_of_range_index_raises():
    t = table(["a"], [1], [[1.0]])
    with pytest.raises(IndexError):
        gather(t, Dictionary(((5, 0),)), "speech")


def test_dictionary_split_holds_out_tail():
    d = Dictionary(((0, 0), (1, 1), (2, 2)))
    train, held = d.split(1)
    assert train.pairs == ((0, 0), (1, 1))
    assert held.pairs == ((2, 2),)
