import math

import numpy as np
import pytest

from oxds.errors import DimensionMismatch, DuplicateCategory, ParseError, UnknownCategory, ValidationError, ZeroVector
from oxds.prototypes import (
    PrototypeBook,
    exemplar_prototype,
    load_prototypes,
    refine_support,
    save_prototypes,
)

H = math.sqrt(2) / 2


def write(tmp_path, text):
    p = tmp_path / "protos.txt"
    p.write_text(text)
    return p


def test_load_examples(tmp_path):
    book = load_prototypes(write(tmp_path, "OXDS-PROTO 1 2 3\ncat 1 0 0\ndog 0 1 0\n"))
    assert book.names == ("cat", "dog") and book.dim == 3
    np.testing.assert_array_equal(book["dog"], [0, 1, 0])

    book = load_prototypes(write(tmp_path, "OXDS-PROTO 1 1 3\nsun 3 4 0\n"))
    np.testing.assert_allclose(book["sun"], [0.6, 0.8, 0.0], atol=1e-15)

    with pytest.raises(DuplicateCategory):
        load_prototypes(write(tmp_path, "OXDS-PROTO 1 2 2\ncat 1 0\ncat 0 1\n"))


@pytest.mark.parametrize("text", [
    "",
    "NOPE 1 1 2\na 1 0\n",
    "OXDS-PROTO 2 1 2\na 1 0\n",
    "OXDS-PROTO 1 2 2\na 1 0\n",
    "OXDS-PROTO 1 1 2\na 1\n",
    "OXDS-PROTO 1 1 2\na 1 x\n",
])
def test_malformed_files(tmp_path, text):
    with pytest.raises(ParseError):
        load_prototypes(write(tmp_path, text))


def test_zero_row_and_expected_dim(tmp_path):
    with pytest.raises(ZeroVector):
        load_prototypes(write(tmp_path, "OXDS-PROTO 1 1 2\na 0 0\n"))
    with pytest.raises(DimensionMismatch):
        load_prototypes(write(tmp_path, "OXDS-PROTO 1 1 2\na 1 0\n"), expected_dim=3)


def test_book_invariants():
    with pytest.raises(ValidationError):
        PrototypeBook(("a",), np.array([[2.0, 0.0]]))
    with pytest.raises(ValidationError):
        PrototypeBook(("a", "b"), np.array([[1.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(ValidationError):
        PrototypeBook(("",), np.array([[1.0, 0.0]]))
    book = PrototypeBook(("a", "b"), np.eye(2))
    with pytest.raises(ValueError):
        book.vectors[0, 0] = 5.0
    with pytest.raises(UnknownCategory):
        book.index("zebra")


def test_save_load_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    v = rng.standard_normal((5, 7))
    book = PrototypeBook.from_mapping({f"c{i}": row for i, row in enumerate(v)})
    save_prototypes(book, tmp_path / "b.txt")
    back = load_prototypes(tmp_path / "b.txt")
    assert back.names == book.names
    assert np.array_equal(back.vectors, book.vectors)
    assert back.checksum() == book.checksum()


def test_subset_keeps_book_order_and_replace_copies():
    book = PrototypeBook(("a", "b", "c"), np.eye(3))
    assert book.subset(["c", "a"]).names == ("a", "c")
    new = book.replace({"b": np.array([0.0, 0.0, 1.0]) * -1})
    assert np.array_equal(book["b"], [0, 1, 0])
    assert np.array_equal(new["b"], [0, 0, -1])


def test_exemplar_prototype():
    e = np.array([0.6, 0.8])
    np.testing.assert_array_equal(exemplar_prototype([e]), e)
    np.testing.assert_allclose(exemplar_prototype([e] * 5), e, atol=1e-15)
    np.testing.assert_allclose(exemplar_prototype([[1, 0], [0, 1]]), [H, H], atol=1e-15)


def test_refine_support():
    book = PrototypeBook(("ant", "bee"), np.eye(2))
    p0 = np.array([0.6, 0.8])
    assert np.array_equal(refine_support(p0, "ant", book, 0.0), p0)
    assert np.array_equal(refine_support(p0, "ant", book, 1.0), book["ant"])
    for lam in (0.1, 0.5, 0.9):
        np.testing.assert_allclose(refine_support(book["bee"], "bee", book, lam), book["bee"], atol=1e-12)
    with pytest.raises(UnknownCategory):
        refine_support(p0, "cat", book, 0.5)
