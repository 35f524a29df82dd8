"""Category prototypes on the hypersphere.

A :class:`PrototypeBook` maps category names to fixed unit vectors. Books are
immutable: subsets and few-shot variants are built as new books.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateCategory,
    ParseError,
    UnknownCategory,
    ValidationError,
    ZeroVector,
)
from .hypersphere import EPS_NORM, slerp, spherical_average

PROTO_MAGIC = "OXDS-PROTO"
FORMAT_VERSION = 1

UNIT_TOL = 1e-9


@dataclass(frozen=True)
class PrototypeBook:
    """Ordered, immutable map from category name to unit prototype."""

    names: tuple[str, ...]
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        names = tuple(self.names)
        if vectors.ndim != 2 or vectors.shape[0] != len(names):
            raise DimensionMismatch(
                f"{len(names)} names but prototype matrix has shape {vectors.shape}"
            )
        if vectors.shape[1] < 2:
            raise DimensionMismatch("prototypes need at least 2 dimensions")
        seen = set()
        for name in names:
            if not name or any(c.isspace() for c in name):
                raise ValidationError(f"invalid category name {name!r}")
            if name in seen:
                raise DuplicateCategory(f"duplicate category {name!r}")
            seen.add(name)
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            bad = names[int(np.argmax(np.abs(norms - 1.0)))]
            raise ValidationError(f"prototype {bad!r} is not unit-norm")
        if len(names) > 1:
            gram = vectors @ vectors.T
            sq = np.maximum(2.0 - 2.0 * gram, 0.0)
            np.fill_diagonal(sq, np.inf)
            if np.min(sq) <= UNIT_TOL**2:
                i, j = np.unravel_index(np.argmin(sq), sq.shape)
                raise ValidationError(
                    f"prototypes {names[i]!r} and {names[j]!r} are identical"
                )
        vectors.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    @classmethod
    def from_mapping(cls, entries: Mapping[str, Sequence[float]], normalize: bool = True):
        names = list(entries)
        if not names:
            raise ValidationError("a prototype book needs at least one category")
        rows = [np.asarray(entries[n], dtype=np.float64) for n in names]
        if len({r.shape for r in rows}) != 1:
            raise DimensionMismatch("prototypes must share one dimension")
        vectors = np.vstack(rows)
        if normalize:
            norms = np.linalg.norm(vectors, axis=1)
            for n, v in zip(names, norms):
                if not v > EPS_NORM:
                    raise ZeroVector(f"prototype {n!r} has zero norm")
            vectors = vectors / norms[:, None]
        return cls(tuple(names), vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self._index

    def __iter__(self):
        return iter(self.names)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.vectors[self.index(name)]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownCategory(f"unknown category {name!r}") from None

    def indices(self, names: Iterable[str]) -> np.ndarray:
        return np.fromiter((self.index(n) for n in names), dtype=np.intp)

    def subset(self, names: Iterable[str]) -> "PrototypeBook":
        """Restrict to ``names``, preserving this book's order."""
        wanted = set(names)
        for n in wanted:
            self.index(n)
        keep = [n for n in self.names if n in wanted]
        return PrototypeBook(tuple(keep), self.vectors[self.indices(keep)])

    def replace(self, entries: Mapping[str, np.ndarray]) -> "PrototypeBook":
        """Copy of this book with some prototypes swapped out."""
        vectors = self.vectors.copy()
        for name, vec in entries.items():
            vectors[self.index(name)] = vec
        return PrototypeBook(self.names, vectors)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update("\n".join(self.names).encode())
        h.update(np.ascontiguousarray(self.vectors).tobytes())
        return h.hexdigest()


def load_prototypes(path: str | os.PathLike, expected_dim: int | None = None) -> PrototypeBook:
    """Read a prototype file, normalizing every row to unit length."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty prototype file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != PROTO_MAGIC:
        raise ParseError(f"{path}: bad header {lines[0]!r}")
    try:
        version, count, dim = (int(t) for t in header[1:])
    except ValueError:
        raise ParseError(f"{path}: bad header {lines[0]!r}") from None
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise DimensionMismatch(f"{path}: dimension {dim}, expected {expected_dim}")
    rows = lines[1:]
    if len(rows) != count:
        raise ParseError(f"{path}: header declares {count} rows, found {len(rows)}")
    entries: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(rows, start=2):
        tokens = line.split()
        if len(tokens) != dim + 1:
            raise ParseError(f"{path}:{lineno}: expected {dim} values, got {len(tokens) - 1}")
        name = tokens[0]
        if name in entries:
            raise DuplicateCategory(f"{path}:{lineno}: duplicate category {name!r}")
        try:
            entries[name] = np.array([float(t) for t in tokens[1:]])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        if not np.all(np.isfinite(entries[name])):
            raise ParseError(f"{path}:{lineno}: non-finite value")
    return PrototypeBook.from_mapping(entries)


def save_prototypes(book: PrototypeBook, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{PROTO_MAGIC} {FORMAT_VERSION} {len(book)} {book.dim}\n")
        for name, vec in zip(book.names, book.vectors):
            fh.write(name + " " + " ".join(f"{x:.17g}" for x in vec) + "\n")


def exemplar_prototype(embeddings: Sequence[np.ndarray]) -> np.ndarray:
    """n-shot class prototype: the spherical mean of the support embeddings."""
    return spherical_average(embeddings)


def refine_support(p0: np.ndarray, category: str, book: PrototypeBook, lam: float) -> np.ndarray:
    """Pull a support prototype toward the semantic prototype of its category."""
    return slerp(p0, book[category], lam)
