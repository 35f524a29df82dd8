"""Exact cosine search in the shared space.

Galleries may mix any number of domains. Scores are dot products between unit
vectors; ranks are by descending score with ties broken by ascending item id,
which makes every ranked list a deterministic total order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyGallery, MissingMapper, ValidationError
from .hypersphere import slerp, spherical_average
from .mapper import DomainMapper, forward
from .prototypes import PrototypeBook


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    domain: str
    category: str
    feature: np.ndarray = field(repr=False)


class RankedItem(NamedTuple):
    item_id: str
    score: float
    domain: str
    category: str


@dataclass(frozen=True)
class RankedList:
    item_ids: tuple[str, ...]
    scores: np.ndarray
    domains: tuple[str, ...]
    categories: tuple[str, ...]

    def __len__(self):
        return len(self.item_ids)

    def __iter__(self) -> Iterator[RankedItem]:
        for i in range(len(self.item_ids)):
            yield self[i]

    def __getitem__(self, i: int) -> RankedItem:
        return RankedItem(self.item_ids[i], float(self.scores[i]), self.domains[i], self.categories[i])


class GalleryIndex:
    """Immutable set of embedded items, possibly spanning several domains."""

    def __init__(self, item_ids: Sequence[str], domains: Sequence[str], categories: Sequence[str], embeddings):
        emb = np.array(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(item_ids):
            raise DimensionMismatch("embeddings and item ids disagree in length")
        if not (len(item_ids) == len(domains) == len(categories)):
            raise ValidationError("item ids, domains and categories disagree in length")
        if emb.shape[0] == 0:
            raise EmptyGallery("gallery is empty")
        if len(set(item_ids)) != len(item_ids):
            raise ValidationError("duplicate item ids in gallery")
        if np.any(np.abs(np.linalg.norm(emb, axis=1) - 1.0) > 1e-9):
            raise ValidationError("gallery embeddings must be unit-norm")
        emb.setflags(write=False)
        self.item_ids = tuple(item_ids)
        self.domains = tuple(domains)
        self.categories = tuple(categories)
        self.embeddings = emb
        # Position of every item in ascending-id order; the tie-break key.
        order = sorted(range(len(item_ids)), key=self.item_ids.__getitem__)
        rank = np.empty(len(order), dtype=np.int64)
        rank[order] = np.arange(len(order))
        rank.setflags(write=False)
        self._id_rank = rank
        self._pos = {item: i for i, item in enumerate(self.item_ids)}

    def __len__(self):
        return len(self.item_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def position(self, item_id: str) -> int:
        return self._pos[item_id]

    def __contains__(self, item_id) -> bool:
        return item_id in self._pos

    def order(self, q: np.ndarray, exclude: Iterable[str] = ()) -> np.ndarray:
        """Gallery positions sorted by descending ``<q, g>`` then ascending id."""
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise DimensionMismatch(f"query of shape {q.shape}, gallery dim {self.dim}")
        scores = self.embeddings @ q
        idx = np.lexsort((self._id_rank, -scores))
        drop = [self._pos[e] for e in exclude if e in self._pos]
        if drop:
            idx = idx[~np.isin(idx, drop)]
        return idx

    def ranked(self, q: np.ndarray, idx: np.ndarray) -> RankedList:
        return RankedList(
            tuple(self.item_ids[i] for i in idx),
            self.embeddings[idx] @ np.asarray(q, dtype=np.float64),
            tuple(self.domains[i] for i in idx),
            tuple(self.categories[i] for i in idx),
        )

    def domain_counts(self, category: str) -> dict[str, int]:
        counts = {d: 0 for d in dict.fromkeys(self.domains)}
        for d, c in zip(self.domains, self.categories):
            if c == category:
                counts[d] += 1
        return counts


def _exclusions(exclude_id) -> tuple[str, ...]:
    if exclude_id is None:
        return ()
    if isinstance(exclude_id, str):
        return (exclude_id,)
    return tuple(exclude_id)


def embed_gallery(
    mappers: Mapping[str, DomainMapper],
    items: Iterable[ItemRecord],
    domains: Iterable[str],
) -> GalleryIndex:
    """Embed every item of the included domains with its own domain's mapper."""
    include = set(domains)
    if not include:
        raise EmptyGallery("no domains selected for the gallery")
    for d in include:
        if d not in mappers:
            raise MissingMapper(f"no mapper for domain {d!r}")
    dims = {mappers[d].d_out for d in include}
    if len(dims) != 1:
        raise DimensionMismatch(f"mappers disagree on output dimension: {sorted(dims)}")
    chosen = [it for it in items if it.domain in include]
    if not chosen:
        raise EmptyGallery("no items in the selected domains")
    emb = np.empty((len(chosen), dims.pop()))
    by_domain: dict[str, list[int]] = {}
    for i, it in enumerate(chosen):
        by_domain.setdefault(it.domain, []).append(i)
    for d, rows in by_domain.items():
        emb[rows] = mappers[d].embed(np.vstack([chosen[i].feature for i in rows]))
    return GalleryIndex(
        [it.item_id for it in chosen],
        [it.domain for it in chosen],
        [it.category for it in chosen],
        emb,
    )


def build_query(sources: Sequence[tuple[DomainMapper, np.ndarray]]) -> np.ndarray:
    """Embed each (mapper, feature) source; several sources are averaged on the sphere."""
    if not sources:
        raise ValidationError("need at least one query source")
    if len({m.d_out for m, _ in sources}) != 1:
        raise DimensionMismatch("source mappers disagree on output dimension")
    embs = [forward(m, x) for m, x in sources]
    if len(embs) == 1:
        return embs[0]
    return spherical_average(embs)


def nearest_neighbour(q: np.ndarray, index: GalleryIndex, exclude_id=None) -> np.ndarray:
    idx = index.order(q, _exclusions(exclude_id))
    if idx.size == 0:
        raise EmptyGallery("nothing left in gallery after exclusions")
    return index.embeddings[idx[0]]


def refine_query(q: np.ndarray, index: GalleryIndex, lam: float, exclude_id=None) -> np.ndarray:
    """Slerp the query toward its unlabeled top-1 gallery neighbour."""
    if len(index) == 0:
        raise EmptyGallery("gallery is empty")
    if lam == 0.0:
        return np.asarray(q, dtype=np.float64)
    return slerp(q, nearest_neighbour(q, index, exclude_id), lam)


def search(q: np.ndarray, index: GalleryIndex, k: int | None = None, exclude_id=None) -> RankedList:
    """Exact top-``k`` (all items when ``k`` is None) by cosine similarity."""
    if len(index) == 0:
        raise EmptyGallery("gallery is empty")
    if k is not None and k < 1:
        raise ValidationError("k must be at least 1")
    idx = index.order(q, _exclusions(exclude_id))
    if k is not None:
        idx = idx[:k]
    return index.ranked(q, idx)


def classify(q: np.ndarray, book: PrototypeBook) -> str:
    """Nearest prototype by cosine distance; ties go to the smaller name."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (book.dim,):
        raise DimensionMismatch(f"query of shape {q.shape}, prototype dim {book.dim}")
    # Maximizing <q, phi> avoids the rounding of 1 - <q, phi> merging close scores.
    sim = book.vectors @ q
    best = np.flatnonzero(sim == sim.max())
    return min(book.names[i] for i in best)


def prototype_gallery(book: PrototypeBook) -> GalleryIndex:
    """Prototypes as a gallery whose item ids are the category names."""
    return GalleryIndex(book.names, ["prototype"] * len(book), book.names, book.vectors)
