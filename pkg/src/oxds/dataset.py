"""Dataset files: features, labels, category splits and the manifest tying them.

Feature file::

    OXDS-FEAT 1 <N> <D_in>
    <item_id> <f1> ... <fDin>

Label manifest, one item per line: ``<item_id> <domain> <category> [group]``.
Split file, one category per line: ``<category> train|test``.
Manifest: ``key=value`` lines, paths relative to the manifest's directory::

    mode=zero_shot
    prototypes=prototypes.txt
    labels=labels.txt
    splits=splits.txt
    features.sketch=features_sketch.txt
    holdout=0.2
    seed=0
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    InconsistentLabels,
    MissingDomain,
    ParseError,
    UnknownCategory,
    ValidationError,
)
from .prototypes import PrototypeBook, load_prototypes

FEAT_MAGIC = "OXDS-FEAT"
FORMAT_VERSION = 1
MODES = ("zero_shot", "many_shot", "generalized")
DEFAULT_HOLDOUT = 0.2
GENERALIZED_RESERVE = 0.2


def write_features(path, ids: Iterable[str], features: np.ndarray) -> None:
    ids = list(ids)
    features = np.asarray(features, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{FEAT_MAGIC} {FORMAT_VERSION} {len(ids)} {features.shape[1]}\n")
        for item_id, row in zip(ids, features):
            fh.write(item_id + " " + " ".join(f"{x:.17g}" for x in row) + "\n")


def read_features(path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty feature file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != FEAT_MAGIC:
        raise ParseError(f"{path}: bad header {lines[0]!r}")
    try:
        version, n, dim = (int(t) for t in header[1:])
    except ValueError:
        raise ParseError(f"{path}: bad header {lines[0]!r}") from None
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    if len(lines) - 1 != n:
        raise ParseError(f"{path}: header declares {n} rows, found {len(lines) - 1}")
    ids: list[str] = []
    feats = np.empty((n, dim))
    for i, line in enumerate(lines[1:]):
        tokens = line.split()
        if len(tokens) != dim + 1:
            raise ParseError(f"{path}:{i + 2}: expected {dim} values, got {len(tokens) - 1}")
        ids.append(tokens[0])
        try:
            feats[i] = [float(t) for t in tokens[1:]]
        except ValueError as exc:
            raise ParseError(f"{path}:{i + 2}: {exc}") from None
    if not np.all(np.isfinite(feats)):
        raise ParseError(f"{path}: non-finite feature values")
    if len(set(ids)) != len(ids):
        raise ParseError(f"{path}: duplicate item ids")
    return ids, feats


@dataclass(frozen=True)
class Label:
    domain: str
    category: str
    group: str | None = None


def write_labels(path, labels: Mapping[str, Label]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item_id, lab in labels.items():
            parts = [item_id, lab.domain, lab.category]
            if lab.group is not None:
                parts.append(lab.group)
            fh.write(" ".join(parts) + "\n")


def read_labels(path) -> dict[str, Label]:
    labels: dict[str, Label] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) not in (3, 4):
                raise ParseError(f"{path}:{lineno}: expected 3 or 4 fields")
            if tokens[0] in labels:
                raise ParseError(f"{path}:{lineno}: duplicate item id {tokens[0]!r}")
            labels[tokens[0]] = Label(tokens[1], tokens[2], tokens[3] if len(tokens) == 4 else None)
    return labels


def write_splits(path, splits: Mapping[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for category, part in splits.items():
            fh.write(f"{category} {part}\n")


def read_splits(path) -> dict[str, str]:
    splits: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 2 or tokens[1] not in ("train", "test"):
                raise ParseError(f"{path}:{lineno}: expected '<category> train|test'")
            if tokens[0] in splits:
                raise ParseError(f"{path}:{lineno}: category {tokens[0]!r} listed twice")
            splits[tokens[0]] = tokens[1]
    return splits


@dataclass
class Manifest:
    root: Path
    mode: str
    prototypes: str
    labels: str
    splits: str
    features: dict[str, str]
    holdout: float = DEFAULT_HOLDOUT
    seed: int = 0

    def path(self, rel: str) -> Path:
        return self.root / rel


def write_manifest(path, m: Manifest) -> None:
    lines = [
        f"mode={m.mode}",
        f"prototypes={m.prototypes}",
        f"labels={m.labels}",
        f"splits={m.splits}",
    ]
    lines += [f"features.{d}={p}" for d, p in m.features.items()]
    lines += [f"holdout={m.holdout!r}", f"seed={m.seed}"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read manifest {path}: {exc}") from None
    kv: dict[str, str] = {}
    features: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("features."):
            features[key[len("features.") :]] = value
        else:
            kv[key] = value
    for key in ("mode", "prototypes", "labels", "splits"):
        if key not in kv:
            raise ParseError(f"{path}: missing '{key}='")
    if kv["mode"] not in MODES:
        raise ParseError(f"{path}: mode must be one of {MODES}, got {kv['mode']!r}")
    if not features:
        raise ParseError(f"{path}: no 'features.<domain>=' entries")
    try:
        holdout = float(kv.get("holdout", DEFAULT_HOLDOUT))
        seed = int(kv.get("seed", 0))
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return Manifest(path.parent, kv["mode"], kv["prototypes"], kv["labels"], kv["splits"],
                    features, holdout, seed)


def _hash_key(seed: int, item_id: str) -> bytes:
    return hashlib.sha256(f"{seed}:{item_id}".encode()).digest()


def seeded_fraction(item_ids: Iterable[str], frac: float, seed: int) -> set[str]:
    """Deterministic subset of about ``frac`` of ``item_ids``.

    Items are ordered by a salted hash of their id, so membership does not
    depend on which other items are present in the files.
    """
    ordered = sorted(item_ids, key=lambda i: _hash_key(seed, i))
    take = int(round(frac * len(ordered)))
    return set(ordered[:take])


@dataclass
class DomainData:
    ids: list[str]
    features: np.ndarray
    categories: list[str]
    groups: list[str | None]


@dataclass
class Dataset:
    """Loaded and cross-validated dataset, with its train / eval partitions."""

    manifest: Manifest
    book: PrototypeBook
    splits: dict[str, str]
    domains: dict[str, DomainData]
    train_ids: frozenset[str] = field(default_factory=frozenset)
    eval_query_ids: frozenset[str] = field(default_factory=frozenset)
    eval_gallery_ids: frozenset[str] = field(default_factory=frozenset)

    @property
    def mode(self) -> str:
        return self.manifest.mode

    @property
    def train_categories(self) -> set[str]:
        return {c for c, p in self.splits.items() if p == "train"}

    @property
    def test_categories(self) -> set[str]:
        return {c for c, p in self.splits.items() if p == "test"}

    def domain(self, name: str) -> DomainData:
        try:
            return self.domains[name]
        except KeyError:
            raise MissingDomain(f"domain {name!r} not in manifest") from None

    def select(self, domain: str, ids: Iterable[str]) -> DomainData:
        """Rows of ``domain`` whose id is in ``ids``, in file order."""
        d = self.domain(domain)
        keep = set(ids)
        rows = [i for i, item in enumerate(d.ids) if item in keep]
        return DomainData(
            [d.ids[i] for i in rows],
            d.features[rows],
            [d.categories[i] for i in rows],
            [d.groups[i] for i in rows],
        )

    def training_rows(self, domain: str) -> DomainData:
        return self.select(domain, self.train_ids)

    def training_book(self) -> PrototypeBook:
        if self.mode == "many_shot":
            return self.book
        return self.book.subset(self.train_categories)


def load_dataset(manifest_path, domains: Iterable[str] | None = None) -> Dataset:
    """Load every file a manifest references and derive the partitions.

    zero_shot: training uses all items of train categories; evaluation uses
    all items of test categories. many_shot: a seeded ``holdout`` fraction of
    every (domain, category) is held out for evaluation. generalized: as
    zero_shot, plus a seeded 20% of every seen (domain, category) is kept out
    of training and added to the evaluation gallery.
    """
    m = read_manifest(manifest_path)
    book = load_prototypes(m.path(m.prototypes))
    labels = read_labels(m.path(m.labels))
    splits = read_splits(m.path(m.splits))
    for c in splits:
        if c not in book:
            raise UnknownCategory(f"split category {c!r} has no prototype")
    if m.mode == "zero_shot" and not {c for c, p in splits.items() if p == "test"}:
        raise ValidationError("zero_shot mode needs at least one test category")

    wanted = list(m.features) if domains is None else list(domains)
    data: dict[str, DomainData] = {}
    for dom in wanted:
        if dom not in m.features:
            raise MissingDomain(f"domain {dom!r} not in manifest")
        ids, feats = read_features(m.path(m.features[dom]))
        cats, groups = [], []
        for item_id in ids:
            lab = labels.get(item_id)
            if lab is None:
                raise InconsistentLabels(f"item {item_id!r} has no label")
            if lab.domain != dom:
                raise InconsistentLabels(
                    f"item {item_id!r} labeled domain {lab.domain!r}, found in {dom!r} features"
                )
            if lab.category not in book:
                raise UnknownCategory(f"item {item_id!r}: category {lab.category!r} has no prototype")
            cats.append(lab.category)
            groups.append(lab.group)
        data[dom] = DomainData(ids, feats, cats, groups)

    ds = Dataset(m, book, splits, data)
    _partition(ds)
    return ds


def _partition(ds: Dataset) -> None:
    m = ds.manifest
    # View groups are split as one unit so all views of an object stay together.
    by_group: dict[tuple[str, str], list[str]] = {}
    members: dict[str, list[str]] = {}
    for dom, d in ds.domains.items():
        for item_id, cat, grp in zip(d.ids, d.categories, d.groups):
            unit = item_id if grp is None else f"group:{dom}:{grp}"
            if unit not in members:
                by_group.setdefault((dom, cat), []).append(unit)
            members.setdefault(unit, []).append(item_id)

    train, query, gallery = set(), set(), set()
    for (dom, cat), ids in by_group.items():
        part = ds.splits.get(cat)
        if m.mode == "many_shot":
            held = seeded_fraction(ids, m.holdout, m.seed)
            train.update(i for i in ids if i not in held)
            query.update(held)
            gallery.update(held)
        elif part == "test":
            query.update(ids)
            gallery.update(ids)
        elif part == "train":
            if m.mode == "generalized":
                held = seeded_fraction(ids, GENERALIZED_RESERVE, m.seed)
                train.update(i for i in ids if i not in held)
                gallery.update(held)
            else:
                train.update(ids)

    def expand(units):
        return frozenset(i for u in units for i in members[u])

    ds.train_ids = expand(train)
    ds.eval_query_ids = expand(query)
    ds.eval_gallery_ids = expand(gallery)
