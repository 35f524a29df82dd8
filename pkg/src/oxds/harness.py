"""End-to-end workflows over a dataset manifest.

Every domain is trained on its own and stored as ``<models>/<domain>.map``, so
adding a domain is one extra training run and never touches existing models.
Evaluations embed the evaluation split of each domain, form queries from one
or several source domains, optionally refine them against the target gallery,
and score exact rankings.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import itq as itq_mod
from .dataset import Dataset, load_dataset
from .errors import (
    EmptyDataset,
    EmptyGallery,
    InconsistentLabels,
    InsufficientSupport,
    MissingModel,
    ValidationError,
)
from .hypersphere import slerp, spherical_average
from .mapper import DomainMapper, TrainConfig, TrainResult, load_mapper, save_mapper, train
from .metrics import (
    MetricSpec,
    QueryResult,
    ReportRow,
    accuracy,
    domain_set,
    evaluate,
)
from .prototypes import PrototypeBook, exemplar_prototype, refine_support
from .search import GalleryIndex, RankedList, classify

log = logging.getLogger(__name__)

LAMBDA_UNSEEN = 0.7
LAMBDA_SEEN = 0.4
MODEL_SUFFIX = ".map"


def default_lambda(mode: str) -> float:
    return LAMBDA_SEEN if mode == "many_shot" else LAMBDA_UNSEEN


def model_path(models_dir, domain: str) -> Path:
    return Path(models_dir) / f"{domain}{MODEL_SUFFIX}"


def load_models(models_dir, domains: Iterable[str]) -> dict[str, DomainMapper]:
    out = {}
    for d in domains:
        p = model_path(models_dir, d)
        if not p.exists():
            raise MissingModel(f"no trained model for domain {d!r} at {p}")
        m = load_mapper(p)
        if m.domain != d:
            raise MissingModel(f"{p} holds a model for domain {m.domain!r}, not {d!r}")
        out[d] = m
    dims = {m.d_out for m in out.values()}
    if len(dims) > 1:
        raise ValidationError(f"models disagree on output dimension: {sorted(dims)}")
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_domain(ds: Dataset, domain: str, cfg: TrainConfig, on_epoch=None) -> TrainResult:
    """Train one domain's mapper on its training rows only."""
    rows = ds.training_rows(domain)
    if not rows.ids:
        raise EmptyDataset(f"domain {domain!r} has no training items")
    return train(domain, rows.features, rows.categories, ds.training_book(), cfg, on_epoch)


def cmd_train(
    manifest,
    domain: str,
    models_dir,
    cfg: TrainConfig,
    echo: Callable[[str], None] | None = print,
) -> Path:
    ds = load_dataset(manifest, domains=[domain])

    def on_epoch(epoch, loss):
        if echo is not None:
            echo(f"epoch {epoch} loss {_fmt(loss)}")

    result = train_domain(ds, domain, cfg, on_epoch)
    Path(models_dir).mkdir(parents=True, exist_ok=True)
    out = model_path(models_dir, domain)
    save_mapper(result.mapper, out)
    return out


def _fmt(x: float) -> str:
    return f"{x:.10g}"


# ---------------------------------------------------------------------------
# Embedding the evaluation split
# ---------------------------------------------------------------------------


@dataclass
class Embedded:
    """Embedded items of one domain; multi-view groups are already merged."""

    domain: str
    ids: list[str]
    categories: list[str]
    vectors: np.ndarray

    def subset(self, keep: Iterable[str]) -> "Embedded":
        keep = set(keep)
        rows = [i for i, item in enumerate(self.ids) if item in keep]
        return Embedded(self.domain, [self.ids[i] for i in rows],
                        [self.categories[i] for i in rows], self.vectors[rows])


def embed_domain(ds: Dataset, mapper: DomainMapper, domain: str, ids: Iterable[str] | None = None) -> Embedded:
    """Embed items of ``domain`` (all, or those in ``ids``) and merge view groups.

    Views sharing a ``group`` label become a single entry, identified by the
    group name, whose embedding is the spherical mean of the views.
    """
    d = ds.domain(domain) if ids is None else ds.select(domain, ids)
    if not d.ids:
        return Embedded(domain, [], [], np.zeros((0, mapper.d_out)))
    emb = mapper.embed(d.features)
    out_ids, out_cats, out_vecs = [], [], []
    groups: dict[str, list[int]] = {}
    slot: dict[str, int] = {}
    for i, (item, grp) in enumerate(zip(d.ids, d.groups)):
        if grp is None:
            out_ids.append(item)
            out_cats.append(d.categories[i])
            out_vecs.append(emb[i])
        else:
            if grp not in groups:
                slot[grp] = len(out_ids)
                out_ids.append(grp)
                out_cats.append(d.categories[i])
                out_vecs.append(None)
            groups.setdefault(grp, []).append(i)
    for grp, rows in groups.items():
        cats = {d.categories[i] for i in rows}
        if len(cats) != 1:
            raise InconsistentLabels(f"view group {grp!r} mixes categories {sorted(cats)}")
        out_vecs[slot[grp]] = spherical_average(emb[rows])
    if len(set(out_ids)) != len(out_ids):
        raise InconsistentLabels(f"group names collide with item ids in domain {domain!r}")
    return Embedded(domain, out_ids, out_cats, np.vstack(out_vecs))


class EvalContext:
    """Embeddings of the evaluation split, computed once per domain."""

    def __init__(self, ds: Dataset, mappers: Mapping[str, DomainMapper]):
        self.ds = ds
        self.mappers = dict(mappers)
        self._query: dict[str, Embedded] = {}
        self._gallery: dict[str, Embedded] = {}

    def queries(self, domain: str) -> Embedded:
        if domain not in self._query:
            self._query[domain] = embed_domain(self.ds, self.mappers[domain], domain, self.ds.eval_query_ids)
        return self._query[domain]

    def gallery_part(self, domain: str) -> Embedded:
        if domain not in self._gallery:
            self._gallery[domain] = embed_domain(self.ds, self.mappers[domain], domain, self.ds.eval_gallery_ids)
        return self._gallery[domain]

    def gallery(self, targets: Sequence[str]) -> GalleryIndex:
        parts = [self.gallery_part(d) for d in dict.fromkeys(targets)]
        ids = [i for p in parts for i in p.ids]
        if not ids:
            raise EmptyGallery(f"no evaluation items in target domains {sorted(set(targets))}")
        return GalleryIndex(
            ids,
            [p.domain for p in parts for _ in p.ids],
            [c for p in parts for c in p.categories],
            np.vstack([p.vectors for p in parts]),
        )


def _rng_for(seed: int, *keys: str) -> np.random.Generator:
    salt = [zlib.crc32(k.encode()) for k in keys]
    return np.random.default_rng([seed, *salt])


@dataclass
class Query:
    category: str
    members: tuple[str, ...]
    vector: np.ndarray


def form_queries(ctx: EvalContext, sources: Sequence[str], seed: int) -> list[Query]:
    """One query per evaluation item of the first source domain.

    With several sources, each anchor is paired with a randomly drawn
    same-category item from every other source domain (never reusing an item
    within a tuple); anchors without a partner are dropped. The tuple's
    embeddings are averaged on the sphere.
    """
    anchor = ctx.queries(sources[0])
    others = [ctx.queries(d) for d in sources[1:]]
    by_cat = []
    for emb in others:
        idx: dict[str, list[int]] = {}
        for i, c in enumerate(emb.categories):
            idx.setdefault(c, []).append(i)
        by_cat.append(idx)
    rng = _rng_for(seed, "pairing", "+".join(sources))
    out = []
    for i, (item, cat) in enumerate(zip(anchor.ids, anchor.categories)):
        members = [item]
        vecs = [anchor.vectors[i]]
        ok = True
        for emb, idx in zip(others, by_cat):
            pool = [j for j in idx.get(cat, []) if emb.ids[j] not in members]
            if not pool:
                ok = False
                break
            j = pool[int(rng.integers(len(pool)))]
            members.append(emb.ids[j])
            vecs.append(emb.vectors[j])
        if not ok:
            continue
        vec = vecs[0] if len(vecs) == 1 else spherical_average(vecs)
        out.append(Query(cat, tuple(members), vec))
    return out


def refine_vector(q: np.ndarray, gallery: GalleryIndex, lam: float, exclude: Sequence[str]) -> np.ndarray:
    if lam == 0.0:
        return q
    idx = gallery.order(q, exclude)
    if idx.size == 0:
        raise EmptyGallery("nothing left in gallery after exclusions")
    return slerp(q, gallery.embeddings[idx[0]], lam)


def _gallery_labels(g: GalleryIndex) -> dict[str, tuple[str, str]]:
    return {i: (d, c) for i, d, c in zip(g.item_ids, g.domains, g.categories)}


def evaluate_pair(
    ctx: EvalContext,
    sources: Sequence[str],
    targets: Sequence[str],
    metrics: Sequence[MetricSpec],
    refine: bool = False,
    lam: float | None = None,
    seed: int = 0,
    ranker: Callable[[np.ndarray, Sequence[str]], RankedList] | None = None,
    gallery: GalleryIndex | None = None,
) -> list[ReportRow]:
    """Score one (source set, target set) combination.

    Query members found in the gallery are excluded from their own ranking.
    ``ranker`` replaces exact cosine ranking (used for Hamming search).
    """
    if lam is None:
        lam = default_lambda(ctx.ds.mode)
    if gallery is None:
        gallery = ctx.gallery(targets)
    results = []
    for q in form_queries(ctx, sources, seed):
        exclude = tuple(m for m in q.members if m in gallery)
        vec = refine_vector(q.vector, gallery, lam, exclude) if refine else q.vector
        if ranker is None:
            ranking = gallery.ranked(vec, gallery.order(vec, exclude))
        else:
            ranking = ranker(vec, exclude)
        results.append(QueryResult(q.category, ranking, exclude))
    src, tgt = domain_set(sources), domain_set(targets)
    return [
        ReportRow(v.metric, src, tgt, v.k, v.value, v.queries, v.skipped)
        for v in evaluate(results, _gallery_labels(gallery), metrics)
    ]


def expand_domain_sets(groups: Sequence[str], available: Sequence[str]) -> list[tuple[str, ...]]:
    """``all`` expands to every domain on its own; ``a+b`` is a multi-domain set."""
    out = []
    for g in groups:
        if g == "all":
            out.extend((d,) for d in available)
        else:
            out.append(tuple(p for p in g.split("+") if p))
    return out


def cmd_eval(
    manifest,
    models_dir,
    sources: Sequence[str],
    targets: Sequence[str],
    metrics: Sequence[MetricSpec],
    refine: bool = False,
    lam: float | None = None,
    seed: int = 0,
) -> list[ReportRow]:
    ds_domains = _manifest_domains(manifest)
    src_sets = expand_domain_sets(sources, ds_domains)
    tgt_sets = expand_domain_sets(targets, ds_domains)
    needed = sorted({d for s in src_sets + tgt_sets for d in s})
    ds = load_dataset(manifest, domains=needed)
    ctx = EvalContext(ds, load_models(models_dir, needed))
    rows = []
    for s in src_sets:
        for t in tgt_sets:
            rows.extend(evaluate_pair(ctx, s, t, metrics, refine, lam, seed))
    return sorted(rows)


def _manifest_domains(manifest) -> list[str]:
    from .dataset import read_manifest

    return list(read_manifest(manifest).features)


# ---------------------------------------------------------------------------
# Binary codes
# ---------------------------------------------------------------------------


def fit_hash_model(
    ds: Dataset,
    mappers: Mapping[str, DomainMapper],
    domains: Sequence[str],
    bits: int = itq_mod.DEFAULT_BITS,
    iterations: int = itq_mod.DEFAULT_ITERATIONS,
    seed: int = 0,
) -> itq_mod.ItqModel:
    """Fit ITQ on the training-split embeddings of ``domains`` only."""
    train_emb = [mappers[d].embed(ds.training_rows(d).features) for d in sorted(domains)]
    return itq_mod.fit_itq(np.vstack(train_emb), bits, iterations, seed)


def cmd_hash(
    manifest,
    models_dir,
    sources: Sequence[str],
    targets: Sequence[str],
    metrics: Sequence[MetricSpec],
    bits: int = itq_mod.DEFAULT_BITS,
    iterations: int = itq_mod.DEFAULT_ITERATIONS,
    refine: bool = False,
    lam: float | None = None,
    seed: int = 0,
) -> tuple[list[ReportRow], itq_mod.ItqModel]:
    """Evaluate with ITQ codes and Hamming ranking.

    The ITQ transform is fitted on training-split embeddings of every domain
    involved. Queries are refined in the real-valued space first, then encoded;
    galleries are encoded unrefined.
    """
    ds_domains = _manifest_domains(manifest)
    src_sets = expand_domain_sets(sources, ds_domains)
    tgt_sets = expand_domain_sets(targets, ds_domains)
    needed = sorted({d for s in src_sets + tgt_sets for d in s})
    ds = load_dataset(manifest, domains=needed)
    mappers = load_models(models_dir, needed)
    model = fit_hash_model(ds, mappers, needed, bits, iterations, seed)
    ctx = EvalContext(ds, mappers)

    rows = []
    for t in tgt_sets:
        gallery = ctx.gallery(t)
        codes = itq_mod.encode_many(model, gallery.item_ids, gallery.embeddings)

        def ranker(vec, exclude, codes=codes, gallery=gallery):
            q = itq_mod.encode(model, vec)
            return itq_mod.hamming_search(q, codes, None, gallery.domains, gallery.categories, exclude)

        for s in src_sets:
            rows.extend(evaluate_pair(ctx, s, t, metrics, refine, lam, seed, ranker, gallery))
    return sorted(rows), model


# ---------------------------------------------------------------------------
# Few-shot classification
# ---------------------------------------------------------------------------

FEWSHOT_MODES = ("w2v", "n_shot_source", "n_shot_target")


@dataclass
class FewShotResult:
    mode: str
    accuracy: float
    runs: list[float]
    items: int


def fewshot(
    ctx: EvalContext,
    source: str,
    target: str,
    mode: str,
    n: int = 1,
    runs: int = 500,
    lam: float = LAMBDA_UNSEEN,
    seed: int = 0,
) -> FewShotResult:
    """Classify unseen-category target items against per-mode prototypes.

    w2v uses the semantic prototypes directly. The n-shot modes average ``n``
    sampled support embeddings per category (from the source or the target
    domain), then slerp each toward its semantic prototype by ``lam``.
    Target supports are left out of the items being classified.
    """
    if mode not in FEWSHOT_MODES:
        raise ValidationError(f"unknown few-shot mode {mode!r}; choose from {FEWSHOT_MODES}")
    test_cats = sorted(ctx.ds.test_categories)
    if not test_cats:
        raise ValidationError("few-shot evaluation needs test categories")
    book = ctx.ds.book.subset(test_cats)
    keep = {c for c in test_cats}
    tgt = ctx.queries(target)
    rows = [i for i, c in enumerate(tgt.categories) if c in keep]
    if not rows:
        raise EmptyGallery(f"no test-category items in target domain {target!r}")

    if mode == "w2v":
        preds = [(classify(tgt.vectors[i], book), tgt.categories[i]) for i in rows]
        acc = accuracy(preds)
        return FewShotResult(mode, acc, [acc], len(rows))

    if n < 1:
        raise ValidationError("n must be at least 1")
    support_dom = ctx.queries(source if mode == "n_shot_source" else target)
    pools: dict[str, list[int]] = {c: [] for c in test_cats}
    for i, c in enumerate(support_dom.categories):
        if c in pools:
            pools[c].append(i)
    for c, pool in pools.items():
        if len(pool) < n:
            raise InsufficientSupport(f"category {c!r} has {len(pool)} support candidates, need {n}")

    rng = _rng_for(seed, "fewshot", mode, source, target)
    accs = []
    for _ in range(runs):
        protos = {}
        used = set()
        for c in test_cats:
            pick = rng.choice(pools[c], size=n, replace=False)
            used.update(support_dom.ids[j] for j in pick)
            p0 = exemplar_prototype(support_dom.vectors[np.sort(pick)])
            protos[c] = refine_support(p0, c, book, lam)
        shot_book = book.replace(protos)
        preds = [
            (classify(tgt.vectors[i], shot_book), tgt.categories[i])
            for i in rows
            if tgt.ids[i] not in used
        ]
        accs.append(accuracy(preds))
    mean = float(np.sum(np.sort(accs)) / len(accs))
    return FewShotResult(mode, mean, accs, len(rows))


def cmd_fewshot(
    manifest,
    models_dir,
    source: str,
    target: str,
    mode: str,
    n: int = 1,
    runs: int = 500,
    lam: float = LAMBDA_UNSEEN,
    seed: int = 0,
) -> tuple[ReportRow, FewShotResult]:
    domains = sorted({source, target})
    ds = load_dataset(manifest, domains=domains)
    ctx = EvalContext(ds, load_models(models_dir, domains))
    res = fewshot(ctx, source, target, mode, n, runs, lam, seed)
    k = "" if mode == "w2v" else str(n)
    return ReportRow("accuracy", source, target, k, res.accuracy, res.items, 0), res
