"""Retrieval and classification metrics.

All retrieval metrics take a :class:`RelevanceList`: binary relevance flags in
rank order plus the number of relevant items in the whole gallery (which may
exceed the number of flags when a ranked list is truncated).

Conventions:

* AP@all divides by the total relevant count; AP@K divides by
  ``min(total, K)``, so a perfect top-K ranking scores 1.
* DCG uses binary gains, no discount at rank 1, ``1 / log2(i)`` from rank 2
  on, normalized by the DCG of the ideal ranking.
* Intent-aware AP weights per-domain AP by how often the query category
  occurs in each target domain.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyInput, InconsistentLabels, NoRelevantItems, UnknownMetric, ValidationError
from .search import RankedList

E_MEASURE_CUTOFF = 32
CSV_HEADER = ("metric", "source_domains", "target_domains", "k", "value", "queries", "skipped")


@dataclass(frozen=True)
class RelevanceList:
    flags: np.ndarray
    total_relevant: int

    def __post_init__(self):
        flags = np.asarray(self.flags, dtype=bool).reshape(-1)
        if self.total_relevant < 0:
            raise ValidationError("total_relevant must be non-negative")
        if int(flags.sum()) > self.total_relevant:
            raise InconsistentLabels(
                f"{int(flags.sum())} relevant flags but only {self.total_relevant} relevant in gallery"
            )
        object.__setattr__(self, "flags", flags)

    @classmethod
    def of(cls, flags: Sequence, total_relevant: int | None = None) -> "RelevanceList":
        flags = np.asarray(flags, dtype=bool)
        return cls(flags, int(flags.sum()) if total_relevant is None else total_relevant)

    def hits(self, n: int) -> int:
        """Relevant items among the first ``n`` ranks."""
        return int(self.flags[:n].sum())


def _require_relevant(rel: RelevanceList) -> None:
    if rel.total_relevant < 1:
        raise NoRelevantItems("no relevant item in the gallery")


def average_precision(rel: RelevanceList, cutoff: int | None = None) -> float:
    """AP over the first ``cutoff`` ranks (all ranks when ``cutoff`` is None)."""
    _require_relevant(rel)
    if cutoff is not None and cutoff < 1:
        raise ValidationError("cutoff must be at least 1")
    flags = rel.flags if cutoff is None else rel.flags[:cutoff]
    denom = rel.total_relevant if cutoff is None else min(rel.total_relevant, cutoff)
    pos = np.flatnonzero(flags)
    if pos.size == 0:
        return 0.0
    precisions = np.arange(1, pos.size + 1) / (pos + 1)
    return float(precisions.sum() / denom)


def precision_at(rel: RelevanceList, k: int) -> float:
    if k < 1:
        raise ValidationError("K must be at least 1")
    return rel.hits(k) / k


def nearest_neighbour(rel: RelevanceList) -> float:
    return precision_at(rel, 1)


def tier_recalls(rel: RelevanceList) -> tuple[float, float]:
    """First- and second-tier recall: hits in the top K and 2K, over K = total relevant."""
    _require_relevant(rel)
    k = rel.total_relevant
    return rel.hits(k) / k, min(1.0, rel.hits(2 * k) / k)


def e_measure(rel: RelevanceList, cutoff: int = E_MEASURE_CUTOFF) -> float:
    """Harmonic mean of precision and recall over the top ``cutoff`` ranks."""
    _require_relevant(rel)
    hits = rel.hits(cutoff)
    if hits == 0:
        return 0.0
    p = hits / cutoff
    r = hits / rel.total_relevant
    return 2.0 * p * r / (p + r)


def _discounts(n: int) -> np.ndarray:
    d = np.ones(n)
    if n > 1:
        d[1:] = 1.0 / np.log2(np.arange(2, n + 1))
    return d


def dcg(rel: RelevanceList) -> float:
    """Normalized discounted cumulated gain."""
    _require_relevant(rel)
    n = len(rel.flags)
    got = float(_discounts(n)[rel.flags].sum()) if n else 0.0
    ideal = float(_discounts(rel.total_relevant).sum())
    return got / ideal


def intent_aware_ap(
    per_domain: Mapping[str, RelevanceList],
    counts: Mapping[str, int] | None = None,
    k: int | None = None,
) -> float:
    """Per-domain AP@K weighted by the query category's occurrences per domain.

    Each relevance list marks, over the same ranking, the items that are
    relevant *and* belong to that domain. ``counts`` defaults to each list's
    ``total_relevant``; domains with zero count carry zero weight.
    """
    if counts is None:
        counts = {d: r.total_relevant for d, r in per_domain.items()}
    total = sum(counts.get(d, 0) for d in per_domain)
    if total <= 0:
        raise NoRelevantItems("query category occurs in no target domain")
    score = 0.0
    for d, rel in per_domain.items():
        c = counts.get(d, 0)
        if c > 0:
            score += (c / total) * average_precision(rel, k)
    return score


def intent_aware_map(
    per_domain_rels: Mapping[str, RelevanceList],
    gallery_category_counts: Mapping[str, int],
    k: int | None = None,
) -> float:
    """Intent-aware AP of a single query; :func:`evaluate` averages it over queries."""
    return intent_aware_ap(per_domain_rels, gallery_category_counts, k)


def accuracy(predictions: Iterable[tuple[str, str]]) -> float:
    pairs = list(predictions)
    if not pairs:
        raise EmptyInput("no predictions")
    return sum(p == t for p, t in pairs) / len(pairs)


# ---------------------------------------------------------------------------
# Aggregation over queries
# ---------------------------------------------------------------------------

METRICS = ("map", "prec", "nn", "ft", "st", "e", "dcg", "ia_map")
_NEEDS_K = {"prec"}
_NO_K = {"nn", "ft", "st", "e", "dcg"}


@dataclass(frozen=True)
class MetricSpec:
    name: str
    k: int | None = None

    def __post_init__(self):
        if self.name not in METRICS:
            raise UnknownMetric(f"unknown metric {self.name!r}; choose from {', '.join(METRICS)}")
        if self.name in _NEEDS_K and self.k is None:
            raise UnknownMetric(f"metric {self.name!r} needs a cutoff K")
        if self.name in _NO_K and self.k is not None:
            object.__setattr__(self, "k", None)
        if self.k is not None and self.k < 1:
            raise ValidationError("K must be at least 1")

    @property
    def k_label(self) -> str:
        if self.name in _NO_K:
            return ""
        return "all" if self.k is None else str(self.k)


def parse_metrics(text: str, k: int | None = None) -> list[MetricSpec]:
    """Parse ``map,map@100,prec,nn`` style lists; bare ``prec``/``ia_map`` use ``k``.

    Bare ``map`` always means mAP@all.
    """
    specs = []
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        name, _, cut = tok.partition("@")
        if cut:
            specs.append(MetricSpec(name, None if cut == "all" else _parse_k(cut)))
        elif name == "map":
            specs.append(MetricSpec(name, None))
        else:
            specs.append(MetricSpec(name, k if name in ("prec", "ia_map") else None))
    if not specs:
        raise UnknownMetric("no metrics requested")
    return specs


def _parse_k(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise UnknownMetric(f"bad cutoff {text!r}") from None


@dataclass(frozen=True)
class QueryResult:
    """A ranked list together with what the evaluator needs to score it."""

    category: str
    ranking: RankedList
    excluded: tuple[str, ...] = ()


@dataclass
class MetricValue:
    metric: str
    k: str
    value: float
    queries: int
    skipped: int


def _score(spec: MetricSpec, rel: RelevanceList, per_domain) -> float:
    name = spec.name
    if name == "map":
        return average_precision(rel, spec.k)
    if name == "prec":
        return precision_at(rel, spec.k)
    if name == "nn":
        return nearest_neighbour(rel)
    if name == "ft":
        return tier_recalls(rel)[0]
    if name == "st":
        return tier_recalls(rel)[1]
    if name == "e":
        return e_measure(rel)
    if name == "dcg":
        return dcg(rel)
    if name == "ia_map":
        return intent_aware_ap(per_domain(), k=spec.k)
    raise UnknownMetric(name)


def evaluate(
    queries: Sequence[QueryResult],
    gallery_labels: Mapping[str, tuple[str, str]],
    metrics: Sequence[MetricSpec],
) -> list[MetricValue]:
    """Mean of every metric over queries.

    ``gallery_labels`` maps item id to ``(domain, category)`` for the whole
    gallery. Queries with no relevant gallery item are left out of the mean
    and counted as skipped. The result does not depend on query order.
    """
    totals: dict[tuple[str, str], int] = {}
    for dom, cat in gallery_labels.values():
        totals[(dom, cat)] = totals.get((dom, cat), 0) + 1
    domains = sorted({d for d, _ in totals})

    per_metric: list[list[float]] = [[] for _ in metrics]
    skipped = [0] * len(metrics)
    for q in queries:
        r = q.ranking
        for item, dom, cat in zip(r.item_ids, r.domains, r.categories):
            if gallery_labels.get(item) != (dom, cat):
                raise InconsistentLabels(f"ranked item {item!r} disagrees with gallery labels")
        counts = {d: totals.get((d, q.category), 0) for d in domains}
        for item in q.excluded:
            lab = gallery_labels.get(item)
            if lab is not None and lab[1] == q.category:
                counts[lab[0]] -= 1
        is_rel = np.fromiter((c == q.category for c in r.categories), dtype=bool, count=len(r))
        rel = RelevanceList(is_rel, sum(counts.values()))

        def per_domain(is_rel=is_rel, counts=counts, r=r):
            doms = np.array(r.domains, dtype=object)
            return {d: RelevanceList(is_rel & (doms == d), counts[d]) for d in domains}

        for j, spec in enumerate(metrics):
            if rel.total_relevant == 0:
                skipped[j] += 1
                continue
            per_metric[j].append(_score(spec, rel, per_domain))

    out = []
    for j, spec in enumerate(metrics):
        vals = per_metric[j]
        # Sorting before summing makes the mean independent of query order.
        value = float(np.sum(np.sort(vals)) / len(vals)) if vals else float("nan")
        out.append(MetricValue(spec.name, spec.k_label, value, len(vals), skipped[j]))
    return out


@dataclass(frozen=True, order=True)
class ReportRow:
    metric: str
    source_domains: str
    target_domains: str
    k: str
    value: float = field(compare=False)
    queries: int = field(compare=False)
    skipped: int = field(compare=False)


def domain_set(names: Iterable[str]) -> str:
    """Serialize a domain set as sorted ``+``-joined names."""
    return "+".join(sorted(names))


def format_value(v: float) -> str:
    return "nan" if v != v else f"{v:.17g}"


def write_report(rows: Iterable[ReportRow], fh, comments: Sequence[str] = ()) -> None:
    """Write rows as CSV, sorted, so output bytes are independent of evaluation order."""
    for c in comments:
        fh.write(f"# {c}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sorted(rows):
        w.writerow([r.metric, r.source_domains, r.target_domains, r.k,
                    format_value(r.value), r.queries, r.skipped])


def report_to_string(rows: Iterable[ReportRow], comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    write_report(rows, buf, comments)
    return buf.getvalue()


def read_report(fh) -> list[ReportRow]:
    lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValidationError(f"unexpected report header {reader.fieldnames}")
    return [
        ReportRow(r["metric"], r["source_domains"], r["target_domains"], r["k"],
                  float(r["value"]), int(r["queries"]), int(r["skipped"]))
        for r in reader
    ]
