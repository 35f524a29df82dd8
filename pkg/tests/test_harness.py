import hashlib

import numpy as np
import pytest

from bench import MAP_ALL, cross_pairs
from oxds import harness
from oxds.dataset import (
    Label,
    load_dataset,
    read_features,
    read_labels,
    read_manifest,
    write_features,
    write_labels,
)
from oxds.errors import InsufficientSupport, MissingModel, ValidationError
from oxds.hypersphere import spherical_average
from oxds.mapper import TrainConfig, load_mapper
from oxds.metrics import parse_metrics
from oxds.search import classify
from oxds.synth import SynthConfig, generate

FAST = TrainConfig(learning_rate=5e-2, epochs=60, seed=0)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def train_all(manifest, models, cfg=FAST):
    for d in read_manifest(manifest).features:
        harness.cmd_train(manifest, d, models, cfg, echo=None)


@pytest.fixture(scope="module")
def zero_shot(tmp_path_factory):
    root = tmp_path_factory.mktemp("zs")
    man = generate(SynthConfig(num_categories=12, per_class=20, sigma=0.0, zero_shot_frac=0.25, seed=2),
                   root / "data")
    train_all(man, root / "models", TrainConfig(learning_rate=5e-2, epochs=300, seed=0))
    return man, root / "models"


def test_train_prints_losses_and_roundtrips(tmp_path):
    man = generate(SynthConfig(per_class=10), tmp_path / "d")
    lines = []
    path = harness.cmd_train(man, "sketch", tmp_path / "m", TrainConfig(epochs=3), echo=lines.append)
    assert [ln.split()[:2] for ln in lines] == [["epoch", str(i)] for i in range(4)]
    m = load_mapper(path)
    ds = load_dataset(man, ["sketch"])
    x = ds.domain("sketch").features
    direct = harness.train_domain(ds, "sketch", TrainConfig(epochs=3)).mapper
    assert np.max(np.abs(m.embed(x) - direct.embed(x))) <= 1e-12


def test_training_one_domain_leaves_others_untouched(tmp_path):
    man = generate(SynthConfig(per_class=10), tmp_path / "d")
    models = tmp_path / "m"
    harness.cmd_train(man, "photo", models, TrainConfig(epochs=2), echo=None)
    before = digest(models / "photo.map")
    harness.cmd_train(man, "sketch", models, TrainConfig(epochs=2), echo=None)
    harness.cmd_train(man, "sketch", models, TrainConfig(epochs=4), echo=None)
    assert digest(models / "photo.map") == before


def _strip_test_rows(src_manifest, dst):
    """Copy a zero-shot dataset, dropping every test-category sample."""
    m = read_manifest(src_manifest)
    splits = {ln.split()[0]: ln.split()[1] for ln in m.path(m.splits).read_text().splitlines()}
    labels = read_labels(m.path(m.labels))
    keep = {i: lab for i, lab in labels.items() if splits[lab.category] == "train"}
    dst.mkdir()
    for name in (m.prototypes, m.splits, "manifest.txt"):
        (dst / name).write_bytes(m.path(name).read_bytes())
    write_labels(dst / m.labels, keep)
    for dom, rel in m.features.items():
        ids, x = read_features(m.path(rel))
        rows = [j for j, i in enumerate(ids) if i in keep]
        write_features(dst / rel, [ids[j] for j in rows], x[rows])
    return dst / "manifest.txt"


def test_zero_shot_leakage_guard(tmp_path):
    man = generate(SynthConfig(per_class=15, zero_shot_frac=0.25, seed=1), tmp_path / "full")
    clean = _strip_test_rows(man, tmp_path / "clean")
    for d in ("sketch", "photo"):
        harness.cmd_train(man, d, tmp_path / "m_full", FAST, echo=None)
        harness.cmd_train(clean, d, tmp_path / "m_clean", FAST, echo=None)
        assert digest(tmp_path / "m_full" / f"{d}.map") == digest(tmp_path / "m_clean" / f"{d}.map")
    doms = ["photo", "sketch"]
    fits = []
    for mf, md in ((man, "m_full"), (clean, "m_clean")):
        ds = load_dataset(mf, doms)
        fits.append(harness.fit_hash_model(ds, harness.load_models(tmp_path / md, doms), doms, bits=8))
    assert np.array_equal(fits[0].rotation, fits[1].rotation)
    assert np.array_equal(fits[0].mean, fits[1].mean)


def test_six_domains_give_a_36_cell_matrix(tmp_path):
    man = generate(SynthConfig(num_domains=6, num_categories=6, per_class=10), tmp_path / "d")
    calls = []
    for d in read_manifest(man).features:
        calls.append(harness.cmd_train(man, d, tmp_path / "m", TrainConfig(epochs=2), echo=None))
    assert len(calls) == 6
    rows = harness.cmd_eval(man, tmp_path / "m", ["all"], ["all"], parse_metrics("map,nn", None))
    for metric in ("map", "nn"):
        cells = {(r.source_domains, r.target_domains) for r in rows if r.metric == metric}
        assert len(cells) == 36
    assert rows == sorted(rows)


def test_missing_model(tmp_path):
    man = generate(SynthConfig(per_class=5), tmp_path / "d")
    with pytest.raises(MissingModel):
        harness.cmd_eval(man, tmp_path / "nothing", ["all"], ["all"], MAP_ALL)


def test_refine_with_zero_lambda_is_bitwise_baseline(zero_shot):
    man, models = zero_shot
    base = harness.cmd_eval(man, models, ["all"], ["all"], MAP_ALL)
    same = harness.cmd_eval(man, models, ["all"], ["all"], MAP_ALL, refine=True, lam=0.0)
    assert [r.value for r in base] == [r.value for r in same]
    moved = harness.cmd_eval(man, models, ["all"], ["all"], MAP_ALL, refine=True, lam=0.7)
    assert [r.value for r in moved] != [] and len(moved) == len(base)


def test_default_lambdas():
    assert harness.default_lambda("zero_shot") == 0.7
    assert harness.default_lambda("generalized") == 0.7
    assert harness.default_lambda("many_shot") == 0.4


def test_multi_source_tuples(zero_shot):
    man, models = zero_shot
    ds = load_dataset(man)
    ctx = harness.EvalContext(ds, harness.load_models(models, list(ds.domains)))
    qs = harness.form_queries(ctx, ["sketch", "photo", "clipart"], seed=3)
    again = harness.form_queries(ctx, ["sketch", "photo", "clipart"], seed=3)
    assert [q.members for q in qs] == [q.members for q in again]
    cat = {i: c for d in ds.domains.values() for i, c in zip(d.ids, d.categories)}
    for q in qs:
        assert [m.split("-")[0] for m in q.members] == ["sketch", "photo", "clipart"]
        assert {cat[m] for m in q.members} == {q.category}
        assert len(set(q.members)) == 3


def test_query_members_are_excluded_from_their_own_ranking(zero_shot):
    man, models = zero_shot
    ds = load_dataset(man)
    ctx = harness.EvalContext(ds, harness.load_models(models, list(ds.domains)))
    seen = []
    g = ctx.gallery(["sketch", "photo"])

    def spy(vec, exclude):
        seen.append(exclude)
        return g.ranked(vec, g.order(vec, exclude))

    harness.evaluate_pair(ctx, ["sketch", "photo"], ["sketch", "photo"], MAP_ALL, ranker=spy, gallery=g)
    assert seen and all(len(ex) == 2 for ex in seen)


def test_fewshot_modes(zero_shot):
    man, models = zero_shot
    row, res = harness.cmd_fewshot(man, models, "sketch", "photo", "n_shot_target", n=1, runs=5, seed=0)
    assert res.accuracy == 1.0 and row.metric == "accuracy" and row.k == "1"

    a = harness.cmd_fewshot(man, models, "sketch", "photo", "n_shot_source", n=2, runs=1, seed=7)[1]
    b = harness.cmd_fewshot(man, models, "sketch", "photo", "n_shot_source", n=2, runs=1, seed=7)[1]
    assert a.accuracy == b.accuracy

    res = harness.cmd_fewshot(man, models, "sketch", "clipart", "w2v")[1]
    ds = load_dataset(man)
    ctx = harness.EvalContext(ds, harness.load_models(models, ["clipart"]))
    emb = ctx.queries("clipart")
    book = ds.book.subset(ds.test_categories)
    want = np.mean([classify(v, book) == c for v, c in zip(emb.vectors, emb.categories)])
    assert res.accuracy == want

    with pytest.raises(InsufficientSupport):
        harness.cmd_fewshot(man, models, "sketch", "photo", "n_shot_source", n=10_000, runs=1)
    with pytest.raises(ValidationError):
        harness.cmd_fewshot(man, models, "sketch", "photo", "bogus")


def test_multi_view_groups_are_averaged(tmp_path):
    man = generate(SynthConfig(per_class=15, seed=3), tmp_path / "d")
    m = read_manifest(man)
    labels = read_labels(m.path(m.labels))
    grouped = {}
    for item, lab in labels.items():
        j = int(item.rsplit("-", 1)[1])
        grp = f"{lab.category}-obj{j // 3}" if lab.domain == "photo" else None
        grouped[item] = Label(lab.domain, lab.category, grp)
    write_labels(m.path(m.labels), grouped)
    train_all(man, tmp_path / "m", TrainConfig(epochs=2))
    ds = load_dataset(man)
    mapper = harness.load_models(tmp_path / "m", ["photo"])["photo"]
    emb = harness.embed_domain(ds, mapper, "photo")
    assert len(emb.ids) == len(ds.domain("photo").ids) // 3
    d = ds.domain("photo")
    rows = [i for i, g in enumerate(d.groups) if g == emb.ids[0]]
    np.testing.assert_allclose(emb.vectors[0], spherical_average(mapper.embed(d.features[rows])), atol=1e-15)
    rows = harness.cmd_eval(man, tmp_path / "m", ["sketch"], ["photo"], MAP_ALL)
    assert rows[0].queries > 0


def test_generalized_gallery_contains_seen_classes(tmp_path):
    man = generate(SynthConfig(per_class=10, zero_shot_frac=0.25, seed=0), tmp_path / "d")
    text = man.read_text().replace("mode=zero_shot", "mode=generalized")
    man.write_text(text)
    train_all(man, tmp_path / "m", TrainConfig(epochs=2))
    ds = load_dataset(man)
    ctx = harness.EvalContext(ds, harness.load_models(tmp_path / "m", list(ds.domains)))
    cats = set(ctx.gallery(["photo"]).categories)
    assert cats & ds.train_categories and cats & ds.test_categories
    assert {c for c in ctx.queries("photo").categories} <= ds.test_categories


def test_hash_evaluation_tags_and_bounds(zero_shot):
    man, models = zero_shot
    rows, model = harness.cmd_hash(man, models, ["all"], ["all"], MAP_ALL, bits=16, iterations=10)
    assert model.bits == 16 and len(model.objectives) == 11
    real = cross_pairs(harness.cmd_eval(man, models, ["all"], ["all"], MAP_ALL))
    assert set(cross_pairs(rows)) == set(real)


def test_expand_domain_sets():
    assert harness.expand_domain_sets(["all"], ["a", "b"]) == [("a",), ("b",)]
    assert harness.expand_domain_sets(["a+b", "c"], ["a", "b", "c"]) == [("a", "b"), ("c",)]


def test_two_source_query_beats_the_worse_source(tmp_path):
    man = generate(SynthConfig(per_class=20, sigma=(0.5, 0.2, 0.05), seed=6), tmp_path / "d")
    train_all(man, tmp_path / "m")
    ds = load_dataset(man)
    ctx = harness.EvalContext(ds, harness.load_models(tmp_path / "m", list(ds.domains)))
    sk, ph = ctx.queries("sketch"), ctx.queries("photo")
    vec = {**dict(zip(sk.ids, sk.vectors)), **dict(zip(ph.ids, ph.vectors))}
    checked = 0
    for q in harness.form_queries(ctx, ["sketch", "photo"], seed=0):
        proto = ds.book[q.category]
        singles = [float(vec[m] @ proto) for m in q.members]
        if sum(singles) <= 0:
            continue
        assert float(q.vector @ proto) > min(singles)
        checked += 1
    assert checked > 0.9 * len(sk.ids)
