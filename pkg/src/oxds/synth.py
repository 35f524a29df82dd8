"""Deterministic multi-domain benchmark with known ground truth.

Each category gets a near-orthogonal unit prototype. Every domain owns a
hidden full-rank linear map ``M_d`` (``D_in x D``, singular values spread over
``[1, kappa]``), and a sample of category ``y`` in domain ``d`` is
``M_d (phi(y) + eps)`` with isotropic Gaussian ``eps``. Noise lives in
prototype space, so ``sigma`` means the same thing for every domain.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Label, Manifest, write_features, write_labels, write_manifest, write_splits
from .errors import InfeasibleSeparation, ValidationError
from .prototypes import PrototypeBook, save_prototypes

DOMAIN_NAMES = ("sketch", "photo", "clipart", "painting", "pencil", "infograph")
MIN_SEPARATION = 0.5
RESTARTS = 200


@dataclass(frozen=True)
class SynthConfig:
    num_categories: int = 20
    num_domains: int = 3
    embed_dim: int = 16
    feature_dim: int = 32
    per_class: int = 50
    # One value for all domains, or one per domain.
    sigma: float | tuple[float, ...] = 0.05
    kappa: float = 5.0
    seed: int = 0
    zero_shot_frac: float = 0.0
    nonlinear: bool = False
    holdout: float = 0.2

    def __post_init__(self):
        if self.num_categories < 2:
            raise ValidationError("need at least 2 categories")
        if self.num_domains < 2:
            raise ValidationError("need at least 2 domains")
        if self.per_class < 1:
            raise ValidationError("need at least 1 sample per class")
        if self.embed_dim < 2:
            raise ValidationError("embed_dim must be at least 2")
        if self.feature_dim < self.embed_dim:
            raise ValidationError("feature_dim must be >= embed_dim")
        if self.kappa < 1:
            raise ValidationError("kappa must be >= 1")
        if any(s < 0 for s in self.sigmas):
            raise ValidationError("sigma must be non-negative")
        if not 0.0 <= self.zero_shot_frac < 1.0:
            raise ValidationError("zero_shot_frac must lie in [0, 1)")

    @property
    def sigmas(self) -> tuple[float, ...]:
        if isinstance(self.sigma, (int, float)):
            return (float(self.sigma),) * self.num_domains
        if len(self.sigma) == 1:
            return (float(self.sigma[0]),) * self.num_domains
        if len(self.sigma) != self.num_domains:
            raise ValidationError(f"{len(self.sigma)} sigmas for {self.num_domains} domains")
        return tuple(float(s) for s in self.sigma)

    @property
    def domains(self) -> tuple[str, ...]:
        return domain_names(self.num_domains)

    @property
    def categories(self) -> tuple[str, ...]:
        width = len(str(self.num_categories - 1))
        return tuple(f"cat{i:0{width}d}" for i in range(self.num_categories))


def domain_names(k: int) -> tuple[str, ...]:
    if k <= len(DOMAIN_NAMES):
        return DOMAIN_NAMES[:k]
    return tuple(f"domain{i}" for i in range(k))


def _random_unit(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _min_distance(p: np.ndarray) -> float:
    g = p @ p.T
    np.fill_diagonal(g, -np.inf)
    return 1.0 - float(g.max())


def sample_prototypes(c: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Near-orthogonal unit prototypes.

    For ``c <= dim / 2`` each vector is re-drawn until its cosine distance to
    all earlier ones is at least 0.5. Otherwise the best of 200 independent
    draws (largest minimum pairwise distance) is kept.
    """
    if 2 * c <= dim:
        out = np.empty((c, dim))
        for i in range(c):
            for _ in range(RESTARTS):
                v = _random_unit(rng, 1, dim)[0]
                if i == 0 or np.max(out[:i] @ v) <= 1.0 - MIN_SEPARATION:
                    out[i] = v
                    break
            else:
                raise InfeasibleSeparation(
                    f"could not place prototype {i} of {c} in {dim} dims after {RESTARTS} draws"
                )
        return out
    best, best_sep = None, -np.inf
    for _ in range(RESTARTS):
        p = _random_unit(rng, c, dim)
        sep = _min_distance(p)
        if sep > best_sep:
            best, best_sep = p, sep
    if best_sep <= 1e-6:
        raise InfeasibleSeparation(f"{c} prototypes in {dim} dims collapse (separation {best_sep:g})")
    return best


def domain_matrix(d_in: int, dim: int, kappa: float, rng: np.random.Generator) -> np.ndarray:
    """Random ``d_in x dim`` matrix with singular values evenly spread over [1, kappa]."""
    u, _ = np.linalg.qr(rng.standard_normal((d_in, dim)))
    v, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    sv = np.linspace(kappa, 1.0, dim)
    return (u * sv) @ v.T


def odd_nonlinearity(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


@dataclass
class SynthData:
    """In-memory form of a generated benchmark."""

    config: SynthConfig
    book: PrototypeBook
    matrices: dict[str, np.ndarray]
    ids: dict[str, list[str]]
    features: dict[str, np.ndarray]
    labels: dict[str, Label]
    splits: dict[str, str]

    @property
    def mode(self) -> str:
        return "zero_shot" if self.config.zero_shot_frac > 0 else "many_shot"


def build(cfg: SynthConfig) -> SynthData:
    rng = np.random.default_rng(cfg.seed)
    cats = cfg.categories
    protos = sample_prototypes(cfg.num_categories, cfg.embed_dim, rng)
    book = PrototypeBook(cats, protos)

    n_test = int(round(cfg.zero_shot_frac * len(cats)))
    if cfg.zero_shot_frac > 0 and not 1 <= n_test < len(cats):
        raise ValidationError(f"zero-shot fraction {cfg.zero_shot_frac} leaves no usable split")
    test = set(rng.permutation(len(cats))[:n_test].tolist())
    splits = {c: ("test" if i in test else "train") for i, c in enumerate(cats)}

    matrices, ids, features, labels = {}, {}, {}, {}
    for dom, sigma in zip(cfg.domains, cfg.sigmas):
        m = domain_matrix(cfg.feature_dim, cfg.embed_dim, cfg.kappa, rng)
        y = np.repeat(np.arange(len(cats)), cfg.per_class)
        latent = protos[y] + sigma * rng.standard_normal((len(y), cfg.embed_dim))
        x = latent @ m.T
        if cfg.nonlinear:
            x = odd_nonlinearity(x)
        dom_ids = [f"{dom}-{cats[c]}-{j:04d}" for c, j in zip(y, np.tile(np.arange(cfg.per_class), len(cats)))]
        matrices[dom] = m
        ids[dom] = dom_ids
        features[dom] = x
        for item_id, c in zip(dom_ids, y):
            labels[item_id] = Label(dom, cats[c])
    return SynthData(cfg, book, matrices, ids, features, labels, splits)


def generate(cfg: SynthConfig, out_dir: str | os.PathLike) -> Path:
    """Write a benchmark to ``out_dir``; returns the manifest path."""
    data = build(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_prototypes(data.book, out / "prototypes.txt")
    feature_files = {}
    for dom in cfg.domains:
        name = f"features_{dom}.txt"
        write_features(out / name, data.ids[dom], data.features[dom])
        feature_files[dom] = name
    write_labels(out / "labels.txt", data.labels)
    write_splits(out / "splits.txt", data.splits)
    manifest = Manifest(out, data.mode, "prototypes.txt", "labels.txt", "splits.txt",
                        feature_files, cfg.holdout, cfg.seed)
    path = out / "manifest.txt"
    write_manifest(path, manifest)
    return path


def parse_sigmas(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(","))
