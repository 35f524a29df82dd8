"""Per-domain mapping onto the prototype hypersphere.

A :class:`DomainMapper` standardizes raw features, applies an affine map and
projects the result onto the unit sphere. It is trained against a fixed
:class:`~oxds.prototypes.PrototypeBook` by minimizing the cross-entropy of a
softmax over scaled cosine similarities to the prototypes. Gradients are
derived by hand; prototypes never receive one.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyDataset, ParseError, ValidationError, ZeroVector
from .hypersphere import EPS_NORM
from .prototypes import PrototypeBook

log = logging.getLogger(__name__)

MAP_MAGIC = "OXDS-MAP"
FORMAT_VERSION = 1
DEFAULT_DIM = 300


@dataclass(frozen=True)
class DomainMapper:
    domain: str
    weight: np.ndarray = field(repr=False)
    bias: np.ndarray = field(repr=False)
    input_mean: np.ndarray = field(repr=False)
    input_scale: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64)
        mu = np.array(self.input_mean, dtype=np.float64)
        sc = np.array(self.input_scale, dtype=np.float64)
        if w.ndim != 2:
            raise DimensionMismatch(f"weight must be 2-D, got shape {w.shape}")
        d_out, d_in = w.shape
        if b.shape != (d_out,) or mu.shape != (d_in,) or sc.shape != (d_in,):
            raise DimensionMismatch("bias / input_mean / input_scale do not match weight shape")
        if not np.all(sc > 0):
            raise ValidationError("input_scale must be strictly positive")
        if not self.domain or any(c.isspace() for c in self.domain):
            raise ValidationError(f"invalid domain name {self.domain!r}")
        for name, arr in (("weight", w), ("bias", b), ("input_mean", mu), ("input_scale", sc)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.input_mean) / self.input_scale

    def embed(self, features) -> np.ndarray:
        """Map a batch (``N x D_in``) of raw features to unit rows."""
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise DimensionMismatch(f"expected features of width {self.d_in}, got shape {x.shape}")
        z = self.standardize(x) @ self.weight.T + self.bias
        n = np.linalg.norm(z, axis=1)
        if x.shape[0] and not np.all(n > EPS_NORM):
            raise ZeroVector("mapper output vanished before normalization (degenerate weights)")
        return z / n[:, None]

    def with_params(self, weight: np.ndarray, bias: np.ndarray) -> "DomainMapper":
        return DomainMapper(self.domain, weight, bias, self.input_mean, self.input_scale)


def forward(m: DomainMapper, x) -> np.ndarray:
    """Embed a single raw feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch(f"expected a single feature vector, got shape {x.shape}")
    return m.embed(x[None, :])[0]


def init_mapper(
    domain: str,
    d_in: int,
    d_out: int,
    rng: np.random.Generator,
    input_mean=None,
    input_scale=None,
) -> DomainMapper:
    """Glorot-uniform weights, zero bias."""
    a = math.sqrt(6.0 / (d_in + d_out))
    weight = rng.uniform(-a, a, size=(d_out, d_in))
    mean = np.zeros(d_in) if input_mean is None else input_mean
    scale = np.ones(d_in) if input_scale is None else input_scale
    return DomainMapper(domain, weight, np.zeros(d_out), mean, scale)


def fit_standardization(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and standard deviation; constant features get scale 1."""
    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale = np.where(scale > 1e-12 * max(1.0, float(np.max(np.abs(mean)))), scale, 1.0)
    return mean, scale


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def posterior_from_embedding(f: np.ndarray, book: PrototypeBook, s: float) -> np.ndarray:
    """Softmax over ``-s * cosine_distance`` to every prototype.

    ``-s * (1 - <f, phi>)`` differs from ``s * <f, phi>`` by a constant, so the
    latter is used directly.
    """
    if s <= 0:
        raise ValueError("scale s must be positive")
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != book.dim:
        raise DimensionMismatch(f"embedding width {f.shape[-1]} vs prototype dim {book.dim}")
    return _softmax(s * (f @ book.vectors.T))


def posterior(m: DomainMapper, x, book: PrototypeBook, s: float = 20.0) -> np.ndarray:
    """Class posterior ``p(y | x, d)`` over the categories of ``book``."""
    if book.dim != m.d_out:
        raise DimensionMismatch(f"mapper output {m.d_out} vs prototype dim {book.dim}")
    return posterior_from_embedding(forward(m, x), book, s)


@dataclass(frozen=True)
class LabeledBatch:
    features: np.ndarray
    categories: tuple[str, ...]

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != len(self.categories):
            raise DimensionMismatch("features and categories disagree in length")
        if x.shape[0] < 1:
            raise EmptyDataset("batch is empty")
        if not np.all(np.isfinite(x)):
            raise ValidationError("batch features must be finite")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "categories", tuple(self.categories))


def _loss_and_grad(weight, bias, xs, labels, protos, s, need_grad=True):
    """Mean cross-entropy over a standardized batch and its parameter gradient.

    ``xs`` is ``B x D_in`` (already standardized), ``labels`` are row indices
    into ``protos`` (``C x D_out``).
    """
    z = xs @ weight.T + bias
    norms = np.linalg.norm(z, axis=1)
    if not np.all(norms > EPS_NORM):
        raise ZeroVector("mapper output vanished before normalization")
    f = z / norms[:, None]
    logits = s * (f @ protos.T)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    n = len(labels)
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    if not need_grad:
        return loss, None, None
    p = np.exp(shifted - log_norm[:, None])
    p[rows, labels] -= 1.0
    # d loss / d f, then through f = z / |z|: (I - f f^T) / |z|
    df = (s / n) * (p @ protos)
    dz = (df - f * np.sum(df * f, axis=1, keepdims=True)) / norms[:, None]
    return loss, dz.T @ xs, dz.sum(axis=0)


def _batch_arrays(m: DomainMapper, batch: LabeledBatch, book: PrototypeBook):
    if book.dim != m.d_out:
        raise DimensionMismatch(f"mapper output {m.d_out} vs prototype dim {book.dim}")
    if batch.features.shape[1] != m.d_in:
        raise DimensionMismatch(f"features of width {batch.features.shape[1]}, mapper expects {m.d_in}")
    return m.standardize(batch.features), book.indices(batch.categories)


def batch_loss(m: DomainMapper, batch: LabeledBatch, book: PrototypeBook, s: float = 20.0) -> float:
    xs, labels = _batch_arrays(m, batch, book)
    return _loss_and_grad(m.weight, m.bias, xs, labels, book.vectors, s, need_grad=False)[0]


def batch_gradient(
    m: DomainMapper, batch: LabeledBatch, book: PrototypeBook, s: float = 20.0
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`batch_loss` with respect to ``(weight, bias)``."""
    xs, labels = _batch_arrays(m, batch, book)
    _, gw, gb = _loss_and_grad(m.weight, m.bias, xs, labels, book.vectors, s)
    return gw, gb


@dataclass(frozen=True)
class TrainConfig:
    scale_s: float = 20.0
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    d_out: int | None = None

    def __post_init__(self):
        if not self.scale_s > 0:
            raise ValidationError("scale_s must be positive")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")


@dataclass
class TrainResult:
    mapper: DomainMapper
    # Full training-set loss before training, then after every epoch.
    losses: list[float]


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


def train(
    domain: str,
    features,
    categories: Sequence[str],
    book: PrototypeBook,
    cfg: TrainConfig = TrainConfig(),
    on_epoch=None,
) -> TrainResult:
    """Fit a mapper for one domain with Nesterov SGD and cosine-annealed steps.

    ``book`` must contain every training category; only its categories take
    part in the softmax. ``on_epoch(epoch, loss)`` is called with the initial loss (epoch 0)
    and after each epoch.
    """
    batch = LabeledBatch(features, categories)
    if cfg.d_out is not None and cfg.d_out != book.dim:
        raise DimensionMismatch(f"d_out {cfg.d_out} differs from prototype dim {book.dim}")
    labels = book.indices(batch.categories)
    rng = np.random.default_rng(cfg.seed)
    mean, scale = fit_standardization(batch.features)
    mapper = init_mapper(domain, batch.features.shape[1], book.dim, rng, mean, scale)
    xs = mapper.standardize(batch.features)
    protos = book.vectors
    s = cfg.scale_s

    weight = mapper.weight.copy()
    bias = mapper.bias.copy()
    vel_w = np.zeros_like(weight)
    vel_b = np.zeros_like(bias)
    n = xs.shape[0]
    steps_per_epoch = -(-n // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    losses = [_loss_and_grad(weight, bias, xs, labels, protos, s, need_grad=False)[0]]
    if on_epoch is not None:
        on_epoch(0, losses[0])
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, gw, gb = _loss_and_grad(weight, bias, xs[idx], labels[idx], protos, s)
            lr = cosine_lr(cfg.learning_rate, step, total)
            vel_w = cfg.momentum * vel_w + gw
            vel_b = cfg.momentum * vel_b + gb
            weight -= lr * (gw + cfg.momentum * vel_w)
            bias -= lr * (gb + cfg.momentum * vel_b)
            step += 1
        loss = _loss_and_grad(weight, bias, xs, labels, protos, s, need_grad=False)[0]
        losses.append(loss)
        if on_epoch is not None:
            on_epoch(epoch, loss)
        log.debug("%s epoch %d loss %.6f", domain, epoch, loss)
    return TrainResult(mapper.with_params(weight, bias), losses)


def save_mapper(m: DomainMapper, path: str | os.PathLike) -> None:
    def row(v):
        return " ".join(f"{x:.17g}" for x in v) + "\n"

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{MAP_MAGIC} {FORMAT_VERSION} {m.domain} {m.d_in} {m.d_out}\n")
        for w in m.weight:
            fh.write(row(w))
        fh.write(row(m.bias))
        fh.write(row(m.input_mean))
        fh.write(row(m.input_scale))


def load_mapper(path: str | os.PathLike) -> DomainMapper:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty model file")
    header = lines[0].split()
    if len(header) != 5 or header[0] != MAP_MAGIC:
        raise ParseError(f"{path}: bad header {lines[0]!r}")
    try:
        version, d_in, d_out = int(header[1]), int(header[3]), int(header[4])
    except ValueError:
        raise ParseError(f"{path}: bad header {lines[0]!r}") from None
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    if len(lines) != 1 + d_out + 3:
        raise ParseError(f"{path}: expected {d_out + 3} data lines, found {len(lines) - 1}")

    def parse(i, width):
        tokens = lines[i].split()
        if len(tokens) != width:
            raise ParseError(f"{path}:{i + 1}: expected {width} values, got {len(tokens)}")
        try:
            return np.array([float(t) for t in tokens])
        except ValueError as exc:
            raise ParseError(f"{path}:{i + 1}: {exc}") from None

    weight = np.vstack([parse(1 + r, d_in) for r in range(d_out)])
    return DomainMapper(
        header[2],
        weight,
        parse(1 + d_out, d_out),
        parse(2 + d_out, d_in),
        parse(3 + d_out, d_in),
    )
