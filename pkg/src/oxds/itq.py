"""Iterative quantization and Hamming-distance retrieval.

Embeddings are centered, projected on their top principal directions and
rotated by an orthogonal matrix chosen to minimize ``||sign(V R) - V R||^2``.
The rotation is learned by alternating between the sign assignment and an
orthogonal Procrustes update.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    ParseError,
    RankDeficient,
    TooFewSamples,
    ValidationError,
    WidthMismatch,
)
from .search import RankedList

DEFAULT_BITS = 64
DEFAULT_ITERATIONS = 50
CODE_MAGIC = b"OXDSBITS"
CODE_VERSION = 1


@dataclass(frozen=True)
class ItqModel:
    mean: np.ndarray = field(repr=False)
    projection: np.ndarray = field(repr=False)  # bits x D, orthonormal rows
    rotation: np.ndarray = field(repr=False)  # bits x bits, orthogonal
    objectives: tuple[float, ...] = field(default=(), repr=False, compare=False)
    orthogonality: tuple[float, ...] = field(default=(), repr=False, compare=False)

    @property
    def bits(self) -> int:
        return self.rotation.shape[0]

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"embedding width {x.shape[-1]}, model expects {self.dim}")
        return ((x - self.mean) @ self.projection.T) @ self.rotation


def _random_rotation(b: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((b, b)))
    # Sign fix makes the factorization unique.
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _signs(v: np.ndarray) -> np.ndarray:
    return np.where(v >= 0, 1.0, -1.0)


def quantization_loss(v: np.ndarray, rotation: np.ndarray) -> float:
    vr = v @ rotation
    return float(np.sum((_signs(vr) - vr) ** 2))


def fit_itq(
    embeddings,
    bits: int = DEFAULT_BITS,
    iterations: int = DEFAULT_ITERATIONS,
    seed: int = 0,
) -> ItqModel:
    """Learn centering, PCA projection and rotation on training embeddings.

    ``objectives[t]`` is the quantization loss with the rotation after ``t``
    updates (``t = 0`` is the random start); ``orthogonality[t]`` is
    ``||R^T R - I||_F`` at the same point.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch("embeddings must be an N x D matrix")
    n, d = x.shape
    if bits < 1:
        raise ValidationError("bits must be at least 1")
    if bits > d:
        raise RankDeficient(f"{bits} bits exceed embedding dimension {d}")
    if n <= bits:
        raise TooFewSamples(f"need more than {bits} samples, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("embeddings must be finite")

    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:bits]
    top = evals[order]
    if top[-1] <= 1e-12 * max(float(evals.max()), 1e-300):
        raise RankDeficient(f"fewer than {bits} non-zero principal values")
    projection = evecs[:, order].T
    v = xc @ projection.T

    rng = np.random.default_rng(seed)
    rotation = _random_rotation(bits, rng)
    eye = np.eye(bits)
    objectives = [quantization_loss(v, rotation)]
    ortho = [float(np.linalg.norm(rotation.T @ rotation - eye))]
    for _ in range(iterations):
        b = _signs(v @ rotation)
        # Procrustes: the orthogonal R maximizing tr(R^T V^T B).
        u, _, wt = np.linalg.svd(v.T @ b)
        rotation = u @ wt
        objectives.append(quantization_loss(v, rotation))
        ortho.append(float(np.linalg.norm(rotation.T @ rotation - eye)))
    return ItqModel(mean, projection, rotation, tuple(objectives), tuple(ortho))


@dataclass(frozen=True)
class BitCode:
    item_id: str
    bits: int
    packed: bytes

    @classmethod
    def from_bits(cls, item_id: str, bits: np.ndarray) -> "BitCode":
        bits = np.asarray(bits, dtype=bool)
        return cls(item_id, bits.size, np.packbits(bits, bitorder="little").tobytes())

    def unpack(self) -> np.ndarray:
        raw = np.frombuffer(self.packed, dtype=np.uint8)
        return np.unpackbits(raw, bitorder="little")[: self.bits].astype(bool)


def encode_bits(model: ItqModel, e) -> np.ndarray:
    """Boolean code(s); bit ``j`` is set when the ``j``-th rotated coordinate is >= 0."""
    return model.project(e) >= 0


def encode(model: ItqModel, e, item_id: str = "") -> BitCode:
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1:
        raise DimensionMismatch("encode takes a single embedding")
    return BitCode.from_bits(item_id, encode_bits(model, e))


def encode_many(model: ItqModel, item_ids: Sequence[str], embeddings) -> list[BitCode]:
    bits = encode_bits(model, np.asarray(embeddings, dtype=np.float64))
    packed = np.packbits(bits, axis=1, bitorder="little")
    return [BitCode(i, model.bits, row.tobytes()) for i, row in zip(item_ids, packed)]


_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


def hamming_distances(q: BitCode, gallery: Sequence[BitCode]) -> np.ndarray:
    if not gallery:
        return np.zeros(0, dtype=np.int64)
    for g in gallery:
        if g.bits != q.bits:
            raise WidthMismatch(f"code widths differ: {q.bits} vs {g.bits}")
    qa = np.frombuffer(q.packed, dtype=np.uint8)
    ga = np.frombuffer(b"".join(g.packed for g in gallery), dtype=np.uint8).reshape(len(gallery), -1)
    return _POPCOUNT[np.bitwise_xor(ga, qa)].sum(axis=1)


def hamming_search(
    q: BitCode,
    gallery: Sequence[BitCode],
    k: int | None = None,
    domains: Sequence[str] | None = None,
    categories: Sequence[str] | None = None,
    exclude_id=None,
) -> RankedList:
    """Rank by ascending Hamming distance, ties by item id; score = bits - distance."""
    dist = hamming_distances(q, gallery)
    ids = [g.item_id for g in gallery]
    order = sorted(range(len(ids)), key=lambda i: (dist[i], ids[i]))
    if exclude_id is not None:
        drop = {exclude_id} if isinstance(exclude_id, str) else set(exclude_id)
        order = [i for i in order if ids[i] not in drop]
    if k is not None:
        order = order[:k]
    doms = domains if domains is not None else [""] * len(ids)
    cats = categories if categories is not None else [""] * len(ids)
    return RankedList(
        tuple(ids[i] for i in order),
        np.array([q.bits - dist[i] for i in order], dtype=np.float64),
        tuple(doms[i] for i in order),
        tuple(cats[i] for i in order),
    )


def write_codes(path, codes: Sequence[BitCode]) -> None:
    bits = codes[0].bits if codes else 0
    with open(path, "wb") as fh:
        fh.write(CODE_MAGIC)
        fh.write(struct.pack("<I", CODE_VERSION))
        fh.write(struct.pack("<I", bits))
        fh.write(struct.pack("<Q", len(codes)))
        nbytes = -(-bits // 8)
        for c in codes:
            if c.bits != bits or len(c.packed) != nbytes:
                raise WidthMismatch("all codes in a file must share one width")
            raw_id = c.item_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_id)))
            fh.write(raw_id)
            fh.write(c.packed)


def read_codes(path) -> list[BitCode]:
    with open(path, "rb") as fh:
        data = fh.read()
    head = len(CODE_MAGIC) + 4 + 4 + 8
    if len(data) < head or data[: len(CODE_MAGIC)] != CODE_MAGIC:
        raise ParseError(f"{path}: not a code file")
    off = len(CODE_MAGIC)
    (version,) = struct.unpack_from("<I", data, off)
    if version != CODE_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    bits, n = struct.unpack_from("<IQ", data, off + 4)
    off = head
    nbytes = -(-bits // 8)
    codes = []
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            item_id = data[off : off + ln].decode("utf-8")
            off += ln
            packed = data[off : off + nbytes]
            if len(packed) != nbytes:
                raise ParseError(f"{path}: truncated")
            off += nbytes
            codes.append(BitCode(item_id, bits, bytes(packed)))
    except struct.error:
        raise ParseError(f"{path}: truncated") from None
    if off != len(data):
        raise ParseError(f"{path}: trailing bytes")
    return codes
