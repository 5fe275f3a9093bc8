"""Detector-head responses: score maps, edge distributions, boxes and the dump format."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence

import numpy as np

EDGES = ("top", "bottom", "left", "right")

DUMP_MAGIC = b"IRDK"
DUMP_VERSION = 1


class InvalidArgument(ValueError):
    """Raised when an operation receives arguments outside its contract."""


class DumpError(ValueError):
    """Base class for response-dump decode failures."""


class BadMagic(DumpError):
    pass


class VersionMismatch(DumpError):
    pass


class TruncatedPayload(DumpError):
    pass


class ShapeMismatch(DumpError):
    pass


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Location:
    x: float
    y: float
    stride: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise InvalidArgument("location coordinates must be finite")
        if not self.stride > 0:
            raise InvalidArgument(f"stride must be positive, got {self.stride}")


def _as_location_array(locations) -> np.ndarray:
    if len(locations) and isinstance(locations[0], Location):
        locations = [(p.x, p.y, p.stride) for p in locations]
    arr = np.asarray(locations, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument("locations must be finite")
    if np.any(arr[:, 2] <= 0):
        raise InvalidArgument("location strides must be positive")
    return arr


@dataclass(frozen=True, eq=False)
class ClassScoreMap:
    """Per-location, per-class logits of a classification head.

    ``logits`` has shape ``(L, K)``; ``locations`` is an ``(L, 3)`` array of
    ``(x, y, stride)`` rows; ``class_ids`` names the K columns.
    """

    logits: np.ndarray
    locations: np.ndarray
    class_ids: tuple

    def __post_init__(self):
        logits = np.asarray(self.logits)
        if logits.ndim != 2 or logits.shape[0] < 1 or logits.shape[1] < 1:
            raise InvalidArgument(f"logits must be a non-empty L x K matrix, got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise InvalidArgument("class logits must be finite")
        locs = _as_location_array(self.locations)
        if locs.shape[0] != logits.shape[0]:
            raise InvalidArgument("one location per logit row required")
        ids = tuple(int(c) for c in self.class_ids)
        if len(ids) != logits.shape[1]:
            raise InvalidArgument("one class id per logit column required")
        if len(set(ids)) != len(ids):
            raise InvalidArgument("class ids must be unique")
        object.__setattr__(self, "logits", _frozen(logits, logits.dtype if logits.dtype == np.float32 else np.float64))
        object.__setattr__(self, "locations", _frozen(locs, np.float64))
        object.__setattr__(self, "class_ids", ids)

    @property
    def num_locations(self) -> int:
        return self.logits.shape[0]

    def columns(self, class_subset: Iterable[int]) -> np.ndarray:
        """Column indices of ``class_subset`` in this map, in the given order."""
        index = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return np.array([index[int(c)] for c in class_subset], dtype=np.intp)
        except KeyError as exc:
            raise InvalidArgument(f"class {exc.args[0]} not present in map") from None

    def __eq__(self, other):
        if not isinstance(other, ClassScoreMap):
            return NotImplemented
        return (
            self.class_ids == other.class_ids
            and np.array_equal(self.logits, other.logits)
            and np.array_equal(self.locations, other.locations)
        )


@dataclass(frozen=True, eq=False)
class EdgeDistributionMap:
    """Per-location discrete distance distributions for the four box edges.

    ``logits`` has shape ``(L, 4, n)`` with edge order (top, bottom, left, right).
    """

    logits: np.ndarray
    locations: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits)
        if logits.ndim != 3 or logits.shape[1] != 4:
            raise InvalidArgument(f"edge logits must have shape (L, 4, n), got {logits.shape}")
        if logits.shape[0] < 1 or logits.shape[2] < 2:
            raise InvalidArgument("need at least one location and two bins")
        if not np.all(np.isfinite(logits)):
            raise InvalidArgument("edge logits must be finite")
        locs = _as_location_array(self.locations)
        if locs.shape[0] != logits.shape[0]:
            raise InvalidArgument("one location per edge-logit slice required")
        object.__setattr__(self, "logits", _frozen(logits, logits.dtype if logits.dtype == np.float32 else np.float64))
        object.__setattr__(self, "locations", _frozen(locs, np.float64))

    @property
    def num_locations(self) -> int:
        return self.logits.shape[0]

    @property
    def num_bins(self) -> int:
        return self.logits.shape[2]

    def __eq__(self, other):
        if not isinstance(other, EdgeDistributionMap):
            return NotImplemented
        return np.array_equal(self.logits, other.logits) and np.array_equal(self.locations, other.locations)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0
    class_id: int = -1

    def __post_init__(self):
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise InvalidArgument(f"box corners out of order: {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class ResponseDump:
    """One scene's teacher (or student) responses, stored in single precision."""

    class_map: ClassScoreMap
    edge_map: EdgeDistributionMap
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.array_equal(self.class_map.locations, self.edge_map.locations):
            raise InvalidArgument("class and edge maps must share locations")
        # the dump is a serialization unit: quantize once so round trips are exact
        locs = self.class_map.locations.astype(np.float32).astype(np.float64)
        cm = ClassScoreMap(self.class_map.logits.astype(np.float32), locs, self.class_map.class_ids)
        em = EdgeDistributionMap(self.edge_map.logits.astype(np.float32), locs)
        object.__setattr__(self, "class_map", cm)
        object.__setattr__(self, "edge_map", em)
        object.__setattr__(self, "metadata", dict(self.metadata))

    def __eq__(self, other):
        if not isinstance(other, ResponseDump):
            return NotImplemented
        return (
            self.class_map == other.class_map
            and self.edge_map == other.edge_map
            and self.metadata == other.metadata
        )


def tempered_softmax(logits, t: float = 1.0) -> np.ndarray:
    """Softmax of ``logits / t`` along the last axis."""
    if not (np.isfinite(t) and t > 0):
        raise InvalidArgument(f"temperature must be positive, got {t}")
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] < 1:
        raise InvalidArgument("logits must have at least one entry")
    if not np.all(np.isfinite(z)):
        raise InvalidArgument("logits must be finite")
    z = z / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_tempered_softmax(logits, t: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / t
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


CONFIDENCE_METHODS = ("sigmoid-max", "softmax-max")


def location_confidence(cmap: ClassScoreMap, class_subset, method: str = "sigmoid-max") -> np.ndarray:
    """Per-location confidence over ``class_subset``.

    ``sigmoid-max`` takes the largest independent class probability;
    ``softmax-max`` normalizes over the subset first.
    """
    subset = list(class_subset)
    if not subset:
        raise InvalidArgument("class subset must be non-empty")
    cols = cmap.columns(subset)
    z = np.asarray(cmap.logits[:, cols], dtype=np.float64)
    if method == "sigmoid-max":
        return sigmoid(z.max(axis=1))
    if method == "softmax-max":
        return tempered_softmax(z, 1.0).max(axis=1)
    raise InvalidArgument(f"unknown confidence method {method!r}")


def expected_distances(edge_probs: np.ndarray) -> np.ndarray:
    """Bin expectation along the last axis (distances in stride units)."""
    n = edge_probs.shape[-1]
    return edge_probs @ np.arange(n, dtype=np.float64)


def decode_boxes(edge_probs: np.ndarray, locations: np.ndarray) -> np.ndarray:
    """Vectorized decode: ``(L, 4, n)`` probabilities -> ``(L, 4)`` corner boxes."""
    d = expected_distances(np.asarray(edge_probs, dtype=np.float64)) * locations[:, 2:3]
    x, y = locations[:, 0], locations[:, 1]
    return np.stack([x - d[:, 2], y - d[:, 0], x + d[:, 3], y + d[:, 1]], axis=1)


def decode_box(edge_probs, loc: Location) -> Box:
    p = np.asarray(edge_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != 4:
        raise InvalidArgument(f"expected 4 x n probability rows, got shape {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise InvalidArgument("each edge row must be a probability distribution")
    x1, y1, x2, y2 = decode_boxes(p[None], np.array([[loc.x, loc.y, loc.stride]]))[0]
    return Box(float(x1), float(y1), float(x2), float(y2), score=0.0)


def iou(a: Box, b: Box) -> float:
    area_a, area_b = a.area, b.area
    if area_a <= 0 or area_b <= 0:
        return 0.0
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (area_a + area_b - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(w, 0, None) * np.clip(h, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    valid = (area_a[:, None] > 0) & (area_b[None, :] > 0) & (inter > 0)
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=valid)
    return out


# -- binary dump format ------------------------------------------------------

_HEADER = struct.Struct("<4sHIII")


def write_dump(d: ResponseDump, sink: BinaryIO) -> None:
    cm, em = d.class_map, d.edge_map
    L, K = cm.logits.shape
    n = em.num_bins
    sink.write(_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, L, K, n))
    sink.write(cm.locations.astype("<f4").tobytes())
    sink.write(np.asarray(cm.class_ids, dtype="<u4").tobytes())
    sink.write(cm.logits.astype("<f4").tobytes())
    sink.write(em.logits.astype("<f4").tobytes())
    meta = json.dumps(d.metadata, sort_keys=True).encode("utf-8")
    sink.write(struct.pack("<I", len(meta)))
    sink.write(meta)


def _read_exact(source: BinaryIO, size: int, what: str) -> bytes:
    buf = source.read(size)
    if len(buf) != size:
        raise TruncatedPayload(f"truncated dump while reading {what}: wanted {size} bytes, got {len(buf)}")
    return buf


def read_dump(source: BinaryIO) -> ResponseDump:
    head = source.read(_HEADER.size)
    if len(head) >= 4 and head[:4] != DUMP_MAGIC:
        raise BadMagic(f"bad magic {head[:4]!r}, expected {DUMP_MAGIC!r}")
    if len(head) != _HEADER.size:
        raise TruncatedPayload("truncated dump header")
    _, version, L, K, n = _HEADER.unpack(head)
    if version != DUMP_VERSION:
        raise VersionMismatch(f"unsupported dump version {version}")
    if L < 1 or K < 1 or n < 2:
        raise ShapeMismatch(f"invalid dump shape L={L} K={K} n={n}")
    locs = np.frombuffer(_read_exact(source, 12 * L, "locations"), dtype="<f4").reshape(L, 3)
    ids = np.frombuffer(_read_exact(source, 4 * K, "class ids"), dtype="<u4")
    cls = np.frombuffer(_read_exact(source, 4 * L * K, "class logits"), dtype="<f4").reshape(L, K)
    edges = np.frombuffer(_read_exact(source, 16 * L * n, "edge logits"), dtype="<f4").reshape(L, 4, n)
    (mlen,) = struct.unpack("<I", _read_exact(source, 4, "metadata length"))
    meta_raw = _read_exact(source, mlen, "metadata")
    try:
        meta = json.loads(meta_raw.decode("utf-8")) if mlen else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DumpError(f"undecodable metadata: {exc}") from None
    if len(set(ids.tolist())) != K:
        raise ShapeMismatch("duplicate class ids in dump")
    locs64 = locs.astype(np.float64)
    try:
        return ResponseDump(
            ClassScoreMap(cls.astype(np.float32), locs64, tuple(int(c) for c in ids)),
            EdgeDistributionMap(edges.astype(np.float32), locs64),
            meta,
        )
    except InvalidArgument as exc:
        raise ShapeMismatch(str(exc)) from None


def dump_to_bytes(d: ResponseDump) -> bytes:
    buf = io.BytesIO()
    write_dump(d, buf)
    return buf.getvalue()


def dump_from_bytes(data: bytes) -> ResponseDump:
    return read_dump(io.BytesIO(data))


def boxes_from_array(arr: np.ndarray, scores: Sequence[float] | None = None, class_ids=None) -> list[Box]:
    out = []
    for i, row in enumerate(np.asarray(arr, dtype=np.float64).reshape(-1, 4)):
        s = 1.0 if scores is None else float(scores[i])
        c = -1 if class_ids is None else int(class_ids[i])
        out.append(Box(*map(float, row), score=s, class_id=c))
    return out
