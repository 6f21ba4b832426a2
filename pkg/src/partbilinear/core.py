"""Domain types: feature maps, embeddings, samples and manifests."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import CoordinateRangeError, DimensionError, ValidationError

DISTRACTOR_ID = -1


class Role(enum.IntEnum):
    APPEARANCE = 0
    PART = 1
    RAW = 2


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str
    index: Optional[int] = None


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """An ``h x w`` grid of ``c``-dimensional descriptors.

    ``data`` is stored as an ``(h, w, c)`` float64 array; its row-major
    flattening is the canonical (y, x, channel) order used on disk.
    The array is made read-only on construction.
    """

    data: np.ndarray
    role: Role = Role.RAW

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise DimensionError(f"feature map must be a non-empty (h, w, c) array, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "role", Role(self.role))

    @classmethod
    def from_flat(cls, h, w, c, values, role=Role.RAW, check=True):
        """Build from flat row-major values, reporting length/finiteness problems."""
        values = np.asarray(values, dtype=np.float64).ravel()
        if check:
            problems = _flat_violations(h, w, c, values)
            if problems:
                raise ValidationError("; ".join(v.detail for v in problems), problems)
        return cls(values.reshape(h, w, c), role)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        """Number of spatial locations ``S = h * w``."""
        return self.height * self.width

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def descriptors(self) -> np.ndarray:
        """All local descriptors as an ``(S, c)`` array in row-major order."""
        return self.data.reshape(-1, self.channels)

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.role == other.role and np.array_equal(self.data, other.data)

    __hash__ = None


def descriptor_at(fmap: FeatureMap, x: int, y: int) -> np.ndarray:
    if not (0 <= x < fmap.width and 0 <= y < fmap.height):
        raise CoordinateRangeError(
            f"location (x={x}, y={y}) outside {fmap.width}x{fmap.height} grid"
        )
    return fmap.data[y, x].copy()


def _flat_violations(h, w, c, values) -> list:
    out = []
    expected = h * w * c
    if len(values) != expected:
        out.append(Violation("length", f"data length {len(values)} != h*w*c = {expected}"))
    bad = np.flatnonzero(~np.isfinite(values))
    for i in bad:
        out.append(Violation("non-finite", f"non-finite value {values[i]} at flat index {i}", int(i)))
    return out


def validate_map(fmap) -> list:
    """Return every invariant violation of a map (empty list means ok).

    Accepts a :class:`FeatureMap` or a ``(h, w, c, flat_values)`` tuple, so
    raw buffers can be checked before a map is built from them.
    """
    if isinstance(fmap, FeatureMap):
        h, w, c = fmap.shape
        values = fmap.flat()
    else:
        h, w, c, values = fmap
        values = np.asarray(values, dtype=np.float64).ravel()
    return _flat_violations(h, w, c, values)


class ExactLayout(NamedTuple):
    c_a: int
    c_p: int

    @property
    def length(self) -> int:
        return self.c_a * self.c_p


class SketchedLayout(NamedTuple):
    d: int

    @property
    def length(self) -> int:
        return self.d


class PlainLayout(NamedTuple):
    """Layout of the baseline descriptors (global or concatenated means)."""

    n: int

    @property
    def length(self) -> int:
        return self.n


Layout = Union[ExactLayout, SketchedLayout, PlainLayout]

NORM_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    layout: Layout
    normalized: bool = False

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).ravel()
        if len(vals) != self.layout.length:
            raise DimensionError(
                f"{type(self.layout).__name__} expects length {self.layout.length}, got {len(vals)}"
            )
        if self.normalized:
            norm = np.linalg.norm(vals)
            if norm != 0.0 and abs(norm - 1.0) > NORM_TOLERANCE:
                raise ValueError(f"embedding flagged normalized has norm {norm}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def block(self, k: int) -> np.ndarray:
        """Part-channel block ``k`` of an exact embedding (length ``c_a``)."""
        if not isinstance(self.layout, ExactLayout):
            raise DimensionError("blocks are only defined for the exact layout")
        c_a = self.layout.c_a
        return self.values[k * c_a:(k + 1) * c_a]


@dataclass(frozen=True, eq=False)
class ImageSample:
    sample_id: str
    identity: int
    camera: int
    appearance_map: FeatureMap
    part_map: FeatureMap

    def __post_init__(self):
        if self.appearance_map.shape[:2] != self.part_map.shape[:2]:
            raise DimensionError(
                f"sample {self.sample_id}: appearance grid {self.appearance_map.shape[:2]} "
                f"!= part grid {self.part_map.shape[:2]}"
            )

    @property
    def is_distractor(self) -> bool:
        return self.identity == DISTRACTOR_ID


class Split(str, enum.Enum):
    TRAIN = "train"
    QUERY = "query"
    GALLERY = "gallery"


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    identity: int
    camera: int
    appearance_path: str
    part_path: str
    split: Split

    def __post_init__(self):
        object.__setattr__(self, "split", Split(self.split))


@dataclass(frozen=True)
class DatasetManifest:
    """Labeled references to on-disk feature maps.

    A manifest may mix splits; :meth:`subset` selects one.
    """

    entries: tuple = field(default_factory=tuple)
    root: str = "."

    def __post_init__(self):
        entries = tuple(self.entries)
        seen = set()
        for e in entries:
            if e.sample_id in seen:
                raise ValueError(f"duplicate sample_id {e.sample_id!r} in manifest")
            seen.add(e.sample_id)
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def subset(self, split) -> "DatasetManifest":
        split = Split(split)
        return DatasetManifest(tuple(e for e in self.entries if e.split == split), self.root)

    def splits(self) -> set:
        return {e.split for e in self.entries}


def stack_descriptors(maps: Iterable[FeatureMap]) -> np.ndarray:
    """Stack same-shaped maps into an ``(n, S, c)`` array."""
    maps = list(maps)
    shapes = {m.shape for m in maps}
    if len(shapes) > 1:
        raise DimensionError(f"maps have differing shapes {sorted(shapes)}")
    return np.stack([m.descriptors() for m in maps]) if maps else np.empty((0, 0, 0))


def as_feature_maps(arr: np.ndarray, role=Role.RAW) -> Sequence[FeatureMap]:
    return [FeatureMap(a, role) for a in np.asarray(arr)]
