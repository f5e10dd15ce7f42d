"""Domain types, linear scoring and best-box selection.

Feature vectors are plain 1-D float64 numpy arrays.  Every container in this
module is frozen and marks its arrays read-only, so instances can be shared
between workers without copying.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, DimensionMismatchError, ParseError

SPEAK = 1
QUIET = -1


def as_feature_vector(values, dim: Optional[int] = None) -> np.ndarray:
    v = np.array(values, dtype=np.float64, copy=True).reshape(-1)
    if dim is not None and v.shape[0] != dim:
        raise DimensionMismatchError(f"expected {dim} features, got {v.shape[0]}")
    if v.shape[0] < 1:
        raise DataError("feature vector must have at least one entry")
    if not np.all(np.isfinite(v)):
        raise DataError("feature vector contains NaN or Inf")
    v.flags.writeable = False
    return v


def _check_label(y, allow_zero=False):
    allowed = (1, -1, 0) if allow_zero else (1, -1)
    if y not in allowed:
        raise DataError(f"label must be one of {allowed}, got {y!r}")
    return int(y)


@dataclass(frozen=True)
class BoxObservation:
    track_id: int
    features: np.ndarray
    gt_label: Optional[int] = None  # evaluation only

    def __post_init__(self):
        if int(self.track_id) != self.track_id or self.track_id < 0:
            raise DataError(f"track_id must be a non-negative integer, got {self.track_id!r}")
        object.__setattr__(self, "track_id", int(self.track_id))
        object.__setattr__(self, "features", as_feature_vector(self.features))
        if self.gt_label is not None:
            object.__setattr__(self, "gt_label", _check_label(self.gt_label))


@dataclass(frozen=True)
class FrameSample:
    frame_index: int
    vad_label: int
    boxes: tuple

    def __post_init__(self):
        if self.frame_index < 0:
            raise DataError("frame_index must be non-negative")
        object.__setattr__(self, "frame_index", int(self.frame_index))
        object.__setattr__(self, "vad_label", _check_label(self.vad_label))
        boxes = tuple(self.boxes)
        if not boxes:
            raise DataError(f"frame {self.frame_index} has no boxes")
        ids = [b.track_id for b in boxes]
        if len(set(ids)) != len(ids):
            raise DataError(f"frame {self.frame_index} repeats a track id: {ids}")
        dims = {b.features.shape[0] for b in boxes}
        if len(dims) != 1:
            raise DimensionMismatchError(f"frame {self.frame_index} mixes feature lengths {sorted(dims)}")
        object.__setattr__(self, "boxes", boxes)

    @property
    def dim(self) -> int:
        return self.boxes[0].features.shape[0]

    def feature_matrix(self) -> np.ndarray:
        return np.vstack([b.features for b in self.boxes])


@dataclass(frozen=True)
class ModelWeights:
    w: np.ndarray
    metadata: str = ""

    def __post_init__(self):
        object.__setattr__(self, "w", as_feature_vector(self.w))
        if "\n" in self.metadata:
            raise DataError("model metadata must be a single line")

    @classmethod
    def zeros(cls, dim: int, metadata: str = "") -> "ModelWeights":
        return cls(np.zeros(dim), metadata)

    @property
    def dim(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True)
class PackedFrames:
    """Flat array view of a dataset used by the vectorized losses.

    Boxes of all frames are stacked row-wise in ``features``; frame ``i`` owns
    rows ``starts[i] : starts[i] + counts[i]``.
    """

    features: np.ndarray  # (B, d)
    starts: np.ndarray  # (N,)
    counts: np.ndarray  # (N,)
    vad: np.ndarray  # (N,)
    frame_of_box: np.ndarray  # (B,) frame position, not frame_index
    track: np.ndarray  # (B,)
    gt: np.ndarray  # (B,), 0 where unlabeled


def pack_frames(frames: Sequence[FrameSample], dim: int) -> PackedFrames:
    counts = np.array([len(f.boxes) for f in frames], dtype=np.int64)
    starts = np.zeros(len(frames), dtype=np.int64)
    if len(frames):
        starts[1:] = np.cumsum(counts)[:-1]
    boxes = [b for f in frames for b in f.boxes]
    X = np.vstack([b.features for b in boxes]) if boxes else np.zeros((0, dim))
    packed = PackedFrames(
        features=X,
        starts=starts,
        counts=counts,
        vad=np.array([f.vad_label for f in frames], dtype=np.int64),
        frame_of_box=np.repeat(np.arange(len(frames)), counts),
        track=np.array([b.track_id for b in boxes], dtype=np.int64),
        gt=np.array([0 if b.gt_label is None else b.gt_label for b in boxes], dtype=np.int64),
    )
    for arr in (packed.features, packed.starts, packed.counts, packed.vad,
                packed.frame_of_box, packed.track, packed.gt):
        arr.flags.writeable = False
    return packed


@dataclass(frozen=True)
class TrackedDataset:
    dim: int
    frame_rate_hz: float
    frames: tuple = ()
    track_ids: tuple = field(default=None)

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise DataError(f"dim must be a positive integer, got {self.dim!r}")
        object.__setattr__(self, "dim", int(self.dim))
        if not (math.isfinite(self.frame_rate_hz) and self.frame_rate_hz > 0):
            raise DataError(f"frame_rate_hz must be positive, got {self.frame_rate_hz!r}")
        object.__setattr__(self, "frame_rate_hz", float(self.frame_rate_hz))
        frames = tuple(self.frames)
        prev = -1
        seen = set()
        for f in frames:
            if f.frame_index <= prev:
                raise DataError(f"frame indices must be strictly increasing ({prev} then {f.frame_index})")
            prev = f.frame_index
            if f.dim != self.dim:
                raise DimensionMismatchError(
                    f"frame {f.frame_index} has {f.dim} features, dataset declares {self.dim}")
            seen.update(b.track_id for b in f.boxes)
        object.__setattr__(self, "frames", frames)
        roster = tuple(sorted(seen))
        if self.track_ids is not None:
            declared = tuple(sorted(int(t) for t in self.track_ids))
            if not set(roster) <= set(declared):
                raise DataError(f"frames use tracks {roster} outside the roster {declared}")
            roster = declared
        object.__setattr__(self, "track_ids", roster)

    def __len__(self):
        return len(self.frames)

    @cached_property
    def packed(self) -> PackedFrames:
        return pack_frames(self.frames, self.dim)

    @property
    def has_gt(self) -> bool:
        return bool(len(self.frames)) and bool(np.any(self.packed.gt != 0))

    def subset(self, start: int, stop: int) -> "TrackedDataset":
        """Frames at positions ``start:stop`` with the roster preserved."""
        return TrackedDataset(self.dim, self.frame_rate_hz, self.frames[start:stop], self.track_ids)


def concat_datasets(datasets: Sequence[TrackedDataset]) -> TrackedDataset:
    """Join recordings end to end, renumbering frame indices to stay increasing.

    Temporal quantities (continuity weights, smoothing) should still be
    computed per recording; the join is only for pooled training.
    """
    if not datasets:
        raise DataError("nothing to concatenate")
    dim = datasets[0].dim
    rate = datasets[0].frame_rate_hz
    frames = []
    offset = 0
    roster = set()
    for ds in datasets:
        if ds.dim != dim:
            raise DimensionMismatchError(f"cannot join datasets of dim {dim} and {ds.dim}")
        roster.update(ds.track_ids)
        for f in ds.frames:
            frames.append(FrameSample(offset + f.frame_index, f.vad_label, f.boxes))
        if ds.frames:
            offset += ds.frames[-1].frame_index + 1
    return TrackedDataset(dim, rate, tuple(frames), tuple(sorted(roster)))


def with_bias_feature(data: TrackedDataset) -> TrackedDataset:
    """Append a constant 1.0 feature to every box, simulating an intercept."""
    frames = tuple(
        FrameSample(
            f.frame_index,
            f.vad_label,
            tuple(BoxObservation(b.track_id, np.append(b.features, 1.0), b.gt_label) for b in f.boxes),
        )
        for f in data.frames
    )
    return TrackedDataset(data.dim + 1, data.frame_rate_hz, frames, data.track_ids)


def _weights(w) -> np.ndarray:
    return w.w if isinstance(w, ModelWeights) else np.asarray(w, dtype=np.float64)


def score(w, phi) -> float:
    """Inner product of a model with one feature vector."""
    wv = _weights(w)
    phi = np.asarray(phi, dtype=np.float64)
    if wv.shape != phi.shape:
        raise DimensionMismatchError(f"model has {wv.shape[0]} weights, features have {phi.shape[0]}")
    return float(np.dot(wv, phi))


def score_boxes(w, X: np.ndarray) -> np.ndarray:
    wv = _weights(w)
    if X.shape[-1] != wv.shape[0]:
        raise DimensionMismatchError(f"model has {wv.shape[0]} weights, features have {X.shape[-1]}")
    return X @ wv


def joint_feature(frame: FrameSample, y: int, h: int) -> np.ndarray:
    """Box features when ``y`` is +1, the zero vector when ``y`` is -1."""
    if not 0 <= h < len(frame.boxes):
        raise IndexError(f"box index {h} out of range for a frame with {len(frame.boxes)} boxes")
    _check_label(y)
    if y == SPEAK:
        return frame.boxes[h].features
    return np.zeros(frame.dim)


def select_best_box(w, frame: FrameSample) -> tuple[int, float]:
    """Highest-scoring box of ``frame``; ties go to the lowest index."""
    s = score_boxes(w, frame.feature_matrix())
    h = int(np.argmax(s))  # argmax returns the first maximum
    return h, float(s[h])


# -- serialization ---------------------------------------------------------

def format_float(x: float) -> str:
    return format(float(x), ".17g")


def dumps_model(model: ModelWeights) -> str:
    lines = [f"dim={model.dim}", " ".join(format_float(v) for v in model.w)]
    if model.metadata:
        lines.append(f"meta={model.metadata}")
    return "\n".join(lines) + "\n"


def loads_model(text: str, path=None) -> ModelWeights:
    lines = text.splitlines()
    if len(lines) < 2:
        raise ParseError("model file needs a dim line and a weights line", path)
    if not lines[0].startswith("dim="):
        raise ParseError("first line must be dim=<d>", path, 1)
    try:
        dim = int(lines[0][4:])
    except ValueError:
        raise ParseError(f"bad dimension {lines[0][4:]!r}", path, 1) from None
    try:
        values = [float(t) for t in lines[1].split()]
    except ValueError as exc:
        raise ParseError(str(exc), path, 2) from None
    if len(values) != dim:
        raise ParseError(f"expected {dim} weights, found {len(values)}", path, 2)
    meta = ""
    for i, extra in enumerate(lines[2:], start=3):
        if extra.startswith("meta="):
            meta = extra[5:]
        elif extra.strip():
            raise ParseError(f"unexpected line {extra!r}", path, i)
    try:
        return ModelWeights(np.array(values), meta)
    except DataError as exc:
        raise ParseError(str(exc), path, 2) from None


def save_model(model: ModelWeights, path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path) -> ModelWeights:
    return loads_model(Path(path).read_text(), path)
