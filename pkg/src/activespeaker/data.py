"""Feature normalization, dataset files and a synthetic meeting generator.

On-disk layout is a ``key=value`` manifest next to a row-per-box CSV::

    frame,track,vad,gt,f0,...,f{d-1}

``gt`` is 1, -1 or 0 (unlabelled).  Floats are written with 17 significant
digits so a save/load cycle is exact.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, ParseError
from .model import BoxObservation, FrameSample, TrackedDataset, format_float

SILENCE = -1


def normalize_features(v) -> np.ndarray:
    """Signed square root followed by L2 normalization (zero stays zero)."""
    v = np.asarray(v, dtype=np.float64)
    p = np.sign(v) * np.sqrt(np.abs(v))
    norm = np.linalg.norm(p)
    if norm == 0.0:
        return np.zeros_like(p)
    return p / norm


def normalize_dataset(data: TrackedDataset) -> TrackedDataset:
    frames = tuple(
        FrameSample(f.frame_index, f.vad_label,
                    tuple(BoxObservation(b.track_id, normalize_features(b.features), b.gt_label) for b in f.boxes))
        for f in data.frames
    )
    return TrackedDataset(data.dim, data.frame_rate_hz, frames, data.track_ids)


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the simulated multi-party recording.

    ``world_seed`` fixes the shared speaking/quiet means; ``first_speaker``
    selects which speaker identities (and hence offsets) appear, so folds of
    one meeting share identities while a target meeting can use new ones.
    ``seed`` drives everything sampled per recording.
    """

    num_speakers: int = 3
    dim: int = 64
    frames: int = 2000
    frame_rate_hz: float = 10.0
    turn_persistence: float = 0.97
    silence_prob: float = 0.2
    speaker_shift: float = 0.5
    noise_sigma: float = 0.5
    vad_error_rate: float = 0.0
    seed: int = 0
    world_seed: int = 0
    first_speaker: int = 0
    normalize: bool = False

    def __post_init__(self):
        problems = []
        if int(self.num_speakers) != self.num_speakers or self.num_speakers < 1:
            problems.append(f"num_speakers must be a positive integer (got {self.num_speakers})")
        if int(self.dim) != self.dim or self.dim < 2:
            problems.append(f"dim must be an integer >= 2 (got {self.dim})")
        if int(self.frames) != self.frames or self.frames < 1:
            problems.append(f"frames must be a positive integer (got {self.frames})")
        if not self.frame_rate_hz > 0:
            problems.append(f"frame_rate_hz must be positive (got {self.frame_rate_hz})")
        if not 0 < self.turn_persistence <= 1:
            problems.append(f"turn_persistence must be in (0, 1] (got {self.turn_persistence})")
        if not 0 <= self.silence_prob < 1:
            problems.append(f"silence_prob must be in [0, 1) (got {self.silence_prob})")
        if not self.speaker_shift >= 0:
            problems.append(f"speaker_shift must be non-negative (got {self.speaker_shift})")
        if not self.noise_sigma > 0:
            problems.append(f"noise_sigma must be positive (got {self.noise_sigma})")
        if not 0 <= self.vad_error_rate < 1:
            problems.append(f"vad_error_rate must be in [0, 1) (got {self.vad_error_rate})")
        if self.first_speaker < 0:
            problems.append(f"first_speaker must be non-negative (got {self.first_speaker})")
        if problems:
            raise DataError("; ".join(problems))

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def _unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def speaker_offset(cfg: SynthConfig, speaker: int) -> np.ndarray:
    """Mean offset of a speaker identity when speaking."""
    rng = np.random.default_rng([cfg.world_seed, 1, speaker])
    return cfg.speaker_shift * _unit(rng, cfg.dim)


def world_means(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([cfg.world_seed, 0])
    return _unit(rng, cfg.dim), _unit(rng, cfg.dim)


def floor_sequence(cfg: SynthConfig, rng) -> np.ndarray:
    """Who holds the floor in each frame (``SILENCE`` for nobody).

    A turn ends with probability ``1 - turn_persistence``; the next holder is
    always different from the current one, so turn lengths are geometric.
    The chain starts with track 0 speaking.
    """
    k = cfg.num_speakers
    state = 0
    out = np.empty(cfg.frames, dtype=np.int64)
    switch = rng.random(cfg.frames) >= cfg.turn_persistence
    u_sil = rng.random(cfg.frames)
    u_pick = rng.random(cfg.frames)
    for t in range(cfg.frames):
        if t > 0 and switch[t]:
            if state == SILENCE:
                state = int(u_pick[t] * k)
            elif k == 1:
                if cfg.silence_prob > 0:
                    state = SILENCE
            elif u_sil[t] < cfg.silence_prob:
                state = SILENCE
            else:
                other = int(u_pick[t] * (k - 1))
                state = other if other < state else other + 1
        out[t] = state
    return out


def generate_synthetic(cfg: SynthConfig) -> TrackedDataset:
    """Simulate a meeting: one floor holder at a time, Gaussian box features.

    Speaking boxes are drawn around the shared speaking mean plus the
    speaker's offset, quiet boxes around the quiet mean, both with isotropic
    noise ``noise_sigma``.  Every track is visible in every frame.  Frame VAD
    labels are flipped independently with probability ``vad_error_rate``.
    """
    rng = np.random.default_rng(cfg.seed)
    floor = floor_sequence(cfg, rng)
    m_speak, m_quiet = world_means(cfg)
    offsets = np.vstack([speaker_offset(cfg, cfg.first_speaker + k) for k in range(cfg.num_speakers)])
    noise = rng.normal(scale=cfg.noise_sigma, size=(cfg.frames, cfg.num_speakers, cfg.dim))
    vad_flip = rng.random(cfg.frames) < cfg.vad_error_rate

    frames = []
    for t in range(cfg.frames):
        boxes = []
        for k in range(cfg.num_speakers):
            speaking = floor[t] == k
            mean = m_speak + offsets[k] if speaking else m_quiet
            x = mean + noise[t, k]
            if cfg.normalize:
                x = normalize_features(x)
            boxes.append(BoxObservation(k, x, 1 if speaking else -1))
        vad = 1 if floor[t] != SILENCE else -1
        if vad_flip[t]:
            vad = -vad
        frames.append(FrameSample(t, vad, tuple(boxes)))
    return TrackedDataset(cfg.dim, cfg.frame_rate_hz, tuple(frames), tuple(range(cfg.num_speakers)))


# -- files -----------------------------------------------------------------

def _header(dim):
    return ["frame", "track", "vad", "gt"] + [f"f{i}" for i in range(dim)]


def save_dataset(data: TrackedDataset, path, frames_file: Optional[str] = None) -> Path:
    """Write ``path`` (manifest) and the frames CSV beside it.

    Returns the manifest path.
    """
    path = Path(path)
    if frames_file is None:
        frames_file = path.stem + ".frames.csv"
    frames_path = path.parent / frames_file
    with open(frames_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(data.dim))
        for f in data.frames:
            for b in f.boxes:
                gt = 0 if b.gt_label is None else b.gt_label
                w.writerow([f.frame_index, b.track_id, f.vad_label, gt] + [format_float(v) for v in b.features])
    manifest = {
        "dim": str(data.dim),
        "frame_rate_hz": format_float(data.frame_rate_hz),
        "num_tracks": str(len(data.track_ids)),
        "track_ids": ",".join(map(str, data.track_ids)),
        "frames_file": frames_file,
        "has_gt": "1" if data.has_gt else "0",
    }
    path.write_text("".join(f"{k}={v}\n" for k, v in manifest.items()))
    return path


def read_key_values(path) -> dict[str, str]:
    out = {}
    for i, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {raw!r}", path, i)
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _parse_int(token, what, path, line):
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"bad {what} {token!r}", path, line) from None


def load_dataset(path) -> TrackedDataset:
    path = Path(path)
    kv = read_key_values(path)
    for key in ("dim", "frame_rate_hz", "frames_file"):
        if key not in kv:
            raise ParseError(f"manifest is missing {key}", path)
    try:
        dim = int(kv["dim"])
        rate = float(kv["frame_rate_hz"])
    except ValueError as exc:
        raise ParseError(f"bad manifest value: {exc}", path) from None
    if dim < 1 or not (math.isfinite(rate) and rate > 0):
        raise ParseError("manifest needs dim >= 1 and frame_rate_hz > 0", path)
    roster = None
    if kv.get("track_ids"):
        roster = tuple(int(t) for t in kv["track_ids"].split(","))
    frames_path = path.parent / kv["frames_file"]
    if not frames_path.exists():
        raise ParseError(f"frames file {frames_path} does not exist", path)

    frames = []
    current = None
    boxes = []
    vad = None
    with open(frames_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("frames file is empty", frames_path, 1)
        if header[:4] != ["frame", "track", "vad", "gt"]:
            raise ParseError("header must start with frame,track,vad,gt", frames_path, 1)
        if len(header) - 4 != dim:
            raise ParseError(f"header declares {len(header) - 4} features but manifest dim is {dim}",
                             frames_path, 1)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 4:
                raise ParseError(f"expected {dim + 4} fields, found {len(row)}", frames_path, line_no)
            fi = _parse_int(row[0], "frame index", frames_path, line_no)
            track = _parse_int(row[1], "track id", frames_path, line_no)
            v = _parse_int(row[2], "vad label", frames_path, line_no)
            gt = _parse_int(row[3], "gt label", frames_path, line_no)
            if v not in (1, -1):
                raise ParseError(f"vad must be 1 or -1, got {v}", frames_path, line_no)
            if gt not in (1, -1, 0):
                raise ParseError(f"gt must be 1, -1 or 0, got {gt}", frames_path, line_no)
            try:
                x = np.array([float(t) for t in row[4:]])
            except ValueError as exc:
                raise ParseError(str(exc), frames_path, line_no) from None
            if not np.all(np.isfinite(x)):
                raise ParseError("non-finite feature value", frames_path, line_no)
            if fi != current:
                if current is not None and fi < current:
                    raise ParseError(f"frame index {fi} follows {current}; indices must increase",
                                     frames_path, line_no)
                if current is not None:
                    frames.append(_make_frame(current, vad, boxes, frames_path, line_no))
                current, vad, boxes = fi, v, []
            elif v != vad:
                raise ParseError(f"vad label differs within frame {fi}", frames_path, line_no)
            if any(b.track_id == track for b in boxes):
                raise ParseError(f"track {track} repeated in frame {fi}", frames_path, line_no)
            boxes.append(BoxObservation(track, x, None if gt == 0 else gt))
        if current is not None:
            frames.append(_make_frame(current, vad, boxes, frames_path, line_no))
    try:
        data = TrackedDataset(dim, rate, tuple(frames), roster)
    except DataError as exc:
        raise ParseError(str(exc), path) from None
    if "num_tracks" in kv and int(kv["num_tracks"]) != len(data.track_ids):
        raise ParseError(f"manifest num_tracks={kv['num_tracks']} but data has {len(data.track_ids)} tracks", path)
    return data


def _make_frame(index, vad, boxes, path, line_no):
    try:
        return FrameSample(index, vad, tuple(boxes))
    except DataError as exc:
        raise ParseError(str(exc), path, line_no) from None
