"""Person-specific models from generic-model harvesting.

The generic model picks the best box in every VAD-positive frame; that box is
a positive sample for its track and the remaining boxes are negatives for
theirs.  Each sample is weighted by how long its track keeps the same
harvested label around it, and per-track models are fit with a weighted
logistic loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DataError, DimensionMismatchError
from .latent import TrainConfig, train_latent
from .model import SPEAK, ModelWeights, TrackedDataset, concat_datasets, format_float, score_boxes
from .optim import minimize_lbfgs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WeightedSample:
    features: np.ndarray
    label: int
    alpha: float
    frame_index: int
    track_id: int
    score_gen: float = float("nan")

    def __post_init__(self):
        if self.label not in (1, -1):
            raise DataError(f"sample label must be +1 or -1, got {self.label!r}")
        if not self.alpha >= 1.0:
            raise DataError(f"temporal weight must be at least 1, got {self.alpha}")


@dataclass(frozen=True)
class HarvestConfig:
    window_seconds: float = 3.0
    weighting_enabled: bool = True
    include_vad_negative: bool = False

    def __post_init__(self):
        if not self.window_seconds > 0:
            raise DataError(f"window_seconds must be positive, got {self.window_seconds}")

    def window_frames(self, frame_rate_hz: float) -> int:
        return max(1, int(round(self.window_seconds * frame_rate_hz)))


def temporal_weight(labels: Sequence[Optional[int]], position: int, window_frames: int) -> float:
    """Length of the run of equal labels through ``position``.

    ``labels`` is one track's harvested label stream indexed by frame
    position; ``None`` marks frames without a sample for the track and breaks
    runs.  The run is searched within ``window_frames // 2`` positions on each
    side and the result is clamped to ``[1, window_frames]``.
    """
    if window_frames < 1:
        raise DataError("window must be at least one frame")
    label = labels[position]
    if label is None:
        raise DataError(f"no harvested label at position {position}")
    half = window_frames // 2
    lo = max(0, position - half)
    hi = min(len(labels) - 1, position + half)
    left = position
    while left - 1 >= lo and labels[left - 1] == label:
        left -= 1
    right = position
    while right + 1 <= hi and labels[right + 1] == label:
        right += 1
    return float(min(max(right - left + 1, 1), window_frames))


def harvest_labels(w_gen, data: TrackedDataset, include_vad_negative: bool = False):
    """Per-box harvested labels for ``data`` (0 where a box gives no sample).

    Returns ``(labels, scores)`` aligned with ``data.packed`` rows.
    """
    packed = data.packed
    labels = np.zeros(len(packed.track), dtype=np.int64)
    if len(data) == 0:
        return labels, np.zeros(0)
    scores = score_boxes(w_gen, packed.features)
    for i, f in enumerate(data.frames):
        start, n = packed.starts[i], packed.counts[i]
        if f.vad_label == SPEAK:
            best = int(np.argmax(scores[start:start + n]))
            labels[start:start + n] = -1
            labels[start + best] = 1
        elif include_vad_negative:
            labels[start:start + n] = -1
    return labels, scores


def harvest_samples(w_gen: ModelWeights, data: TrackedDataset,
                    cfg: HarvestConfig = HarvestConfig()) -> dict[int, list[WeightedSample]]:
    """Harvest weighted samples per track from one recording."""
    if w_gen.dim != data.dim:
        raise DimensionMismatchError(f"generic model has {w_gen.dim} weights, dataset dim is {data.dim}")
    labels, scores = harvest_labels(w_gen, data, cfg.include_vad_negative)
    return samples_from_labels(data, labels, scores, cfg)


def samples_from_labels(data, labels, scores, cfg, positions=None):
    packed = data.packed
    window = cfg.window_frames(data.frame_rate_hz)
    n_frames = len(data)
    streams = {}
    for t in data.track_ids:
        streams[t] = [None] * n_frames
    for row in np.flatnonzero(labels):
        streams[int(packed.track[row])][int(packed.frame_of_box[row])] = int(labels[row])
    out: dict[int, list[WeightedSample]] = {}
    rows = np.flatnonzero(labels)
    if positions is not None:
        rows = rows[np.isin(packed.frame_of_box[rows], positions)]
    for row in rows:
        track = int(packed.track[row])
        pos = int(packed.frame_of_box[row])
        alpha = temporal_weight(streams[track], pos, window) if cfg.weighting_enabled else 1.0
        out.setdefault(track, []).append(WeightedSample(
            features=packed.features[row],
            label=int(labels[row]),
            alpha=alpha,
            frame_index=data.frames[pos].frame_index,
            track_id=track,
            score_gen=float(scores[row]),
        ))
    return dict(sorted(out.items()))


def harvest_to_csv(samples: Mapping[int, Iterable[WeightedSample]]) -> str:
    rows = ["frame,track,label,alpha,score_gen"]
    flat = sorted((s for lst in samples.values() for s in lst), key=lambda s: (s.frame_index, s.track_id))
    for s in flat:
        rows.append(f"{s.frame_index},{s.track_id},{s.label},{format_float(s.alpha)},{format_float(s.score_gen)}")
    return "\n".join(rows) + "\n"


def weighted_logistic_loss(w, s: WeightedSample) -> tuple[float, np.ndarray]:
    """``alpha * log(1 + exp(-label * <w, x>))`` and its gradient."""
    wv = w.w if isinstance(w, ModelWeights) else np.asarray(w, dtype=np.float64)
    if wv.shape != s.features.shape:
        raise DimensionMismatchError(f"model has {wv.shape[0]} weights, sample has {s.features.shape[0]}")
    margin = s.label * float(np.dot(wv, s.features))
    loss = s.alpha * float(np.logaddexp(0.0, -margin))
    # d/dm log(1 + e^-m) = -sigmoid(-m)
    sig = 0.5 * (1.0 + np.tanh(-0.5 * margin))
    return loss, -s.alpha * s.label * sig * s.features


def logistic_objective(wv, X, y, alpha, C):
    """Weighted logistic loss summed over rows plus ``C/2 * ||w||^2``."""
    m = y * (X @ wv)
    value = float(np.sum(alpha * np.logaddexp(0.0, -m))) + 0.5 * C * float(np.dot(wv, wv))
    sig = 0.5 * (1.0 + np.tanh(-0.5 * m))
    grad = X.T @ (-alpha * y * sig) + C * wv
    return value, grad


def fit_weighted_logistic(X, y, alpha, cfg: TrainConfig, meta: str = "", x0=None) -> ModelWeights:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if not np.any(y > 0):
        raise DataError("no positive samples to train on")
    if not np.any(y < 0):
        raise DataError("no negative samples to train on")

    def fun(wv):
        return logistic_objective(wv, X, y, alpha, cfg.C)

    start = np.zeros(X.shape[1]) if x0 is None else np.array(x0, dtype=np.float64)
    wv, trace = minimize_lbfgs(fun, start, cfg.max_iters, cfg.grad_tol)
    log.debug("logistic fit on %d samples: f=%.6g |g|=%.3g %s",
              len(y), trace.objective[-1], trace.grad_norm[-1], trace.stop_reason)
    return ModelWeights(wv, meta)


def samples_to_arrays(samples: Sequence[WeightedSample]):
    if not samples:
        raise DataError("no samples")
    X = np.vstack([s.features for s in samples])
    y = np.array([s.label for s in samples], dtype=np.float64)
    a = np.array([s.alpha for s in samples], dtype=np.float64)
    return X, y, a


def train_specific(samples: Sequence[WeightedSample], cfg: TrainConfig = TrainConfig()) -> ModelWeights:
    """Fit one person-specific model from its weighted samples, starting at zero."""
    labels = {s.label for s in samples}
    if 1 not in labels:
        raise DataError("cannot train a speaker model without positive samples")
    if -1 not in labels:
        raise DataError("cannot train a speaker model without negative samples")
    X, y, a = samples_to_arrays(samples)
    tracks = sorted({s.track_id for s in samples})
    meta = f"specific tracks={','.join(map(str, tracks))} samples={len(samples)} C={cfg.C:g}"
    return fit_weighted_logistic(X, y, a, cfg, meta)


def train_specific_models(sample_map: Mapping[int, Sequence[WeightedSample]],
                          cfg: TrainConfig = TrainConfig()) -> tuple[dict[int, ModelWeights], list[int]]:
    """Train every track that has both classes; return models and skipped tracks."""
    models, skipped = {}, []
    for track in sorted(sample_map):
        try:
            models[track] = train_specific(sample_map[track], cfg)
        except DataError as exc:
            log.warning("track %d skipped: %s", track, exc)
            skipped.append(track)
    return models, skipped


def merge_sample_maps(maps: Iterable[Mapping[int, Sequence[WeightedSample]]]) -> dict[int, list[WeightedSample]]:
    out: dict[int, list[WeightedSample]] = {}
    for m in maps:
        for track, lst in m.items():
            out.setdefault(track, []).extend(lst)
    return dict(sorted(out.items()))


def train_supervised(data: TrackedDataset, cfg: TrainConfig = TrainConfig(),
                     track: Optional[int] = None) -> ModelWeights:
    """Box-level ground-truth baseline (the fully supervised reference).

    Unweighted logistic fit on every labelled box, optionally restricted to
    one track.
    """
    packed = data.packed
    mask = packed.gt != 0
    if track is not None:
        mask &= packed.track == track
    if not np.any(mask):
        raise DataError("no ground-truth labelled boxes to train on")
    X = packed.features[mask]
    y = packed.gt[mask].astype(np.float64)
    what = "all tracks" if track is None else f"track {track}"
    return fit_weighted_logistic(X, y, np.ones(len(y)), cfg, f"supervised {what} C={cfg.C:g}")


TRAIN_MODES = ("generic", "supervised", "specific", "specific-unweighted")


def make_train_fn(mode: str, window_seconds: float = 3.0):
    """Training routine for one LOOCV mode, as ``fn(train_folds, cfg)``."""
    if mode == "generic":
        return lambda folds, cfg: train_latent(concat_datasets(folds), cfg)[0]
    if mode == "supervised":
        def supervised(folds, cfg):
            joined = concat_datasets(folds)
            return {t: train_supervised(joined, cfg, track=t) for t in joined.track_ids}
        return supervised
    if mode in ("specific", "specific-unweighted"):
        hcfg = HarvestConfig(window_seconds, mode == "specific")

        def specific(folds, cfg):
            w_gen, _ = train_latent(concat_datasets(folds), cfg)
            # weights are computed per recording, then pooled
            samples = merge_sample_maps(harvest_samples(w_gen, f, hcfg) for f in folds)
            return train_specific_models(samples, cfg)[0]
        return specific
    raise ValueError(f"unknown mode {mode!r}")
