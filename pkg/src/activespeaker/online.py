"""Online adaptation of the generic model to unseen speakers.

Frames arrive in batches.  Each batch is harvested with the fixed generic
model, its samples are weighted by temporal continuity over the stream seen
so far, and every speaker's target model is refit on its accumulated,
class-balanced sample set.  Predictions add the generic and target scores,
so before any sample arrives the adapter behaves exactly like the generic
model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adapt import HarvestConfig, WeightedSample, samples_from_labels, fit_weighted_logistic, samples_to_arrays
from .errors import DataError, DimensionMismatchError
from .evaluation import per_track_auc, score_dataset
from .latent import TrainConfig
from .model import SPEAK, ModelWeights, TrackedDataset, format_float, score, score_boxes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OnlineSchedule:
    batch_frames: Optional[int] = None  # None: one second of frames
    max_seconds_per_speaker: float = 10.0
    balance: bool = True
    warm_start: bool = False

    def __post_init__(self):
        if self.batch_frames is not None and (int(self.batch_frames) != self.batch_frames or self.batch_frames < 1):
            raise DataError(f"batch_frames must be a positive integer, got {self.batch_frames}")
        if not self.max_seconds_per_speaker > 0:
            raise DataError("max_seconds_per_speaker must be positive")

    def batch_size(self, frame_rate_hz: float) -> int:
        if self.batch_frames is not None:
            return int(self.batch_frames)
        return max(1, int(round(frame_rate_hz)))

    def budget_frames(self, frame_rate_hz: float) -> int:
        return max(1, int(round(self.max_seconds_per_speaker * frame_rate_hz)))


@dataclass
class CurveRow:
    iteration: int
    samples_used: int
    auc_per_speaker: dict
    mean_auc: float
    samples_trained: int = 0


@dataclass
class LearningCurve:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i) -> CurveRow:
        return self.rows[i]

    def mean_aucs(self) -> list[float]:
        return [r.mean_auc for r in self.rows]

    def to_csv(self) -> str:
        out = ["iter,samples,track,auc,mean_auc"]
        for r in self.rows:
            for t, a in sorted(r.auc_per_speaker.items()):
                out.append(f"{r.iteration},{r.samples_used},{t},{format_float(a)},{format_float(r.mean_auc)}")
        return "\n".join(out) + "\n"


def predict_online(w_gen, w_t, phi) -> float:
    """Generic score plus target score."""
    return score(w_gen, phi) + score(w_t, phi)


@dataclass
class OnlineState:
    """Everything the adapter has accumulated from the target stream."""

    data: TrackedDataset
    budget_frames: int
    consumed: int = 0
    iteration: int = 0
    labels: np.ndarray = None  # harvested label per packed box, 0 = no sample
    scores: np.ndarray = None
    samples: dict = field(default_factory=dict)
    positives: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.data.packed.track)
        if self.labels is None:
            self.labels = np.zeros(n, dtype=np.int64)
        if self.scores is None:
            self.scores = np.zeros(n)
        for t in self.data.track_ids:
            self.samples.setdefault(t, [])
            self.positives.setdefault(t, 0)
            self.models.setdefault(t, ModelWeights.zeros(self.data.dim, f"target track={t} zero-shot"))

    @property
    def exhausted(self) -> bool:
        if self.consumed >= len(self.data):
            return True
        return all(self.positives[t] >= self.budget_frames for t in self.data.track_ids)

    @property
    def n_samples(self) -> int:
        return sum(len(v) for v in self.samples.values())


def balance_samples(samples: list[WeightedSample]) -> list[WeightedSample]:
    """Subsample the majority class down to the minority count.

    Keeps the highest-weight majority samples, earliest frame first on ties,
    and returns the result in frame order.
    """
    pos = [s for s in samples if s.label == 1]
    neg = [s for s in samples if s.label == -1]
    if not pos or not neg:
        return list(samples)
    major, minor = (pos, neg) if len(pos) > len(neg) else (neg, pos)
    keep = sorted(major, key=lambda s: (-s.alpha, s.frame_index))[:len(minor)]
    return sorted(keep + minor, key=lambda s: (s.frame_index, s.track_id))


def _harvest_batch(state: OnlineState, w_gen: ModelWeights, stop: int, include_vad_negative: bool):
    data = state.data
    packed = data.packed
    new_positions = []
    for pos in range(state.consumed, stop):
        f = data.frames[pos]
        start, n = int(packed.starts[pos]), int(packed.counts[pos])
        s = score_boxes(w_gen, packed.features[start:start + n])
        state.scores[start:start + n] = s
        if f.vad_label == SPEAK:
            lab = -np.ones(n, dtype=np.int64)
            lab[int(np.argmax(s))] = 1
        elif include_vad_negative:
            lab = -np.ones(n, dtype=np.int64)
        else:
            continue
        for j in range(n):
            track = int(packed.track[start + j])
            if state.positives[track] >= state.budget_frames:
                continue
            state.labels[start + j] = lab[j]
            if lab[j] == 1:
                state.positives[track] += 1
        new_positions.append(pos)
    return np.array(new_positions, dtype=np.int64)


def adapt_iteration(state: OnlineState, stop: int, w_gen: ModelWeights,
                    harvest_cfg: HarvestConfig = HarvestConfig(),
                    train_cfg: TrainConfig = TrainConfig(),
                    schedule: OnlineSchedule = OnlineSchedule()) -> tuple[dict, CurveRow]:
    """Consume frames ``state.consumed:stop`` and refit every target model.

    Temporal weights of the new samples use the stream up to ``stop``; earlier
    samples keep the weights they were harvested with.  ``w_gen`` is only
    read.
    """
    data = state.data
    if w_gen.dim != data.dim:
        raise DimensionMismatchError(f"generic model has {w_gen.dim} weights, target dim is {data.dim}")
    stop = min(stop, len(data))
    new_positions = _harvest_batch(state, w_gen, stop, harvest_cfg.include_vad_negative)
    seen = data.subset(0, stop)
    n_seen_boxes = int(seen.packed.features.shape[0])
    new = samples_from_labels(seen, state.labels[:n_seen_boxes], state.scores[:n_seen_boxes],
                               harvest_cfg, positions=new_positions)
    for track, lst in new.items():
        state.samples[track].extend(lst)
    state.consumed = stop
    state.iteration += 1

    trained = 0
    for track in data.track_ids:
        acc = state.samples[track]
        labels = {s.label for s in acc}
        if labels != {1, -1}:
            # prior only until both classes have been seen
            state.models[track] = ModelWeights.zeros(data.dim, f"target track={track} prior-only")
            continue
        use = balance_samples(acc) if schedule.balance else acc
        trained += len(use)
        X, y, a = samples_to_arrays(use)
        x0 = state.models[track].w if schedule.warm_start else None
        state.models[track] = fit_weighted_logistic(
            X, y, a, train_cfg, f"target track={track} iter={state.iteration} samples={len(use)}", x0=x0)
    row = evaluate_state(state, w_gen)
    row.samples_trained = trained
    return dict(state.models), row


def evaluate_state(state: OnlineState, w_gen: ModelWeights) -> CurveRow:
    series = score_dataset(state.models, state.data, prior=w_gen)
    aucs = per_track_auc(series, [t for t in state.data.track_ids if _has_both(series, t)])
    mean = float(np.mean(list(aucs.values()))) if aucs else float("nan")
    return CurveRow(state.iteration, state.n_samples, aucs, mean)


def _has_both(series, track):
    g = series.gt[series.track_id == track]
    return bool(np.any(g > 0) and np.any(g < 0))


def run_online(target: TrackedDataset, w_gen: ModelWeights,
               schedule: OnlineSchedule = OnlineSchedule(),
               harvest_cfg: HarvestConfig = HarvestConfig(),
               train_cfg: TrainConfig = TrainConfig()) -> tuple[dict, LearningCurve]:
    """Stream ``target`` past the adapter until data or every budget runs out.

    Row 0 of the curve is the zero-shot prior.  Ground truth is read only for
    the per-iteration AUC.
    """
    if len(target) == 0:
        raise DataError("target dataset is empty")
    if w_gen.dim != target.dim:
        raise DimensionMismatchError(f"generic model has {w_gen.dim} weights, target dim is {target.dim}")
    if any(len(f.boxes) < 2 for f in target.frames):
        raise DataError("online adaptation expects at least two tracks in every frame")
    state = OnlineState(target, schedule.budget_frames(target.frame_rate_hz))
    curve = LearningCurve([evaluate_state(state, w_gen)])
    batch = schedule.batch_size(target.frame_rate_hz)
    while not state.exhausted:
        _, row = adapt_iteration(state, state.consumed + batch, w_gen, harvest_cfg, train_cfg, schedule)
        curve.rows.append(row)
        log.info("online iter %d: %d samples, mean AUC %.4f", row.iteration, row.samples_used, row.mean_auc)
    return dict(state.models), curve
