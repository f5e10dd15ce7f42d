"""ROC/AUC, equal-error thresholding, temporal smoothing, F-scores and LOOCV."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import DataError, DimensionMismatchError
from .model import ModelWeights, TrackedDataset, format_float

Models = Union[ModelWeights, Mapping[int, ModelWeights]]


class UndefinedFScoreWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ScoredSeries:
    """Scores and ground truth per (frame, track), in frame-major order."""

    frame_index: np.ndarray
    track_id: np.ndarray
    score: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        n = len(self.score)
        for name in ("frame_index", "track_id", "gt"):
            if len(getattr(self, name)) != n:
                raise DataError(f"series field {name} has the wrong length")

    def __len__(self):
        return len(self.score)

    @property
    def tracks(self) -> list[int]:
        return sorted(int(t) for t in np.unique(self.track_id))

    def for_track(self, track: int) -> "ScoredSeries":
        m = self.track_id == track
        return ScoredSeries(self.frame_index[m], self.track_id[m], self.score[m], self.gt[m])

    def for_tracks(self, tracks) -> "ScoredSeries":
        m = np.isin(self.track_id, list(tracks))
        return ScoredSeries(self.frame_index[m], self.track_id[m], self.score[m], self.gt[m])

    def labelled(self) -> "ScoredSeries":
        m = self.gt != 0
        return ScoredSeries(self.frame_index[m], self.track_id[m], self.score[m], self.gt[m])


def score_dataset(models: Models, data: TrackedDataset, prior: Optional[ModelWeights] = None) -> ScoredSeries:
    """Score every box; ``models`` is one shared model or one model per track.

    Tracks missing from a per-track mapping score with the zero model, so with
    ``prior`` given they fall back to the prior's scores.
    """
    packed = data.packed
    X = packed.features
    if isinstance(models, ModelWeights):
        if models.dim != data.dim:
            raise DimensionMismatchError(f"model has {models.dim} weights, dataset dim is {data.dim}")
        scores = X @ models.w
    else:
        scores = np.zeros(len(X))
        for track, model in models.items():
            if model.dim != data.dim:
                raise DimensionMismatchError(f"model for track {track} has {model.dim} weights, dataset dim is {data.dim}")
            m = packed.track == track
            scores[m] = X[m] @ model.w
    if prior is not None:
        scores = X @ prior.w + scores
    frame_index = np.array([f.frame_index for f in data.frames], dtype=np.int64)[packed.frame_of_box]
    return ScoredSeries(frame_index, packed.track.copy(), scores, packed.gt.copy())


def _pos_neg(series: ScoredSeries):
    s = series.labelled()
    pos = s.score[s.gt > 0]
    neg = s.score[s.gt < 0]
    if len(pos) == 0 or len(neg) == 0:
        raise DataError("AUC needs at least one positive and one negative ground-truth entry")
    return s, pos, neg


def roc_points(series: ScoredSeries):
    """ROC vertices, one per distinct score threshold, from (0, 0) to (1, 1)."""
    s, pos, neg = _pos_neg(series)
    order = np.argsort(-s.score, kind="mergesort")
    scores = s.score[order]
    is_pos = s.gt[order] > 0
    # last index of each tie block
    block_end = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    tp = np.cumsum(is_pos)[block_end]
    fp = np.cumsum(~is_pos)[block_end]
    tpr = np.r_[0.0, tp / len(pos)]
    fpr = np.r_[0.0, fp / len(neg)]
    return fpr, tpr, scores[block_end]


def roc_auc(series: ScoredSeries) -> float:
    """Trapezoidal area under the ROC curve; ties earn half credit."""
    fpr, tpr, _ = roc_points(series)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def threshold_at_diagonal(series: ScoredSeries) -> float:
    """Threshold whose operating point is closest to TPR = 1 - FPR.

    A box is called speaking when its score is >= the threshold.  Candidates
    are the distinct scores plus +inf (reject everything); among equally good
    finite candidates the highest wins, and +inf is chosen only when strictly
    better than every finite one.
    """
    fpr, tpr, thresholds = roc_points(series)
    dev = np.abs(tpr[1:] + fpr[1:] - 1.0)
    best = np.min(dev)
    # thresholds are in descending order; first hit is the highest
    i = int(np.flatnonzero(dev == best)[0])
    if abs(tpr[0] + fpr[0] - 1.0) < best:
        return math.inf
    return float(thresholds[i])


def operating_point(series: ScoredSeries, threshold: float) -> tuple[float, float]:
    s, pos, neg = _pos_neg(series)
    return float(np.mean(pos >= threshold)), float(np.mean(neg >= threshold))


def odd_window(seconds: float, frame_rate_hz: float) -> int:
    """Nearest odd frame count to ``seconds`` of video; halves round up."""
    if seconds < 0:
        raise DataError("smoothing duration must be non-negative")
    n = seconds * frame_rate_hz
    return max(1, 2 * math.floor((n - 1) / 2 + 0.5) + 1)


def temporal_smooth(labels, window_frames: int) -> np.ndarray:
    """Centered majority vote, window truncated at the ends.

    Works on {0, 1}, boolean or {-1, +1} sequences and returns the same
    encoding.  A tied vote (possible only in a truncated window) keeps the
    frame's own label.
    """
    if window_frames < 1 or window_frames % 2 == 0:
        raise DataError(f"smoothing window must be a positive odd integer, got {window_frames}")
    x = np.asarray(labels)
    if window_frames == 1 or len(x) == 0:
        return x.copy()
    positive = x > 0
    n = len(x)
    half = window_frames // 2
    csum = np.r_[0, np.cumsum(positive)]
    idx = np.arange(n)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, n)
    votes = csum[hi] - csum[lo]
    total = hi - lo
    out_pos = np.where(2 * votes > total, True, np.where(2 * votes < total, False, positive))
    if x.dtype == bool:
        return out_pos
    if np.any(x < 0):
        return np.where(out_pos, 1, -1).astype(x.dtype)
    return out_pos.astype(x.dtype)


def smooth_scores(scores, window_frames: int) -> np.ndarray:
    """Centered moving average, window truncated at the ends."""
    if window_frames < 1 or window_frames % 2 == 0:
        raise DataError(f"smoothing window must be a positive odd integer, got {window_frames}")
    x = np.asarray(scores, dtype=np.float64)
    if window_frames == 1:
        return x.copy()
    n = len(x)
    half = window_frames // 2
    csum = np.r_[0.0, np.cumsum(x)]
    idx = np.arange(n)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


SMOOTH_MODES = ("vote", "mean")


def smoothed_decisions(series: "ScoredSeries", thresholds, window_frames: int, mode: str = "vote",
                       raw=None) -> np.ndarray:
    """Per-track smoothed decisions aligned with ``series``.

    ``vote`` thresholds first and takes a majority vote (``raw`` may supply
    pre-computed, e.g. noise-injected, decisions); ``mean`` averages scores
    over the window and thresholds the average.
    """
    if mode not in SMOOTH_MODES:
        raise DataError(f"smoothing mode must be one of {SMOOTH_MODES}, got {mode!r}")
    out = np.zeros(len(series), dtype=bool)
    if mode == "vote":
        raw = decisions(series, thresholds) if raw is None else raw
    for t in series.tracks:
        m = series.track_id == t
        if mode == "vote":
            out[m] = temporal_smooth(raw[m], window_frames)
        else:
            th = thresholds[t] if isinstance(thresholds, Mapping) else thresholds
            out[m] = smooth_scores(series.score[m], window_frames) >= th
    return out


def f_score(pred, gt) -> float:
    """F1 on the positive class.

    If either sequence has no positives the score is defined as 0 and an
    ``UndefinedFScoreWarning`` is issued.
    """
    p = np.asarray(pred) > 0
    g = np.asarray(gt) > 0
    if p.shape != g.shape:
        raise DataError("prediction and ground truth lengths differ")
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    if not p.any() or not g.any():
        warnings.warn("F-score undefined without predicted and actual positives; using 0",
                      UndefinedFScoreWarning, stacklevel=2)
        return 0.0
    return 2.0 * tp / (2 * tp + fp + fn)


# -- cross validation ------------------------------------------------------

@dataclass
class EvalReport:
    """Per-speaker AUC across folds plus optional F-curve and thresholds.

    ``fold_auc[track]`` lists one AUC per fold (fold order preserved).
    Standard deviations are population (divide by n).
    """

    fold_auc: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    fscore_curve: list = field(default_factory=list)  # (window_frames, track, fscore)

    @property
    def speakers(self):
        return sorted(self.fold_auc)

    @property
    def n_folds(self) -> int:
        return max((len(v) for v in self.fold_auc.values()), default=0)

    def speaker_mean(self, track) -> float:
        return float(np.mean(self.fold_auc[track]))

    def speaker_std(self, track) -> float:
        return float(np.std(self.fold_auc[track]))

    @property
    def mean_auc(self) -> float:
        return float(np.mean([self.speaker_mean(t) for t in self.speakers]))

    @property
    def std_auc(self) -> float:
        return float(np.std(np.concatenate([self.fold_auc[t] for t in self.speakers])))

    def fold_mean(self, fold: int) -> float:
        return float(np.mean([self.fold_auc[t][fold] for t in self.speakers]))

    def table(self) -> str:
        """Table layout: one column per speaker and a mean column."""
        head = " | ".join([f"speaker {t}" for t in self.speakers] + ["mean"])
        cells = [f"{self.speaker_mean(t):.2f} ± {self.speaker_std(t):.2f}" for t in self.speakers]
        cells.append(f"{self.mean_auc:.2f} ± {self.std_auc:.2f}")
        return head + "\n" + " | ".join(cells)

    def auc_csv(self) -> str:
        rows = ["speaker,fold,auc"]
        for t in self.speakers:
            for k, a in enumerate(self.fold_auc[t]):
                rows.append(f"{t},{k},{format_float(a)}")
        return "\n".join(rows) + "\n"

    def summary_csv(self) -> str:
        rows = ["speaker,mean_auc,std"]
        for t in self.speakers:
            rows.append(f"{t},{format_float(self.speaker_mean(t))},{format_float(self.speaker_std(t))}")
        rows.append(f"mean,{format_float(self.mean_auc)},{format_float(self.std_auc)}")
        return "\n".join(rows) + "\n"

    def fscore_csv(self) -> str:
        rows = ["window_frames,speaker,fscore"]
        for w, t, f in self.fscore_curve:
            rows.append(f"{w},{t},{format_float(f)}")
        return "\n".join(rows) + "\n"


def per_track_auc(series: ScoredSeries, tracks: Optional[Sequence[int]] = None) -> dict[int, float]:
    tracks = series.tracks if tracks is None else tracks
    return {int(t): roc_auc(series.for_track(t)) for t in tracks}


def check_folds(folds: Sequence[TrackedDataset]) -> None:
    if len(folds) < 2:
        raise DataError("cross validation needs at least two folds")
    dims = {f.dim for f in folds}
    if len(dims) != 1:
        raise DimensionMismatchError(f"folds disagree on feature dimension: {sorted(dims)}")
    rosters = {f.track_ids for f in folds}
    if len(rosters) != 1:
        raise DataError(f"folds disagree on the track roster: {sorted(rosters)}")


def evaluate_fold(folds: Sequence[TrackedDataset], k: int, train_fn: Callable, cfg) -> dict[int, float]:
    """Train on every fold but ``k`` and return per-track AUC on fold ``k``."""
    train = [f for i, f in enumerate(folds) if i != k]
    models = train_fn(train, cfg)
    return per_track_auc(score_dataset(models, folds[k]), folds[k].track_ids)


def loocv(folds: Sequence[TrackedDataset], train_fn: Callable, cfg) -> EvalReport:
    """Leave-one-recording-out evaluation.

    ``train_fn(train_folds, cfg)`` returns a shared model or a per-track
    mapping of models.
    """
    check_folds(folds)
    report = EvalReport()
    for t in folds[0].track_ids:
        report.fold_auc[t] = []
    for k in range(len(folds)):
        for t, a in evaluate_fold(folds, k, train_fn, cfg).items():
            report.fold_auc[t].append(a)
    return report


# -- decisions, F-curves and timelines -------------------------------------

def decisions(series: ScoredSeries, thresholds: Union[float, Mapping[int, float]]) -> np.ndarray:
    """Boolean speaking decisions aligned with ``series``."""
    if isinstance(thresholds, Mapping):
        th = np.array([thresholds[int(t)] for t in series.track_id])
    else:
        th = thresholds
    return series.score >= th


def fscore_curve(series: ScoredSeries, thresholds, windows: Sequence[int],
                 noise_rate: float = 0.0, rng=None, mode: str = "vote") -> list[tuple[int, int, float]]:
    """F-score per track for each smoothing window.

    With ``noise_rate`` > 0 a fixed set of per-frame decisions is flipped
    before smoothing (the same flips for every window); only the vote mode
    supports this.
    """
    raw = None
    if noise_rate > 0:
        if mode != "vote":
            raise DataError("decision noise is only defined for majority-vote smoothing")
        rng = np.random.default_rng(rng)
        raw = decisions(series, thresholds) ^ (rng.random(len(series)) < noise_rate)
    out = []
    for w in windows:
        d = smoothed_decisions(series, thresholds, w, mode, raw)
        for t in series.tracks:
            m = series.track_id == t
            g = series.gt[m]
            lab = g != 0
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UndefinedFScoreWarning)
                out.append((int(w), int(t), f_score(d[m][lab], g[lab])))
    return out


def mean_fscore_by_window(curve) -> dict[int, float]:
    windows = sorted({w for w, _, _ in curve})
    return {w: float(np.mean([f for ww, _, f in curve if ww == w])) for w in windows}


def export_timeline(series: ScoredSeries, thresholds, window_frames: int, path=None, mode: str = "vote") -> str:
    """Per-frame, per-track CSV: normalized score, smoothed decision, gt.

    Scores are min-max normalized per track; a constant track maps to 0.
    """
    norm = np.zeros(len(series))
    smooth = smoothed_decisions(series, thresholds, window_frames, mode)
    for t in series.tracks:
        m = series.track_id == t
        s = series.score[m]
        span = s.max() - s.min()
        norm[m] = (s - s.min()) / span if span > 0 else 0.0
    rows = ["frame,track,score_norm,decision,gt"]
    for i in range(len(series)):
        rows.append(f"{series.frame_index[i]},{series.track_id[i]},{format_float(norm[i])},"
                    f"{int(smooth[i])},{series.gt[i]}")
    text = "\n".join(rows) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def read_timeline(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "frame": np.array([int(r["frame"]) for r in rows], dtype=np.int64),
        "track": np.array([int(r["track"]) for r in rows], dtype=np.int64),
        "score_norm": np.array([float(r["score_norm"]) for r in rows]),
        "decision": np.array([int(r["decision"]) for r in rows], dtype=np.int64),
        "gt": np.array([int(r["gt"]) for r in rows], dtype=np.int64),
    }
