"""Synthetic experiments behind the acceptance suite.

Each function builds its recordings from fixed seeds, runs one experiment
and returns plain numbers, so results are reproducible run to run.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .adapt import HarvestConfig, harvest_labels, make_train_fn
from .data import SynthConfig, generate_synthetic
from .evaluation import (
    fscore_curve,
    loocv,
    mean_fscore_by_window,
    odd_window,
    per_track_auc,
    score_dataset,
    threshold_at_diagonal,
)
from .latent import TrainConfig, train_latent
from .model import concat_datasets
from .online import OnlineSchedule, run_online


def make_folds(base: SynthConfig, n_folds: int, seed0: int = 0):
    return [generate_synthetic(replace(base, seed=seed0 + k)) for k in range(n_folds)]


# moderate speaker shift, noisy VAD
WEAK_SUPERVISION = SynthConfig(num_speakers=3, dim=64, frames=1000, noise_sigma=0.7,
                               speaker_shift=0.5, vad_error_rate=0.05)

# strong speaker offsets and rare silence, so the generic model mislabels a
# large share of harvested positives; long turns make continuity informative
WEIGHTING = SynthConfig(num_speakers=3, dim=32, frames=1000, noise_sigma=1.3, speaker_shift=2.5,
                        vad_error_rate=0.05, turn_persistence=0.99, silence_prob=0.03)


def weak_supervision(base: SynthConfig = WEAK_SUPERVISION, n_folds: int = 7, seed0: int = 0,
                     cfg: TrainConfig = TrainConfig()):
    """LOOCV of the VAD-trained latent model against the box-supervised baseline."""
    folds = make_folds(base, n_folds, seed0)
    latent = loocv(folds, make_train_fn("generic"), cfg)
    supervised = loocv(folds, make_train_fn("supervised"), cfg)
    return latent, supervised


def mislabel_rate(w_gen, data) -> float:
    """Share of harvested positives whose box is not the speaker."""
    labels, _ = harvest_labels(w_gen, data)
    return float(np.mean(data.packed.gt[labels == 1] != 1))


def temporal_weighting(base: SynthConfig = WEIGHTING, n_folds: int = 7, seed0: int = 200,
                       cfg: TrainConfig = TrainConfig(), window_seconds: float = 3.0):
    """Speaker-specific LOOCV with and without temporal weights.

    Returns ``(weighted, unweighted, mislabel)`` where ``mislabel`` is the
    mean harvesting error of the generic model over the held-out folds.
    """
    folds = make_folds(base, n_folds, seed0)
    weighted = loocv(folds, make_train_fn("specific", window_seconds), cfg)
    unweighted = loocv(folds, make_train_fn("specific-unweighted", window_seconds), cfg)
    rates = []
    for k in range(n_folds):
        w_gen, _ = train_latent(concat_datasets([f for i, f in enumerate(folds) if i != k]), cfg)
        rates.append(mislabel_rate(w_gen, folds[k]))
    return weighted, unweighted, float(np.mean(rates))


ONLINE_SOURCE = SynthConfig(num_speakers=3, dim=32, frames=2000, noise_sigma=0.5, speaker_shift=3.0,
                            vad_error_rate=0.05, turn_persistence=0.98, silence_prob=0.1, seed=0)
ONLINE_TARGET = replace(ONLINE_SOURCE, num_speakers=5, first_speaker=100, seed=1000)


@dataclass
class OnlineResult:
    curve: object
    generic_auc: float
    w_before: np.ndarray
    w_after: np.ndarray


def online_adaptation(source: SynthConfig = ONLINE_SOURCE, target: SynthConfig = ONLINE_TARGET,
                      schedule: OnlineSchedule = OnlineSchedule(), cfg: TrainConfig = TrainConfig()):
    """Train a generic model on one meeting and adapt it to new speakers."""
    w_gen, _ = train_latent(generate_synthetic(source), cfg)
    before = w_gen.w.copy()
    tgt = generate_synthetic(target)
    _, curve = run_online(tgt, w_gen, schedule, HarvestConfig(), cfg)
    series = score_dataset(w_gen, tgt)
    generic = float(np.mean(list(per_track_auc(series).values())))
    return OnlineResult(curve, generic, before, w_gen.w.copy())


SMOOTHING = SynthConfig(num_speakers=3, dim=32, frames=3000, frame_rate_hz=25.0, noise_sigma=1.0,
                        speaker_shift=0.5, vad_error_rate=0.05, turn_persistence=0.99)


def smoothing_curve(base: SynthConfig = SMOOTHING, max_seconds: float = 3.0, noise_rate: float = 0.05,
                    seed: int = 0, cfg: TrainConfig = TrainConfig()) -> dict[int, float]:
    """Mean F-score per odd smoothing window, with decision noise injected.

    The model is trained on one recording and thresholded per track at the
    diagonal of the test recording's ROC.
    """
    w_gen, _ = train_latent(generate_synthetic(replace(base, seed=seed)), cfg)
    test = generate_synthetic(replace(base, seed=seed + 1))
    series = score_dataset(w_gen, test)
    thresholds = {t: threshold_at_diagonal(series.for_track(t)) for t in series.tracks}
    windows = range(1, odd_window(max_seconds, base.frame_rate_hz) + 1, 2)
    return mean_fscore_by_window(fscore_curve(series, thresholds, windows, noise_rate, rng=seed))


def plateau_window(curve: dict[int, float], tol: float = 0.01) -> int:
    """First window whose score is within ``tol`` of the curve's maximum."""
    best = max(curve.values())
    return min(w for w, f in curve.items() if f >= best - tol)
