"""Weakly supervised generic model: latent structured SVM with soft-max loss.

Each frame carries only a voice-activity label.  The joint feature of a
(label, box) pair is the box's features for a speaking label and zero for a
silent one, so the label-conditioned sums in both losses reduce to

    speaking frame:  first term over {beta*s_h} and n copies of beta
                     second term over {beta*s_h}
    silent frame:    first term over {beta*s_h + beta} and n copies of 0
                     second term is n copies of 0

where ``s_h`` is the score of box ``h``.  The per-frame work below is done on
the packed box array with segmented reductions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionMismatchError
from .model import (
    SPEAK,
    FrameSample,
    ModelWeights,
    PackedFrames,
    TrackedDataset,
    pack_frames,
)
from .optim import TrainTrace, minimize_lbfgs

log = logging.getLogger(__name__)

LOSS_KINDS = ("softmax", "maxmargin")


@dataclass(frozen=True)
class TrainConfig:
    C: float = 1.0
    beta: float = 2.0
    max_iters: int = 500
    grad_tol: float = 1e-6
    loss_kind: str = "softmax"
    seed: int = 0

    def __post_init__(self):
        if not self.C > 0:
            raise DataError(f"C must be positive, got {self.C}")
        if not self.beta > 0:
            raise DataError(f"beta must be positive, got {self.beta}")
        if not self.grad_tol > 0:
            raise DataError(f"grad_tol must be positive, got {self.grad_tol}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise DataError(f"max_iters must be a positive integer, got {self.max_iters}")
        if self.loss_kind not in LOSS_KINDS:
            raise DataError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")


def _wvec(w, dim):
    wv = w.w if isinstance(w, ModelWeights) else np.asarray(w, dtype=np.float64)
    if wv.shape != (dim,):
        raise DimensionMismatchError(f"model has {wv.shape[0]} weights, features have {dim}")
    return wv


def _segment_max(values, starts):
    return np.maximum.reduceat(values, starts)


def _segment_sum(values, starts):
    return np.add.reduceat(values, starts)


def softmax_terms(wv, packed: PackedFrames, beta: float):
    """Per-frame soft-max losses and the per-box gradient coefficients.

    Returns ``(losses, coef)`` where the gradient of the summed loss is
    ``packed.features.T @ coef``.
    """
    X, starts, counts = packed.features, packed.starts, packed.counts
    speaking = packed.vad == SPEAK
    bs = beta * (X @ wv)
    box_speaking = np.repeat(speaking, counts)

    # first term: box entries plus n copies of a constant
    box_terms = np.where(box_speaking, bs, bs + beta)
    const = np.where(speaking, beta, 0.0)
    m1 = np.maximum(_segment_max(box_terms, starts), const)
    e_box = np.exp(box_terms - np.repeat(m1, counts))
    z1 = _segment_sum(e_box, starts) + counts * np.exp(const - m1)
    a = m1 + np.log(z1)

    # second term: only speaking frames have box-dependent entries
    m2 = _segment_max(bs, starts)
    e2 = np.exp(bs - np.repeat(m2, counts))
    z2 = _segment_sum(e2, starts)
    b = np.where(speaking, m2 + np.log(z2), np.log(counts))

    losses = (a - b) / beta
    p = e_box / np.repeat(z1, counts)
    q = np.where(box_speaking, e2 / np.repeat(z2, counts), 0.0)
    return losses, p - q


def maxmargin_terms(wv, packed: PackedFrames):
    """Per-frame max-margin losses and a subgradient's per-box coefficients.

    Ties inside a frame resolve to the lowest box index, and a tie between the
    best box and the empty (silent) hypothesis resolves to the box.
    """
    X, starts, counts = packed.features, packed.starts, packed.counts
    speaking = packed.vad == SPEAK
    s = X @ wv
    n_frames = len(starts)
    frame_of_box = packed.frame_of_box
    s_max = _segment_max(s, starts)
    is_max = s == np.repeat(s_max, counts)
    # first maximal box per frame
    first = np.full(n_frames, -1, dtype=np.int64)
    idx = np.flatnonzero(is_max)
    fb = frame_of_box[idx]
    keep = np.ones(len(idx), dtype=bool)
    keep[1:] = fb[1:] != fb[:-1]
    first[fb[keep]] = idx[keep]

    box_candidate = s_max + np.where(speaking, 0.0, 1.0)
    empty_candidate = np.where(speaking, 1.0, 0.0)
    pick_box = box_candidate >= empty_candidate
    first_max = np.where(pick_box, box_candidate, empty_candidate)
    second_max = np.where(speaking, s_max, 0.0)
    losses = first_max - second_max

    coef = np.zeros(len(s))
    np.add.at(coef, first[pick_box], 1.0)
    np.add.at(coef, first[speaking], -1.0)
    return losses, coef


def _single(frame: FrameSample) -> PackedFrames:
    return pack_frames((frame,), frame.dim)


def softmax_loss(w, frame: FrameSample, beta: float) -> float:
    if not beta > 0:
        raise DataError("beta must be positive")
    wv = _wvec(w, frame.dim)
    losses, _ = softmax_terms(wv, _single(frame), beta)
    return float(losses[0])


def softmax_loss_gradient(w, frame: FrameSample, beta: float) -> np.ndarray:
    if not beta > 0:
        raise DataError("beta must be positive")
    wv = _wvec(w, frame.dim)
    packed = _single(frame)
    _, coef = softmax_terms(wv, packed, beta)
    return packed.features.T @ coef


def maxmargin_loss(w, frame: FrameSample) -> float:
    wv = _wvec(w, frame.dim)
    losses, _ = maxmargin_terms(wv, _single(frame))
    return float(losses[0])


def objective(w, data: TrackedDataset, cfg: TrainConfig) -> tuple[float, np.ndarray]:
    """Summed per-frame loss plus ``C/2 * ||w||^2`` and its gradient."""
    if len(data) == 0:
        raise DataError("objective of an empty dataset is undefined")
    wv = _wvec(w, data.dim)
    packed = data.packed
    if cfg.loss_kind == "softmax":
        losses, coef = softmax_terms(wv, packed, cfg.beta)
    else:
        losses, coef = maxmargin_terms(wv, packed)
    value = float(np.sum(losses)) + 0.5 * cfg.C * float(np.dot(wv, wv))
    grad = packed.features.T @ coef + cfg.C * wv
    return value, grad


def train_latent(data: TrackedDataset, cfg: TrainConfig = TrainConfig()) -> tuple[ModelWeights, TrainTrace]:
    """Fit the generic model from frame-level voice activity labels only.

    Starts from the zero vector.  Box ground truth is never read.
    """
    if len(data) == 0:
        raise DataError("training set is empty")
    vad = data.packed.vad
    if not np.any(vad == SPEAK):
        raise DataError("training set has no VAD-positive frames")
    if not np.any(vad != SPEAK):
        raise DataError("training set has no VAD-negative frames")

    def fun(wv):
        return objective(wv, data, cfg)

    wv, trace = minimize_lbfgs(fun, np.zeros(data.dim), cfg.max_iters, cfg.grad_tol)
    log.info("latent training (%s): %d iterations, f=%.6g, |g|=%.3g, %s",
             cfg.loss_kind, len(trace) - 1, trace.objective[-1], trace.grad_norm[-1], trace.stop_reason)
    meta = f"generic loss={cfg.loss_kind} beta={cfg.beta:g} C={cfg.C:g} frames={len(data)}"
    return ModelWeights(wv, meta), trace
