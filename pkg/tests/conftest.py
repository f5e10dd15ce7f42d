import numpy as np
import pytest

from activespeaker.data import SynthConfig, generate_synthetic
from activespeaker.model import BoxObservation, FrameSample, TrackedDataset


def make_frame(features, vad=1, frame_index=0, gt=None):
    """Frame with one box per row of ``features``, tracks numbered 0..n-1."""
    gt = gt or [None] * len(features)
    boxes = tuple(BoxObservation(k, f, g) for k, (f, g) in enumerate(zip(features, gt)))
    return FrameSample(frame_index, vad, boxes)


def random_frame(rng, dim=10, n_boxes=3, vad=None, scale=1.0):
    y = int(rng.choice([1, -1])) if vad is None else vad
    return make_frame(scale * rng.normal(size=(n_boxes, dim)), y)


def random_dataset(rng, n_frames=30, dim=6, n_boxes=3, fps=10.0):
    frames = []
    for i in range(n_frames):
        y = 1 if i % 3 else -1
        feats = rng.normal(size=(n_boxes, dim))
        frames.append(make_frame(feats, y, frame_index=i))
    return TrackedDataset(dim, fps, tuple(frames))


def fd_gradient(f, w, step=1e-6):
    g = np.zeros_like(w)
    for i in range(len(w)):
        e = np.zeros_like(w)
        e[i] = step
        g[i] = (f(w + e) - f(w - e)) / (2 * step)
    return g


def max_rel_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


@pytest.fixture(scope="session")
def small_meeting():
    return generate_synthetic(SynthConfig(num_speakers=3, dim=16, frames=400, noise_sigma=0.5, seed=11))


def decimal_softmax_loss(w, frame, beta, prec=40):
    """Soft-max loss as a direct double sum in high-precision decimal.

    ``w`` may hold floats or Decimals; inner products are exact.
    """
    from decimal import Decimal, localcontext

    from activespeaker.model import joint_feature

    with localcontext() as ctx:
        ctx.prec = prec
        b = Decimal(beta)
        wd = [Decimal(v) for v in w]
        yi = frame.vad_label

        def dot(phi):
            return sum((a * Decimal(float(x)) for a, x in zip(wd, phi)), Decimal(0))

        n = len(frame.boxes)
        top = sum((b * dot(joint_feature(frame, y, h)) + (0 if y == yi else b)).exp()
                  for y in (1, -1) for h in range(n))
        bottom = sum((b * dot(joint_feature(frame, yi, h))).exp() for h in range(n))
        return (top.ln() - bottom.ln()) / b


def decimal_fd_gradient(loss, w, step="1e-6", prec=40):
    """Central differences of ``loss`` evaluated in decimal arithmetic."""
    from decimal import Decimal, localcontext

    with localcontext() as ctx:
        ctx.prec = prec
        h = Decimal(step)
        base = [Decimal(float(v)) for v in w]
        g = []
        for i in range(len(base)):
            up = list(base)
            dn = list(base)
            up[i] += h
            dn[i] -= h
            g.append(float((loss(up) - loss(dn)) / (2 * h)))
    return np.array(g)
