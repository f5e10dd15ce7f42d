"""Acceptance criteria 1-9, one test each.

Every test prints a single ``criterion N: PASS|FAIL`` line with the measured
numbers, then asserts the outcome.
"""

import math
import time

import numpy as np
import pytest

from activespeaker.adapt import WeightedSample, weighted_logistic_loss
from activespeaker.benchmarks import (
    online_adaptation,
    plateau_window,
    smoothing_curve,
    temporal_weighting,
    weak_supervision,
)
from activespeaker.cli import main
from activespeaker.data import load_dataset, save_dataset
from activespeaker.evaluation import ScoredSeries, roc_auc
from activespeaker.latent import maxmargin_loss, softmax_loss, softmax_loss_gradient
from activespeaker.model import load_model, save_model

from conftest import decimal_fd_gradient, decimal_softmax_loss, make_frame, max_rel_error, random_frame

BETAS = (1.0, 4.0, 16.0, 64.0)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail
    return emit


def gradient_instances(n):
    # frame label, then box features, then w, all from one stream
    rng = np.random.default_rng(2)
    out = []
    for _ in range(n):
        frame = random_frame(rng, dim=10, n_boxes=3)
        out.append((frame, rng.normal(size=10)))
    return out


def test_c1_gradient(report):
    t0 = time.perf_counter()
    worst = 0.0
    for frame, w in gradient_instances(20):
        fd = decimal_fd_gradient(lambda v: decimal_softmax_loss(v, frame, 2.0), w)
        worst = max(worst, max_rel_error(softmax_loss_gradient(w, frame, 2.0), fd))
    elapsed = time.perf_counter() - t0
    report(1, worst < 1e-4 and elapsed < 5, f"max rel err {worst:.2e}, {elapsed:.2f}s")


def test_c2_beta_limit(report):
    t0 = time.perf_counter()
    ok, last = True, 0.0
    for frame, w in gradient_instances(10):
        mm = maxmargin_loss(w, frame)
        gaps = [abs(softmax_loss(w, frame, b) - mm) for b in BETAS]
        ok &= all(b <= a for a, b in zip(gaps, gaps[1:])) and gaps[-1] < 0.05
        last = max(last, gaps[-1])
    elapsed = time.perf_counter() - t0
    report(2, ok and elapsed < 5, f"max gap at beta 64 {last:.4f}, {elapsed:.2f}s")


def test_c3_closed_forms(report):
    rng = np.random.default_rng(3)
    err_soft = 0.0
    for n in range(1, 8):
        for vad in (1, -1):
            frame = make_frame(rng.normal(size=(n, 4)), vad)
            err_soft = max(err_soft, abs(softmax_loss(np.zeros(4), frame, 1.0) - math.log(1 + math.e)))
    mm_exact = all(maxmargin_loss(np.zeros(4), make_frame(rng.normal(size=(n, 4)), v)) == 1.0
                   for n in range(1, 8) for v in (1, -1))
    err_log = max(abs(weighted_logistic_loss(np.zeros(5), WeightedSample(rng.normal(size=5), y, 1.0, 0, 0))[0]
                      - math.log(2)) for y in (1, -1))
    ok = err_soft <= 1e-9 and mm_exact and err_log <= 1e-12
    report(3, ok, f"softmax err {err_soft:.1e}, maxmargin exact {mm_exact}, logistic err {err_log:.1e}")


def test_c4_auc_oracle(report):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(50):
        scores = rng.normal(size=200)
        if k % 2:
            scores = np.round(scores, 1)  # plenty of ties
        gt = np.where(rng.random(200) < 0.3, 1, -1)
        gt[:2] = (1, -1)
        pos, neg = scores[gt > 0], scores[gt < 0]
        diff = pos[:, None] - neg[None, :]
        oracle = (np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / diff.size
        ours = roc_auc(ScoredSeries(np.arange(200), np.zeros(200, dtype=int), scores, gt))
        worst = max(worst, abs(ours - oracle))
    elapsed = time.perf_counter() - t0
    report(4, worst <= 1e-9 and elapsed < 5, f"max abs diff {worst:.1e}, {elapsed:.2f}s")


@pytest.mark.slow
def test_c5_weak_supervision(report):
    t0 = time.perf_counter()
    latent, supervised = weak_supervision()
    elapsed = time.perf_counter() - t0
    a, b = latent.mean_auc, supervised.mean_auc
    ok = a >= b - 0.05 and a >= 0.85 and b >= 0.85 and elapsed < 300
    report(5, ok, f"latent {a:.3f} ± {latent.std_auc:.3f}, supervised {b:.3f} ± {supervised.std_auc:.3f}, "
                  f"{elapsed:.1f}s")


@pytest.mark.slow
def test_c6_temporal_weighting(report):
    t0 = time.perf_counter()
    weighted, unweighted, mislabel = temporal_weighting()
    elapsed = time.perf_counter() - t0
    a, b = weighted.mean_auc, unweighted.mean_auc
    ok = mislabel >= 0.10 and a - b >= 0.05 and elapsed < 300
    report(6, ok, f"weighted {a:.3f}, unweighted {b:.3f}, gain {a - b:.3f}, "
                  f"mislabelled positives {mislabel:.3f}, {elapsed:.1f}s")


@pytest.mark.slow
def test_c7_online(report):
    t0 = time.perf_counter()
    res = online_adaptation()
    elapsed = time.perf_counter() - t0
    first, final = res.curve[0].mean_auc, res.curve[-1].mean_auc
    untouched = res.w_before.tobytes() == res.w_after.tobytes()
    speakers = len(res.curve[0].auc_per_speaker)
    ok = (first == res.generic_auc and final - first >= 0.05 and untouched and speakers == 5
          and elapsed < 300)
    report(7, ok, f"row 0 {first:.5f} (generic {res.generic_auc:.5f}), final {final:.4f} after "
                  f"{len(res.curve) - 1} iterations, w_gen unchanged {untouched}, {elapsed:.1f}s")


def test_c8_smoothing(report):
    t0 = time.perf_counter()
    curve = smoothing_curve()
    elapsed = time.perf_counter() - t0
    windows = sorted(curve)
    plateau = plateau_window(curve)
    rising = [w for w in windows if w <= plateau]
    monotone = all(curve[b] >= curve[a] - 0.01 for a, b in zip(rising, rising[1:]))
    f1, f3 = curve[1], curve[windows[-1]]
    ok = f3 > f1 and monotone and elapsed < 60
    report(8, ok, f"F at 1 frame {f1:.3f}, at {windows[-1]} frames (3 s) {f3:.3f}, "
                  f"plateau at {plateau} frames, {elapsed:.1f}s")


def run_pipeline(root):
    data = root / "meeting.txt"
    fold = root / "fold.txt"
    model = root / "generic.model"
    common = ["--frames", "300", "--dim", "8", "--noise-sigma", "0.5", "--vad-error-rate", "0.05"]
    assert main(["gen", "--out", str(data), "--seed", "1", *common]) == 0
    assert main(["gen", "--out", str(fold), "--seed", "2", *common]) == 0
    assert main(["train-generic", "--data", str(data), "--out-model", str(model)]) == 0
    assert main(["train-specific", "--data", str(data), "--generic-model", str(model),
                 "--out-dir", str(root / "specific")]) == 0
    assert main(["eval", "--data", str(fold), "--model", str(model), "--out", str(root / "eval")]) == 0
    assert main(["online", "--target-data", str(fold), "--generic-model", str(model), "--budget-seconds", "3",
                 "--out-dir", str(root / "online")]) == 0
    assert main(["report", "--data", str(data), "--data", str(fold), "--out-dir", str(root / "report")]) == 0
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c9_determinism_and_round_trip(report, tmp_path, capsys):
    a = run_pipeline(tmp_path / "a")
    b = run_pipeline(tmp_path / "b")
    capsys.readouterr()
    identical = a.keys() == b.keys() and all(a[k] == b[k] for k in a)

    # dataset: load, save, reload
    first = load_dataset(tmp_path / "a" / "meeting.txt")
    save_dataset(first, tmp_path / "copy.txt")
    again = load_dataset(tmp_path / "copy.txt")
    data_ok = (first.dim, first.frame_rate_hz, len(first)) == (again.dim, again.frame_rate_hz, len(again))
    for f, g in zip(first.frames, again.frames):
        data_ok &= (f.frame_index, f.vad_label, len(f.boxes)) == (g.frame_index, g.vad_label, len(g.boxes))
        for x, y in zip(f.boxes, g.boxes):
            data_ok &= x.track_id == y.track_id and x.gt_label == y.gt_label
            data_ok &= x.features.tobytes() == y.features.tobytes()
    data_ok &= (tmp_path / "copy.frames.csv").read_bytes() == (tmp_path / "a" / "meeting.frames.csv").read_bytes()

    model = load_model(tmp_path / "a" / "generic.model")
    save_model(model, tmp_path / "copy.model")
    model_ok = load_model(tmp_path / "copy.model").w.tobytes() == model.w.tobytes()
    model_ok &= (tmp_path / "copy.model").read_bytes() == a[next(k for k in a if k.name == "generic.model")]

    report(9, identical and data_ok and model_ok,
           f"{len(a)} output files identical {identical}, dataset round trip {data_ok}, model round trip {model_ok}")
