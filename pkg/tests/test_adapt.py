import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.linear_model import LogisticRegression

from activespeaker.adapt import (
    HarvestConfig,
    WeightedSample,
    harvest_samples,
    harvest_to_csv,
    logistic_objective,
    make_train_fn,
    merge_sample_maps,
    temporal_weight,
    train_specific,
    train_specific_models,
    train_supervised,
    weighted_logistic_loss,
)
from activespeaker.errors import DataError, DimensionMismatchError
from activespeaker.latent import TrainConfig, train_latent
from activespeaker.model import ModelWeights, TrackedDataset

from conftest import fd_gradient, make_frame, max_rel_error

labels_st = st.lists(st.one_of(st.none(), st.sampled_from([1, -1])), min_size=1, max_size=40)


class TestTemporalWeight:
    def test_clamped_at_window(self):
        assert temporal_weight([1] * 20, 10, 5) == 5.0

    def test_isolated(self):
        assert temporal_weight([-1, 1, -1], 1, 5) == 1.0

    def test_hand_enumerated_run(self):
        assert temporal_weight([1, 1, 1, -1, 1], 1, 5) == 3.0

    def test_gap_breaks_run(self):
        assert temporal_weight([1, 1, None, 1, 1], 3, 9) == 2.0

    def test_run_counted_inside_window_only(self):
        # window 5 sees positions 3..7; the run covers all of them
        assert temporal_weight([1] * 6 + [-1] * 4, 5, 5) == 3.0

    def test_missing_label(self):
        with pytest.raises(DataError):
            temporal_weight([1, None], 1, 3)

    @given(labels_st, st.integers(1, 15), st.data())
    def test_bounds(self, labels, window, data):
        positions = [i for i, v in enumerate(labels) if v is not None]
        if not positions:
            return
        p = data.draw(st.sampled_from(positions))
        assert 1.0 <= temporal_weight(labels, p, window) <= window

    @given(labels_st, st.integers(1, 15), st.data())
    def test_time_reversal(self, labels, window, data):
        positions = [i for i, v in enumerate(labels) if v is not None]
        if not positions:
            return
        p = data.draw(st.sampled_from(positions))
        rev = labels[::-1]
        assert temporal_weight(labels, p, window) == temporal_weight(rev, len(labels) - 1 - p, window)

    def test_window_frames(self):
        assert HarvestConfig(3.0).window_frames(10.0) == 30
        assert HarvestConfig(3.0).window_frames(25.0) == 75
        assert HarvestConfig(0.01).window_frames(10.0) == 1


def three_box_frame(vad, i=0):
    return make_frame([[1.0, 0.0], [0.0, 1.0], [2.0, 0.5]], vad, frame_index=i)


class TestHarvest:
    def test_single_frame_counts(self):
        data = TrackedDataset(2, 10.0, (three_box_frame(1),))
        samples = harvest_samples(ModelWeights(np.array([1.0, 0.0])), data)
        labels = {t: [s.label for s in v] for t, v in samples.items()}
        assert labels == {0: [-1], 1: [-1], 2: [1]}

    def test_all_negative_frames(self):
        data = TrackedDataset(2, 10.0, tuple(three_box_frame(-1, i) for i in range(4)))
        assert harvest_samples(ModelWeights(np.array([1.0, 0.0])), data) == {}

    def test_vad_negative_flag(self):
        data = TrackedDataset(2, 10.0, tuple(three_box_frame(-1, i) for i in range(4)))
        samples = harvest_samples(ModelWeights(np.array([1.0, 0.0])), data, HarvestConfig(include_vad_negative=True))
        assert all(s.label == -1 for v in samples.values() for s in v)
        assert sum(len(v) for v in samples.values()) == 12

    def test_dimension_mismatch(self):
        data = TrackedDataset(2, 10.0, (three_box_frame(1),))
        with pytest.raises(DimensionMismatchError):
            harvest_samples(ModelWeights.zeros(3), data)

    def test_per_frame_invariants(self, small_meeting):
        w = ModelWeights(np.random.default_rng(0).normal(size=small_meeting.dim))
        samples = harvest_samples(w, small_meeting)
        by_frame = {}
        for lst in samples.values():
            for s in lst:
                by_frame.setdefault(s.frame_index, []).append(s.label)
        for f in small_meeting.frames:
            if f.vad_label == 1:
                assert sorted(by_frame[f.frame_index]) == [-1] * (len(f.boxes) - 1) + [1]
            else:
                assert f.frame_index not in by_frame

    def test_weights_within_window(self, small_meeting):
        w = ModelWeights(np.random.default_rng(1).normal(size=small_meeting.dim))
        cfg = HarvestConfig(2.0)
        W = cfg.window_frames(small_meeting.frame_rate_hz)
        alphas = [s.alpha for v in harvest_samples(w, small_meeting, cfg).values() for s in v]
        assert min(alphas) >= 1 and max(alphas) <= W

    def test_weighting_disabled(self, small_meeting):
        w = ModelWeights(np.random.default_rng(1).normal(size=small_meeting.dim))
        samples = harvest_samples(w, small_meeting, HarvestConfig(weighting_enabled=False))
        assert {s.alpha for v in samples.values() for s in v} == {1.0}

    def test_trained_generic_beats_chance(self, small_meeting):
        w_gen, _ = train_latent(small_meeting)
        samples = harvest_samples(w_gen, small_meeting)
        gt = {(b.track_id, f.frame_index): b.gt_label for f in small_meeting.frames for b in f.boxes}
        pos = [s for v in samples.values() for s in v if s.label == 1]
        precision = np.mean([gt[(s.track_id, s.frame_index)] == 1 for s in pos])
        assert precision > 1 / 3

    def test_audit_csv(self):
        data = TrackedDataset(2, 10.0, (three_box_frame(1), three_box_frame(1, 1)))
        text = harvest_to_csv(harvest_samples(ModelWeights(np.array([1.0, 0.0])), data))
        lines = text.splitlines()
        assert lines[0] == "frame,track,label,alpha,score_gen"
        assert lines[1:4] == ["0,0,-1,2,1", "0,1,-1,2,0", "0,2,1,2,2"]

    def test_merge(self):
        s = WeightedSample(np.ones(2), 1, 1.0, 0, 0)
        merged = merge_sample_maps([{0: [s]}, {0: [s], 1: [s]}])
        assert {k: len(v) for k, v in merged.items()} == {0: 2, 1: 1}


class TestWeightedLogisticLoss:
    def test_zero_weights(self):
        s = WeightedSample(np.array([3.0, -1.0]), -1, 1.0, 0, 0)
        loss, grad = weighted_logistic_loss(np.zeros(2), s)
        assert loss == pytest.approx(math.log(2), abs=1e-12)
        np.testing.assert_allclose(grad, 0.5 * s.features)

    def test_linear_in_alpha(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            x, w = rng.normal(size=4), rng.normal(size=4)
            a = WeightedSample(x, 1, 1.5, 0, 0)
            b = WeightedSample(x, 1, 3.0, 0, 0)
            la, ga = weighted_logistic_loss(w, a)
            lb, gb = weighted_logistic_loss(w, b)
            assert lb == 2 * la
            np.testing.assert_array_equal(gb, 2 * ga)

    def test_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            s = WeightedSample(rng.normal(size=6), int(rng.choice([1, -1])), float(rng.uniform(1, 30)), 0, 0)
            w = rng.normal(size=6)
            fd = fd_gradient(lambda v: weighted_logistic_loss(v, s)[0], w)
            assert max_rel_error(weighted_logistic_loss(w, s)[1], fd) < 1e-4

    def test_large_margins_stable(self):
        s = WeightedSample(np.array([1.0]), 1, 1.0, 0, 0)
        loss, grad = weighted_logistic_loss(np.array([-1000.0]), s)
        assert loss == pytest.approx(1000.0)
        np.testing.assert_allclose(grad, [-1.0])
        loss, grad = weighted_logistic_loss(np.array([1000.0]), s)
        assert loss == 0.0 and np.all(np.isfinite(grad))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            weighted_logistic_loss(np.zeros(3), WeightedSample(np.ones(2), 1, 1.0, 0, 0))

    @pytest.mark.parametrize("kw", [dict(label=0, alpha=1.0), dict(label=1, alpha=0.5)])
    def test_sample_validation(self, kw):
        with pytest.raises(DataError):
            WeightedSample(np.ones(2), frame_index=0, track_id=0, **kw)


def blob_samples(rng, n=60, dim=4, sep=3.0, alpha=None):
    out = []
    for i in range(n):
        y = 1 if i % 2 else -1
        x = rng.normal(size=dim) + sep * y * np.eye(dim)[0]
        a = 1.0 if alpha is None else float(alpha[i])
        out.append(WeightedSample(x, y, a, i, 0))
    return out


class TestTrainSpecific:
    def test_separable(self):
        rng = np.random.default_rng(4)
        samples = blob_samples(rng, sep=6.0)
        model = train_specific(samples, TrainConfig(C=0.1))
        assert all(np.sign(np.dot(model.w, s.features)) == s.label for s in samples)

    @pytest.mark.parametrize("C", [0.3, 1.0, 5.0])
    @pytest.mark.parametrize("weighted", [False, True])
    def test_matches_sklearn(self, C, weighted):
        rng = np.random.default_rng(5)
        alpha = rng.integers(1, 10, size=80) if weighted else None
        samples = blob_samples(rng, n=80, sep=0.8, alpha=alpha)
        X = np.vstack([s.features for s in samples])
        y = np.array([s.label for s in samples], dtype=float)
        a = np.array([s.alpha for s in samples])
        ours = train_specific(samples, TrainConfig(C=C, grad_tol=1e-10))
        ref = LogisticRegression(C=1.0 / C, fit_intercept=False, tol=1e-12, max_iter=10000)
        ref.fit(X, y, sample_weight=a)
        f_ours = logistic_objective(ours.w, X, y, a, C)[0]
        f_ref = logistic_objective(ref.coef_.ravel(), X, y, a, C)[0]
        assert f_ours == pytest.approx(f_ref, abs=1e-6)
        assert f_ours <= f_ref + 1e-9

    def test_deterministic(self):
        samples = blob_samples(np.random.default_rng(6))
        assert train_specific(samples).w.tobytes() == train_specific(samples).w.tobytes()

    def test_single_class(self):
        pos = [WeightedSample(np.ones(2), 1, 1.0, i, 0) for i in range(3)]
        with pytest.raises(DataError, match="negative"):
            train_specific(pos)
        neg = [WeightedSample(np.ones(2), -1, 1.0, i, 0) for i in range(3)]
        with pytest.raises(DataError, match="positive"):
            train_specific(neg)

    def test_skipped_tracks(self):
        rng = np.random.default_rng(7)
        good = blob_samples(rng)
        bad = [WeightedSample(np.ones(4), 1, 1.0, 0, 1)]
        models, skipped = train_specific_models({0: good, 1: bad})
        assert list(models) == [0] and skipped == [1]


class TestSupervisedBaseline:
    def test_per_track(self, small_meeting):
        model = train_supervised(small_meeting, track=1)
        assert model.dim == small_meeting.dim
        assert "track 1" in model.metadata

    def test_no_labels(self):
        data = TrackedDataset(2, 10.0, (three_box_frame(1),))
        with pytest.raises(DataError):
            train_supervised(data)


class TestTrainModes:
    @pytest.mark.parametrize("mode", ["generic", "supervised", "specific", "specific-unweighted"])
    def test_modes(self, mode, small_meeting):
        a, b = small_meeting.subset(0, 200), small_meeting.subset(200, 400)
        models = make_train_fn(mode)([a, b], TrainConfig())
        if mode == "generic":
            assert isinstance(models, ModelWeights)
        else:
            assert set(models) <= set(small_meeting.track_ids) and models

    def test_unknown(self):
        with pytest.raises(ValueError):
            make_train_fn("nope")
