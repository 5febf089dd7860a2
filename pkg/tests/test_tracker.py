import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from searchtrack import numkernel as nk
from searchtrack.losses import render_gaussian
from searchtrack.motion import kf_init
from searchtrack.nets import Detection, Frame, HeadOutputs, SearchTrackNet
from searchtrack.numkernel import Tensor
from searchtrack.scenegen import SceneConfig, generate
from searchtrack.tracker import (
    SearchPeak,
    Track,
    TrackerConfig,
    TrainConfig,
    associate,
    build_targets,
    gate_radius,
    grid_box_to_pixels,
    jitter_sigma,
    jittered_centers,
    make_train_sequence,
    match_by_peak,
    pair_loss,
    sample_delta,
    step,
    track_sequence,
    train,
    train_pair,
    Tracker,
)

from .test_searcher import motion_only_theta


class OracleModel:
    """Stands in for the network: heatmap rendered from known centers, motion-only searcher weights."""

    def __init__(self, centers_per_frame, size=(5.0, 5.0), grid=(32, 32), score=0.95):
        self.centers = centers_per_frame
        self.size = size
        self.grid = grid
        self.score = score

    def forward(self, frame):
        h, w = self.grid
        y = np.zeros((1, h, w))
        for c in self.centers[frame.frame_index]:
            render_gaussian(y[0], c, 3.0)
        y *= self.score
        size = np.stack([np.full((h, w), self.size[0]), np.full((h, w), self.size[1])])
        theta = np.repeat(motion_only_theta()[:, None, None], h, 1).repeat(w, 2)
        return HeadOutputs(Tensor(y), Tensor(size), Tensor(np.zeros((16, h, w))), Tensor(theta))


def _blank(idx, hw=128):
    return Frame(np.zeros((3, hw, hw)), frame_index=idx)


def _track(tid=1, center=(5.0, 5.0), size=(3.0, 3.0)):
    return Track(tid, kf_init(center), np.zeros(233), center, size)


def _det(center, score=0.9, cls=0):
    return Detection(center, (3.0, 3.0), score, np.zeros(233), cls)


class TestAssociate:
    def test_single_inside_gate(self):
        r = np.zeros((32, 32))
        r[5, 5] = 0.9
        matches, lost, fresh = associate([SearchPeak(_track(), (5, 5), 0.9, r)], [_det((5.0, 5.0))], TrackerConfig())
        assert len(matches) == 1 and not lost and not fresh

    def test_two_by_two_identity(self):
        d = [_det((4.0, 4.0)), _det((8.0, 4.0))]
        peaks = []
        for i, (own, other) in enumerate(((0.9, 0.8), (0.9, 0.8))):
            r = np.zeros((32, 32))
            r[4, 4 + 4 * i] = own
            r[4, 8 - 4 * i] = other
            peaks.append(SearchPeak(_track(i + 1, d[i].center), (4 + 4 * i, 4), own, r))
        matches, _, _ = associate(peaks, d, TrackerConfig())
        assert [(t.track_id, det.center) for t, det in matches] == [(1, (4.0, 4.0)), (2, (8.0, 4.0))]

    def test_outside_gate(self):
        r = np.full((32, 32), 0.99)
        tr = _track(size=(1.0, 1.0))
        far = (5.0 + gate_radius(tr, 2.0) + 1, 5.0)
        matches, lost, fresh = associate([SearchPeak(tr, (5, 5), 0.99, r)], [_det(far)], TrackerConfig())
        assert not matches and lost == [tr] and len(fresh) == 1

    def test_below_assoc_threshold(self):
        r = np.full((32, 32), 0.2)
        matches, lost, fresh = associate([SearchPeak(_track(), (5, 5), 0.2, r)], [_det((5.0, 5.0))], TrackerConfig())
        assert not matches and len(lost) == 1 and len(fresh) == 1

    def test_class_mismatch(self):
        r = np.full((32, 32), 0.9)
        matches, _, _ = associate([SearchPeak(_track(), (5, 5), 0.9, r)], [_det((5.0, 5.0), cls=1)], TrackerConfig())
        assert not matches

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 2**31 - 1))
    def test_one_to_one(self, n, m, seed):
        rng = np.random.default_rng(seed)
        peaks = [
            SearchPeak(_track(i + 1, tuple(rng.uniform(0, 16, 2))), tuple(rng.integers(0, 16, 2)), 0.5,
                       rng.uniform(0, 1, (16, 16)))
            for i in range(n)
        ]
        dets = [_det(tuple(rng.uniform(0, 15, 2))) for _ in range(m)]
        matches, lost, fresh = associate(peaks, dets, TrackerConfig())
        assert len({id(t) for t, _ in matches}) == len(matches) == len({id(d) for _, d in matches})
        assert len(matches) + len(lost) == n and len(matches) + len(fresh) == m


class TestPeakMatch:
    def test_weak_map_with_peak_on_detection(self):
        r = np.full((32, 32), 0.01)
        r[5, 6] = 0.05
        matches, lost, fresh = match_by_peak([SearchPeak(_track(), (6, 5), 0.05, r)], [_det((6.0, 6.0))], 1.5)
        assert len(matches) == 1 and not lost and not fresh

    def test_radius_and_zero_disables(self):
        pk = SearchPeak(_track(), (6, 5), 0.05, np.zeros((32, 32)))
        assert not match_by_peak([pk], [_det((6.0, 7.0))], 1.5)[0]
        assert not match_by_peak([pk], [_det((6.0, 5.0))], 0.0)[0]

    def test_nearest_pairs(self):
        peaks = [SearchPeak(_track(i + 1), loc, 0.1, np.zeros((32, 32))) for i, loc in enumerate(((4, 4), (6, 4)))]
        dets = [_det((6.5, 4.0)), _det((4.5, 4.0))]
        matches, _, _ = match_by_peak(peaks, dets, 1.5)
        assert sorted((t.track_id, d.center) for t, d in matches) == [(1, (4.5, 4.0)), (2, (6.5, 4.0))]


class TestLifecycle:
    def test_births_in_score_order(self):
        model = OracleModel({0: [(5, 5), (20, 20)]})
        model.forward = _scored_forward(model, {(5, 5): 0.6, (20, 20): 0.9})
        tracker = Tracker(model)
        res = tracker.step(_blank(0))
        by_id = {e.track_id: e for e in res.entries}
        assert sorted(by_id) == [1, 2]
        assert by_id[1].score == pytest.approx(0.9) and by_id[2].score == pytest.approx(0.6)

    def test_weak_detection_extends_but_never_starts_a_track(self):
        model = OracleModel({0: [(8, 8)], 1: [(9, 8)], 2: [(9, 8), (24, 24)]})
        model.forward = _scored_forward(model, {(8, 8): 0.9})
        tracker = Tracker(model)
        assert [e.track_id for e in tracker.step(_blank(0)).entries] == [1]
        model.forward = _scored_forward(OracleModel({1: [(9, 8)]}), {(9, 8): 0.3})
        assert [e.track_id for e in tracker.step(_blank(1)).entries] == [1]
        model.forward = _scored_forward(OracleModel({2: []}), {(9, 8): 0.3, (24, 24): 0.3})
        assert [e.track_id for e in tracker.step(_blank(2)).entries] == [1]

    def test_duplicate_peak_is_not_born(self):
        model = OracleModel({0: [(8, 8)]})
        tracker = Tracker(model)
        tracker.step(_blank(0))
        # a second, weaker peak two cells away on the same 5x5-cell object
        model.forward = _scored_forward(OracleModel({1: []}), {(8, 8): 0.9, (10, 8): 0.6})
        assert [e.track_id for e in tracker.step(_blank(1)).entries] == [1]

    def test_identity_persists(self):
        centers = {t: [(5 + t, 8)] for t in range(6)}
        res = track_sequence(OracleModel(centers), [_blank(t) for t in range(6)])
        assert all([e.track_id for e in r.entries] == [1] for r in res)

    def test_retired_after_five_misses(self):
        centers = {0: [(10, 10)], **{t: [] for t in range(1, 8)}}
        tracker = Tracker(OracleModel(centers))
        alive = []
        for t in range(8):
            tracks, _ = step(tracker, _blank(t))
            alive.append(len(tracks))
        assert alive == [1, 1, 1, 1, 1, 0, 0, 0]

    def test_not_revived(self):
        centers = {0: [(10, 10)], **{t: [] for t in range(1, 6)}, 6: [(10, 10)]}
        res = track_sequence(OracleModel(centers), [_blank(t) for t in range(7)])
        assert [e.track_id for e in res[6].entries] == [2]

    def test_ids_strictly_increase(self):
        rng = np.random.default_rng(0)
        centers = {t: [tuple(rng.integers(2, 30, 2)) for _ in range(rng.integers(0, 3))] for t in range(20)}
        res = track_sequence(OracleModel(centers), [_blank(t) for t in range(20)])
        seen = []
        for r in res:
            ids = [e.track_id for e in r.entries]
            assert len(ids) == len(set(ids))
            seen += [i for i in ids if i not in seen]
        assert seen == sorted(seen)

    def test_decreasing_index_rejected(self):
        tracker = Tracker(OracleModel({0: [], 1: []}))
        tracker.step(_blank(1))
        with pytest.raises(ValueError):
            tracker.step(_blank(0))

    def test_crossing_with_motion_keeps_ids(self):
        # two objects crossing in a straight line; the motion-only searcher separates them
        centers = {t: [(4 + t, 4 + t), (24 - t, 4 + t)] for t in range(21)}
        res = track_sequence(OracleModel(centers), [_blank(t) for t in range(21)])
        first = {e.track_id: e.box for e in res[0].entries}
        last = {e.track_id: e.box for e in res[-1].entries}
        assert sorted(first) == sorted(last) == [1, 2]
        assert first[1][0] < first[2][0] and last[1][0] > last[2][0]

    def test_box_conversion(self):
        assert grid_box_to_pixels((10.0, 5.0), (2.0, 4.0)) == (32.0, 16.0, 16.0, 8.0)


def _scored_forward(model, scores):
    base = model.forward

    def forward(frame):
        out = base(frame)
        y = np.zeros_like(out.heatmap.data)
        for (x, yy), s in scores.items():
            t = np.zeros(y.shape[1:])
            render_gaussian(t, (x, yy), 3.0)
            y[0] = np.maximum(y[0], s * t)
        return HeadOutputs(Tensor(y), out.size_map, out.search_feature, out.weight_map)

    return forward


class TestTrainingPieces:
    def test_delta_uniform(self):
        rng = np.random.default_rng(0)
        draws = np.array([sample_delta(rng) for _ in range(3000)])
        assert set(draws) == {1, 2, 3}
        for d in (1, 2, 3):
            assert abs(np.mean(draws == d) - 1 / 3) < 0.05

    def test_jitter_sigma(self):
        assert jitter_sigma((4.0, 5.0)) == 1.0
        assert jitter_sigma((40.0, 10.0)) == 2.0

    def test_jitter_statistics(self):
        rng = np.random.default_rng(1)
        prev = build_targets(generate(SceneConfig(seed=0, length=2))[1], 32, 32)[0]
        offs = []
        for _ in range(2000):
            j = jittered_centers(prev, prev, rng)
            offs += [np.subtract(j[k], prev[k].center) for k in sorted(prev)]
        offs = np.array(offs)
        assert np.all(np.abs(offs.mean(0)) < 0.06)
        assert np.all(np.abs(offs.std(0) - 1.0) < 0.06)

    def test_targets_use_grid_units(self):
        frames, gt = generate(SceneConfig(seed=3, length=3))
        seq = make_train_sequence(frames, gt)
        for rows, objs in zip(gt, seq.targets):
            for o in rows:
                t = objs[o.obj_id]
                assert t.center == (o.center[0] / 4, o.center[1] / 4)
                assert t.size == (o.box[3] / 4, o.box[2] / 4)

    def test_controller_receives_gradient(self):
        frames, gt = generate(SceneConfig(seed=2, width=64, height=64, size_range=(12.0, 16.0),
                                          speed_range=(1.0, 3.0), length=3))
        seq = make_train_sequence(frames, gt)
        model = SearchTrackNet(seed=0)
        loss = pair_loss(model, frames[0], frames[2], seq.targets[0], seq.targets[2],
                         {k: v.center for k, v in seq.targets[2].items()})
        nk.backward(loss)
        g = sum(float((p.grad ** 2).sum()) for p in model.group("controller"))
        assert g > 0

    def test_object_leaving_gets_empty_target(self):
        frames, gt = generate(SceneConfig(seed=2, width=64, height=64, size_range=(12.0, 16.0),
                                          speed_range=(1.0, 3.0), length=2))
        seq = make_train_sequence(frames, gt)
        model = SearchTrackNet(seed=0)
        prev = seq.targets[0]
        cur = dict(list(seq.targets[1].items())[1:])
        loss = pair_loss(model, frames[0], frames[1], prev, cur, {k: v.center for k, v in prev.items()})
        assert np.isfinite(loss.item())

    def test_overfit_static_pair(self):
        cfg = SceneConfig(seed=0, width=32, height=32, num_objects=(1, 1), size_range=(12.0, 12.0),
                          speed_range=(0.0, 0.0), noise_sigma=0.0, length=2, preset="static")
        frames, gt = generate(cfg)
        seq = make_train_sequence(frames, gt)
        model = SearchTrackNet(seed=0)
        rng = np.random.default_rng(0)
        losses = [
            train_pair(model, frames[0], frames[1], seq.targets[0], seq.targets[1], rng, lr=0.01)
            for _ in range(600)
        ]
        assert losses[-1] < 0.05

    def test_train_deterministic(self):
        frames, gt = generate(SceneConfig(seed=1, width=32, height=32, size_range=(10.0, 12.0),
                                          speed_range=(0.5, 1.0), length=4))
        seqs = [make_train_sequence(frames, gt)]
        cfg = TrainConfig(epochs=1, pairs_per_epoch=3, seed=5)
        a, b = SearchTrackNet(seed=0), SearchTrackNet(seed=0)
        ha, hb = train(a, seqs, cfg), train(b, seqs, cfg)
        assert ha == hb
        for k in a.params:
            assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
