"""Online tracking loop and two-frame training."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numkernel as nk
from .assignment import hungarian
from .losses import gaussian_radius, render_gaussian, total_loss
from .metrics import iou_matrix
from .motion import KalmanState, build_motion_map, kf_init, kf_predict, kf_update, make_motion_aware
from .nets import (
    DEFAULT_DET_THRESHOLD,
    DEFAULT_MAX_K,
    STRIDE,
    Detection,
    Frame,
    SearchTrackNet,
    extract_detections,
    nearest_cell,
    sample_weights,
)
from .numkernel import Tensor
from .scenegen import GroundTruth
from .searcher import find_peak, search

log = logging.getLogger(__name__)


@dataclass
class TrackerConfig:
    det_threshold: float = DEFAULT_DET_THRESHOLD
    # detections between track_threshold and det_threshold may extend a live track but never start one
    track_threshold: float = 0.2
    assoc_threshold: float = 0.3
    gate_radius_factor: float = 2.0
    max_misses: int = 5
    max_k: int = DEFAULT_MAX_K
    use_motion: bool = True
    # an unmatched detection overlapping a live track's box this much is a duplicate peak, not a birth
    birth_iou: float = 0.3
    # second pass: a track left unmatched whose search peak lies this close (cells) to a
    # left-over detection takes it; 0 disables the pass
    peak_match_radius: float = 1.5

    def __post_init__(self):
        if not 0.0 < self.det_threshold < 1.0:
            raise ValueError(f"det_threshold must lie in (0, 1), got {self.det_threshold}")
        if not 0.0 < self.track_threshold <= self.det_threshold:
            raise ValueError(f"track_threshold must lie in (0, det_threshold], got {self.track_threshold}")
        if not 0.0 <= self.assoc_threshold <= 1.0:
            raise ValueError(f"assoc_threshold must lie in [0, 1], got {self.assoc_threshold}")
        if self.gate_radius_factor <= 0:
            raise ValueError("gate_radius_factor must be positive")
        if not 0.0 < self.birth_iou <= 1.0:
            raise ValueError(f"birth_iou must lie in (0, 1], got {self.birth_iou}")
        if self.peak_match_radius < 0:
            raise ValueError("peak_match_radius must be non-negative")
        if self.max_misses < 1 or self.max_k < 1:
            raise ValueError("max_misses and max_k must be >= 1")


@dataclass
class Track:
    track_id: int
    kalman: KalmanState
    theta: np.ndarray
    last_center: Tuple[float, float]
    size: Tuple[float, float]  # (h, w) grid cells
    cls: int = 0
    misses: int = 0
    age: int = 1


@dataclass
class ResultEntry:
    track_id: int
    box: Tuple[float, float, float, float]  # left, top, width, height in pixels
    score: float


@dataclass
class FrameResult:
    frame_index: int
    entries: List[ResultEntry] = field(default_factory=list)


@dataclass
class SearchPeak:
    track: Track
    location: Tuple[int, int]
    confidence: float
    response: np.ndarray


def grid_box_to_pixels(center: Tuple[float, float], size: Tuple[float, float]) -> Tuple[float, float, float, float]:
    cx, cy = center[0] * STRIDE, center[1] * STRIDE
    h, w = max(size[0], 0.0) * STRIDE, max(size[1], 0.0) * STRIDE
    return (cx - w / 2.0, cy - h / 2.0, w, h)


def gate_radius(track: Track, factor: float) -> float:
    return factor * max(math.hypot(*track.size), 4.0)


def associate(
    peaks: Sequence[SearchPeak], detections: Sequence[Detection], config: TrackerConfig
) -> Tuple[List[Tuple[Track, Detection]], List[Track], List[Detection]]:
    """Match searched tracks to detections on cost 1 - R_i(p_j) within each track's gate."""
    n, m = len(peaks), len(detections)
    cost = np.full((n, m), np.inf)
    for i, pk in enumerate(peaks):
        radius = gate_radius(pk.track, config.gate_radius_factor)
        h, w = pk.response.shape
        for j, d in enumerate(detections):
            if d.cls != pk.track.cls:
                continue
            if math.hypot(pk.location[0] - d.center[0], pk.location[1] - d.center[1]) > radius:
                continue
            x, y = nearest_cell(d.center)
            if 0 <= x < w and 0 <= y < h:
                cost[i, j] = 1.0 - pk.response[y, x]
    matches = []
    used_t, used_d = set(), set()
    for i, j in hungarian(cost):
        if 1.0 - cost[i, j] < config.assoc_threshold:
            continue
        matches.append((peaks[i].track, detections[j]))
        used_t.add(i)
        used_d.add(j)
    return (
        matches,
        [pk.track for i, pk in enumerate(peaks) if i not in used_t],
        [d for j, d in enumerate(detections) if j not in used_d],
    )


def match_by_peak(
    peaks: Sequence[SearchPeak], detections: Sequence[Detection], radius: float
) -> Tuple[List[Tuple[Track, Detection]], List[Track], List[Detection]]:
    """Match tracks to detections by distance from the search peak, within ``radius`` cells.

    Used on what ``associate`` leaves over: a searcher whose response is weak everywhere
    often still peaks on the right object.
    """
    cost = np.full((len(peaks), len(detections)), np.inf)
    for i, pk in enumerate(peaks):
        for j, d in enumerate(detections):
            dist = math.hypot(pk.location[0] - d.center[0], pk.location[1] - d.center[1])
            if d.cls == pk.track.cls and dist <= radius:
                cost[i, j] = dist
    pairs = hungarian(cost) if radius > 0 else []
    used_t = {i for i, _ in pairs}
    used_d = {j for _, j in pairs}
    return (
        [(peaks[i].track, detections[j]) for i, j in pairs],
        [pk.track for i, pk in enumerate(peaks) if i not in used_t],
        [d for j, d in enumerate(detections) if j not in used_d],
    )


class Tracker:
    """Stateful per-sequence tracker; ``step`` must be called with increasing frame indices."""

    def __init__(self, model: SearchTrackNet, config: Optional[TrackerConfig] = None, on_response=None):
        self.model = model
        self.config = config or TrackerConfig()
        self.tracks: List[Track] = []
        self.next_id = 1
        self.last_index: Optional[int] = None
        # optional hook(frame_index, track_id, response) used to dump response maps
        self.on_response = on_response

    def step(self, frame: Frame) -> FrameResult:
        cfg = self.config
        if self.last_index is not None and frame.frame_index <= self.last_index:
            raise ValueError(f"frame index {frame.frame_index} does not follow {self.last_index}")
        self.last_index = frame.frame_index

        with nk.no_grad():
            out = self.model.forward(frame)
            dets = extract_detections(out, cfg.track_threshold, cfg.max_k)
            feature = out.search_feature
            _, h, w = feature.shape
            peaks = []
            for tr in self.tracks:
                tr.kalman, m = kf_predict(tr.kalman)
                motion = build_motion_map(m, h, w)
                if not cfg.use_motion:
                    motion = Tensor(np.zeros_like(motion.data))
                r = search(make_motion_aware(feature, motion), tr.theta).data
                loc, conf = find_peak(r)
                peaks.append(SearchPeak(tr, loc, conf, r))
                if self.on_response is not None:
                    self.on_response(frame.frame_index, tr.track_id, r)

        matches, lost, fresh = associate(peaks, dets, cfg)
        unmatched = {id(tr) for tr in lost}
        rescued, lost, fresh = match_by_peak([pk for pk in peaks if id(pk.track) in unmatched], fresh,
                                             cfg.peak_match_radius)
        matches += rescued
        lost_ids = {id(tr) for tr in lost}
        result = FrameResult(frame.frame_index)
        for tr, d in matches:
            tr.kalman = kf_update(tr.kalman, d.center)
            tr.theta = d.theta
            tr.last_center = d.center
            tr.size = d.size
            tr.misses = 0
            tr.age += 1
            result.entries.append(ResultEntry(tr.track_id, grid_box_to_pixels(d.center, d.size), d.score))
        for tr in lost:
            tr.misses += 1
            tr.age += 1
        self.tracks = [tr for tr in self.tracks if tr.misses < cfg.max_misses]
        # boxes already claimed this frame: matched tracks, and surviving unmatched tracks at their peak
        claimed = [e.box for e in result.entries]
        claimed += [grid_box_to_pixels(pk.location, pk.track.size) for pk in peaks
                    if id(pk.track) in lost_ids and pk.track.misses < cfg.max_misses]
        for d in fresh:
            if d.score < cfg.det_threshold:
                continue
            box = grid_box_to_pixels(d.center, d.size)
            if claimed and iou_matrix([box], claimed).max() >= cfg.birth_iou:
                continue
            claimed.append(box)
            tr = Track(self.next_id, kf_init(d.center), d.theta, d.center, d.size, d.cls)
            self.next_id += 1
            self.tracks.append(tr)
            result.entries.append(ResultEntry(tr.track_id, box, d.score))
        result.entries.sort(key=lambda e: e.track_id)
        return result


def step(tracker: Tracker, frame: Frame) -> Tuple[List[Track], FrameResult]:
    result = tracker.step(frame)
    return tracker.tracks, result


def track_sequence(model: SearchTrackNet, frames: Sequence[Frame], config: Optional[TrackerConfig] = None,
                   on_response=None) -> List[FrameResult]:
    tracker = Tracker(model, config, on_response)
    return [tracker.step(fr) for fr in frames]


# ---------------------------------------------------------------------------
# training


@dataclass
class ObjectTarget:
    cell: Tuple[int, int]  # (x, y) integer grid cell
    center: Tuple[float, float]  # continuous grid position
    size: Tuple[float, float]  # (h, w) grid cells
    cls: int = 0


@dataclass
class TrainSequence:
    frames: List[Frame]
    targets: List[Dict[int, ObjectTarget]]


def build_targets(gt: GroundTruth, grid_w: int, grid_h: int) -> List[Dict[int, ObjectTarget]]:
    out = []
    for rows in gt:
        objs = {}
        for o in rows:
            if not o.visible:
                continue
            cx, cy = o.center
            gx, gy = cx / STRIDE, cy / STRIDE
            x, y = nearest_cell((gx, gy))
            x, y = min(max(x, 0), grid_w - 1), min(max(y, 0), grid_h - 1)
            objs[o.obj_id] = ObjectTarget((x, y), (gx, gy), (o.box[3] / STRIDE, o.box[2] / STRIDE))
        out.append(objs)
    return out


def make_train_sequence(frames: Sequence[Frame], gt: GroundTruth) -> TrainSequence:
    if len(frames) != len(gt):
        raise ValueError(f"{len(frames)} frames but ground truth for {len(gt)}")
    h, w = frames[0].height // STRIDE, frames[0].width // STRIDE
    return TrainSequence(list(frames), build_targets(gt, w, h))


def sample_delta(rng: np.random.Generator) -> int:
    return int(rng.integers(1, 4))


def jitter_sigma(size: Tuple[float, float]) -> float:
    return max(1.0, 0.05 * max(size))


def object_radius(size: Tuple[float, float]) -> float:
    return gaussian_radius(size)


def pair_loss(
    model: SearchTrackNet,
    frame_prev: Frame,
    frame_cur: Frame,
    prev_objs: Dict[int, ObjectTarget],
    cur_objs: Dict[int, ObjectTarget],
    motion_centers: Dict[int, Tuple[float, float]],
    use_motion: bool = True,
) -> Tensor:
    """L_total for one (t - delta, t) pair with explicit per-object motion centers."""
    f_prev = model.backbone_forward(frame_prev)
    theta_map = model.heads_forward(f_prev, ("controller",)).weight_map
    out = model.heads_forward(model.backbone_forward(frame_cur), ("heatmap", "size", "search"))
    c, h, w = out.heatmap.shape

    heat_target = np.zeros((c, h, w))
    for o in cur_objs.values():
        render_gaussian(heat_target[o.cls], o.cell, object_radius(o.size))

    pairs = []
    for oid in sorted(prev_objs):
        theta = sample_weights(theta_map, prev_objs[oid].cell)
        target = np.zeros((h, w))
        if oid in cur_objs:
            render_gaussian(target, cur_objs[oid].cell, object_radius(cur_objs[oid].size))
        motion = build_motion_map(motion_centers[oid], h, w)
        if not use_motion:
            motion = Tensor(np.zeros_like(motion.data))
        pairs.append((search(make_motion_aware(out.search_feature, motion), theta), target))

    size_objs = [(o.cell, o.size) for _, o in sorted(cur_objs.items())]
    return total_loss(out.heatmap, heat_target, len(cur_objs), pairs, out.size_map, size_objs)


def jittered_centers(prev_objs, cur_objs, rng: np.random.Generator) -> Dict[int, Tuple[float, float]]:
    """Training-time stand-in for the Kalman prediction: true center at t plus Gaussian noise."""
    out = {}
    for oid in sorted(prev_objs):
        o = cur_objs.get(oid, prev_objs[oid])
        s = jitter_sigma(o.size)
        dx, dy = rng.normal(0.0, s, 2)
        out[oid] = (o.center[0] + dx, o.center[1] + dy)
    return out


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    use_motion: bool = True
    max_grad_norm: float = 2.0
    pairs_per_epoch: Optional[int] = None  # default: frames - 1 per sequence


def train_pair(
    model: SearchTrackNet,
    frame_prev: Frame,
    frame_cur: Frame,
    prev_objs: Dict[int, ObjectTarget],
    cur_objs: Dict[int, ObjectTarget],
    rng: np.random.Generator,
    lr: float = 0.01,
    momentum: float = 0.9,
    use_motion: bool = True,
    max_grad_norm: Optional[float] = 2.0,
) -> float:
    """One SGD step on a frame pair; returns the loss before the update."""
    loss = pair_loss(model, frame_prev, frame_cur, prev_objs, cur_objs,
                     jittered_centers(prev_objs, cur_objs, rng), use_motion)
    nk.backward(loss)
    params = model.parameters()
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    if max_grad_norm:
        nk.clip_grad_norm(params, max_grad_norm)
    nk.sgd_step(params, lr, momentum)
    return loss.item()


def train(
    model: SearchTrackNet,
    sequences: Sequence[TrainSequence],
    config: TrainConfig,
    progress: Optional[Callable[[int, float], None]] = None,
) -> List[float]:
    """SGD over random (t - delta, t) pairs; returns the mean loss of each epoch."""
    rng = np.random.default_rng(config.seed)
    usable = [s for s in sequences if len(s.frames) >= 2]
    if not usable:
        raise ValueError("training needs at least one sequence with two or more frames")
    per_epoch = config.pairs_per_epoch or sum(len(s.frames) - 1 for s in usable)
    history = []
    for epoch in range(config.epochs):
        # cosine decay to 5% of the base rate across the run
        losses = []
        t0 = time.time()
        for k in range(per_epoch):
            frac = (epoch * per_epoch + k) / (config.epochs * per_epoch)
            lr = config.lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * frac)))
            seq = usable[int(rng.integers(len(usable)))]
            delta = min(sample_delta(rng), len(seq.frames) - 1)
            t = int(rng.integers(delta, len(seq.frames)))
            losses.append(
                train_pair(model, seq.frames[t - delta], seq.frames[t], seq.targets[t - delta], seq.targets[t],
                           rng, lr, config.momentum, config.use_motion, config.max_grad_norm)
            )
        mean = float(np.mean(losses))
        history.append(mean)
        log.info("epoch %d/%d loss %.4f (%.1fs)", epoch + 1, config.epochs, mean, time.time() - t0)
        if progress is not None:
            progress(epoch, mean)
    return history
