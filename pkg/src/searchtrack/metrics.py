"""CLEAR-MOT, identity and single-threshold HOTA metrics for box tracks.

HOTA, DetA and AssA are computed at one IoU threshold (0.5 by default) and
are reported as ``*_at_0_5``; they are not the 19-threshold leaderboard HOTA.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .assignment import hungarian


@dataclass
class MetricReport:
    mota: float
    idf1: float
    idsw: int
    fp: int
    fn: int
    hota_at_0_5: float
    deta_at_0_5: float
    assa_at_0_5: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


Box = Tuple[float, float, float, float]
# per frame: list of (id, box)
Annotations = Sequence[Sequence[Tuple[int, Box]]]


def iou_matrix(a: Sequence[Box], b: Sequence[Box]) -> np.ndarray:
    if not len(a) or not len(b):
        return np.zeros((len(a), len(b)))
    A = np.asarray(a, dtype=np.float64)
    B = np.asarray(b, dtype=np.float64)
    ax0, ay0 = A[:, 0:1], A[:, 1:2]
    ax1, ay1 = ax0 + A[:, 2:3], ay0 + A[:, 3:4]
    bx0, by0 = B[:, 0], B[:, 1]
    bx1, by1 = bx0 + B[:, 2], by0 + B[:, 3]
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0, None)
    inter = iw * ih
    union = A[:, 2:3] * A[:, 3:4] + B[:, 2] * B[:, 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _clear(gt: Annotations, res: Annotations, alpha: float):
    tp = fp = fn = idsw = 0
    prev: Dict[int, int] = {}
    last: Dict[int, int] = {}
    for g_rows, r_rows in zip(gt, res):
        g_ids = [i for i, _ in g_rows]
        r_ids = [i for i, _ in r_rows]
        iou = iou_matrix([b for _, b in g_rows], [b for _, b in r_rows])
        matches: Dict[int, int] = {}
        # keep last frame's correspondences while they still overlap
        for gi, g in enumerate(g_ids):
            if g in prev and prev[g] in r_ids:
                ri = r_ids.index(prev[g])
                if iou[gi, ri] >= alpha and ri not in matches.values():
                    matches[gi] = ri
        free_g = [gi for gi in range(len(g_ids)) if gi not in matches]
        free_r = [ri for ri in range(len(r_ids)) if ri not in matches.values()]
        if free_g and free_r:
            sub = iou[np.ix_(free_g, free_r)]
            cost = np.where(sub >= alpha, 1.0 - sub, np.inf)
            for a, b in hungarian(cost):
                matches[free_g[a]] = free_r[b]
        for gi, ri in matches.items():
            g, r = g_ids[gi], r_ids[ri]
            if g in last and last[g] != r:
                idsw += 1
            last[g] = r
        prev = {g_ids[gi]: r_ids[ri] for gi, ri in matches.items()}
        tp += len(matches)
        fn += len(g_ids) - len(matches)
        fp += len(r_ids) - len(matches)
    return tp, fp, fn, idsw


def _id_index(frames: Annotations) -> Dict[int, int]:
    ids = sorted({i for rows in frames for i, _ in rows})
    return {v: k for k, v in enumerate(ids)}


def _idf1(gt: Annotations, res: Annotations, alpha: float) -> float:
    gi, ri = _id_index(gt), _id_index(res)
    n_gt = sum(len(r) for r in gt)
    n_res = sum(len(r) for r in res)
    if n_gt + n_res == 0:
        return 1.0
    if not gi or not ri:
        return 0.0
    overlap = np.zeros((len(gi), len(ri)))
    for g_rows, r_rows in zip(gt, res):
        iou = iou_matrix([b for _, b in g_rows], [b for _, b in r_rows])
        for a, (g, _) in enumerate(g_rows):
            for b, (r, _) in enumerate(r_rows):
                if iou[a, b] >= alpha:
                    overlap[gi[g], ri[r]] += 1
    idtp = sum(overlap[a, b] for a, b in hungarian(-overlap))
    return float(2.0 * idtp / (n_gt + n_res))


def _hota(gt: Annotations, res: Annotations, alpha: float):
    gi, ri = _id_index(gt), _id_index(res)
    ng, nr = len(gi), len(ri)
    potential = np.zeros((ng, nr))
    gt_count = np.zeros((ng, 1))
    res_count = np.zeros((1, nr))
    sims = []
    for g_rows, r_rows in zip(gt, res):
        g_idx = np.array([gi[i] for i, _ in g_rows], dtype=int)
        r_idx = np.array([ri[i] for i, _ in r_rows], dtype=int)
        sim = iou_matrix([b for _, b in g_rows], [b for _, b in r_rows])
        sims.append((g_idx, r_idx, sim))
        if len(g_idx) and len(r_idx):
            denom = sim.sum(0)[None, :] + sim.sum(1)[:, None] - sim
            sim_iou = np.where(denom > np.finfo(float).eps, sim / np.where(denom > 0, denom, 1.0), 0.0)
            potential[np.ix_(g_idx, r_idx)] += sim_iou
        gt_count[g_idx, 0] += 1
        res_count[0, r_idx] += 1
    with np.errstate(divide="ignore", invalid="ignore"):
        align = np.nan_to_num(potential / (gt_count + res_count - potential))

    tp = fn = fp = 0
    matches = np.zeros((ng, nr))
    for g_idx, r_idx, sim in sims:
        if len(g_idx) and len(r_idx):
            score = align[np.ix_(g_idx, r_idx)] * sim
            pairs = [(a, b) for a, b in hungarian(-score) if sim[a, b] >= alpha - np.finfo(float).eps]
        else:
            pairs = []
        for a, b in pairs:
            matches[g_idx[a], r_idx[b]] += 1
        tp += len(pairs)
        fn += len(g_idx) - len(pairs)
        fp += len(r_idx) - len(pairs)
    det_a = tp / max(1, tp + fn + fp)
    ass_per_pair = matches / np.maximum(1, gt_count + res_count - matches)
    ass_a = float(np.sum(matches * ass_per_pair) / max(1, tp))
    return float(det_a), ass_a


def evaluate(gt: Annotations, results: Annotations, iou_threshold: float = 0.5) -> MetricReport:
    """Score per-frame ``(id, (left, top, width, height))`` lists against ground truth."""
    if len(gt) != len(results):
        raise ValueError(f"frame range mismatch: ground truth has {len(gt)} frames, results have {len(results)}")
    for rows in list(gt) + list(results):
        ids = [i for i, _ in rows]
        if len(ids) != len(set(ids)):
            raise ValueError("an id appears twice within one frame")
    tp, fp, fn, idsw = _clear(gt, results, iou_threshold)
    n_gt = tp + fn
    mota = 1.0 - (fn + fp + idsw) / n_gt if n_gt else (1.0 if fp == 0 else -float(fp))
    det_a, ass_a = _hota(gt, results, iou_threshold)
    return MetricReport(
        mota=float(mota),
        idf1=_idf1(gt, results, iou_threshold),
        idsw=int(idsw),
        fp=int(fp),
        fn=int(fn),
        hota_at_0_5=math.sqrt(det_a * ass_a),
        deta_at_0_5=det_a,
        assa_at_0_5=ass_a,
    )
