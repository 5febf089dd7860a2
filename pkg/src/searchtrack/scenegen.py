"""Deterministic synthetic tracking sequences and MOTChallenge / PPM I/O."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .nets import Frame

PRESETS = ("random", "static", "crossing")
SHAPES = ("rectangle", "disc")
BACKGROUND = 0.2

# saturated, mutually distant colors; objects draw without replacement
OBJECT_COLORS = [
    (0.95, 0.15, 0.15),
    (0.15, 0.85, 0.2),
    (0.2, 0.35, 0.95),
    (0.95, 0.85, 0.1),
    (0.9, 0.2, 0.9),
    (0.1, 0.9, 0.9),
    (1.0, 0.55, 0.1),
    (0.95, 0.95, 0.95),
]


@dataclass
class SceneConfig:
    width: int = 128
    height: int = 128
    num_objects: Tuple[int, int] = (2, 4)
    shapes: Tuple[str, ...] = SHAPES
    size_range: Tuple[float, float] = (16.0, 28.0)
    speed_range: Tuple[float, float] = (1.0, 4.0)
    # None: distinct color per object; otherwise every object gets this color
    color: Optional[Tuple[float, float, float]] = None
    spawn_range: Tuple[int, int] = (0, 0)
    despawn_range: Optional[Tuple[int, int]] = None  # None: alive until the end
    noise_sigma: float = 0.03
    bounce: bool = True
    length: int = 40
    seed: int = 0
    preset: str = "random"

    def validate(self) -> None:
        if self.width % 4 or self.height % 4 or self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size {self.width}x{self.height} must be positive multiples of 4")
        lo, hi = self.size_range
        if lo < 8 or hi < lo:
            raise ValueError(f"size_range {self.size_range} must satisfy 8 <= min <= max")
        if hi >= min(self.width, self.height):
            raise ValueError(f"objects up to {hi}px do not fit in a {self.width}x{self.height} frame")
        vlo, vhi = self.speed_range
        if vlo < 0 or vhi < vlo:
            raise ValueError(f"speed_range {self.speed_range} must satisfy 0 <= min <= max")
        if vhi > min(self.width, self.height) / 10.0:
            raise ValueError(f"max speed {vhi} px/frame crosses the frame in fewer than 10 frames")
        nlo, nhi = self.num_objects
        if nlo < 0 or nhi < nlo:
            raise ValueError(f"num_objects {self.num_objects} is not a valid range")
        if self.color is None and nhi > len(OBJECT_COLORS):
            raise ValueError(f"at most {len(OBJECT_COLORS)} distinctly colored objects are supported")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        if self.preset == "crossing" and nhi < 2:
            raise ValueError("the crossing preset needs at least two objects")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ValueError(f"shapes must be a non-empty subset of {SHAPES}")
        if self.length < 1:
            raise ValueError("sequence length must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown scene config fields: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            kw[k] = tuple(v) if isinstance(v, list) else v
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "SceneConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def static_preset(seed: int = 0, **kw) -> SceneConfig:
    return SceneConfig(num_objects=(1, 1), speed_range=(0.0, 0.0), preset="static", seed=seed, **kw)


def crossing_preset(seed: int = 0, uniform_color: bool = False, **kw) -> SceneConfig:
    kw.setdefault("num_objects", (2, 2))
    kw.setdefault("speed_range", (2.0, 3.5))
    if uniform_color:
        kw["color"] = (0.9, 0.9, 0.2)
    return SceneConfig(preset="crossing", seed=seed, **kw)


@dataclass
class GTObject:
    obj_id: int
    box: Tuple[float, float, float, float]  # left, top, width, height in pixels
    visible: bool = True

    @property
    def center(self) -> Tuple[float, float]:
        l, t, w, h = self.box
        return l + w / 2.0, t + h / 2.0


GroundTruth = List[List[GTObject]]  # indexed by 0-based frame


@dataclass
class _Obj:
    obj_id: int
    shape: str
    w: float
    h: float
    color: np.ndarray
    origin: np.ndarray  # center at frame `anchor`
    velocity: np.ndarray
    anchor: int
    spawn: int
    despawn: int
    heading: float = 0.0


def _fold(v: float, lo: float, hi: float) -> float:
    """Reflect ``v`` into [lo, hi] as a triangle wave (elastic wall bounce)."""
    span = hi - lo
    if span <= 0:
        return lo
    u = (v - lo) % (2 * span)
    return lo + (u if u <= span else 2 * span - u)


def _center_at(o: _Obj, t: int, cfg: SceneConfig) -> Tuple[float, float]:
    x, y = o.origin + o.velocity * (t - o.anchor)
    if cfg.bounce:
        x = _fold(x, o.w / 2, cfg.width - o.w / 2)
        y = _fold(y, o.h / 2, cfg.height - o.h / 2)
    return float(x), float(y)


def _sample_objects(cfg: SceneConfig, rng: np.random.Generator) -> List[_Obj]:
    n = int(rng.integers(cfg.num_objects[0], cfg.num_objects[1] + 1))
    if cfg.color is None:
        palette = rng.permutation(len(OBJECT_COLORS))
    despawn_range = cfg.despawn_range or (cfg.length, cfg.length)
    t_cross = cfg.length // 2
    cross_pt = np.array([cfg.width / 2.0, cfg.height / 2.0]) + rng.uniform(-8, 8, 2)
    objs = []
    for i in range(n):
        shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        w = float(rng.uniform(*cfg.size_range))
        h = w if shape == "disc" else float(rng.uniform(*cfg.size_range))
        color = np.array(cfg.color if cfg.color is not None else OBJECT_COLORS[palette[i]], dtype=np.float64)
        speed = float(rng.uniform(*cfg.speed_range))
        heading = float(rng.uniform(0, 2 * math.pi))
        spawn = int(rng.integers(cfg.spawn_range[0], cfg.spawn_range[1] + 1))
        despawn = int(rng.integers(despawn_range[0], despawn_range[1] + 1))
        origin = np.array([rng.uniform(w / 2, cfg.width - w / 2), rng.uniform(h / 2, cfg.height - h / 2)])
        anchor = spawn
        if cfg.preset == "crossing" and i < 2:
            if i == 1:
                # second object crosses the first at 60-120 degrees
                heading = objs[0].heading + rng.choice([-1.0, 1.0]) * rng.uniform(math.pi / 3, 2 * math.pi / 3)
            origin, anchor, spawn, despawn = cross_pt.copy(), t_cross, 0, cfg.length
        o = _Obj(i + 1, shape, w, h, color, origin, speed * np.array([math.cos(heading), math.sin(heading)]),
                 anchor, spawn, max(despawn, spawn + 1), heading)
        objs.append(o)
    return objs


def _render(cfg: SceneConfig, objs, t: int, rng: np.random.Generator) -> np.ndarray:
    img = np.full((3, cfg.height, cfg.width), BACKGROUND, dtype=np.float64)
    ys = np.arange(cfg.height, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(cfg.width, dtype=np.float64)[None, :] + 0.5
    for o in objs:
        if not (o.spawn <= t < o.despawn):
            continue
        cx, cy = _center_at(o, t, cfg)
        if o.shape == "disc":
            mask = ((xs - cx) / (o.w / 2)) ** 2 + ((ys - cy) / (o.h / 2)) ** 2 <= 1.0
        else:
            mask = (np.abs(xs - cx) <= o.w / 2) & (np.abs(ys - cy) <= o.h / 2)
        img[:, mask] = o.color[:, None]
    if cfg.noise_sigma > 0:
        img += rng.normal(0.0, cfg.noise_sigma, img.shape)
    # quantize to 8 bits so frames survive a PPM round trip bit-exactly
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate(cfg: SceneConfig) -> Tuple[List[Frame], GroundTruth]:
    """Frames and per-frame ground truth; a pure function of ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    objs = _sample_objects(cfg, rng)
    noise_rng = np.random.default_rng([cfg.seed, 1])
    frames, gt = [], []
    for t in range(cfg.length):
        frames.append(Frame(_render(cfg, objs, t, noise_rng), frame_index=t))
        rows = []
        for o in objs:
            if not (o.spawn <= t < o.despawn):
                continue
            cx, cy = _center_at(o, t, cfg)
            l, tp = max(0.0, cx - o.w / 2), max(0.0, cy - o.h / 2)
            r, b = min(float(cfg.width), cx + o.w / 2), min(float(cfg.height), cy + o.h / 2)
            if r <= l or b <= tp:
                continue
            visible = 0.0 <= cx < cfg.width and 0.0 <= cy < cfg.height
            rows.append(GTObject(o.obj_id, (l, tp, r - l, b - tp), visible))
        gt.append(rows)
    return frames, gt


# ---------------------------------------------------------------------------
# MOTChallenge CSV


@dataclass
class MotRecord:
    frame: int  # 1-based
    obj_id: int
    left: float
    top: float
    width: float
    height: float
    conf: float = 1.0


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def format_mot_line(r: MotRecord) -> str:
    return ",".join([str(int(r.frame)), str(int(r.obj_id))] + [_fmt(v) for v in (r.left, r.top, r.width, r.height, r.conf)] + ["-1", "-1", "-1"])


def write_mot(path, records: Iterable[MotRecord]) -> None:
    records = sorted(records, key=lambda r: (r.frame, r.obj_id))
    with open(path, "w", newline="\n") as fh:
        for r in records:
            fh.write(format_mot_line(r) + "\n")


def read_mot(path) -> List[MotRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 10:
                raise ValueError(f"{path}:{lineno}: expected 10 fields, got {len(parts)}")
            try:
                frame, obj_id = int(parts[0]), int(parts[1])
                left, top, w, h, conf = (float(p) for p in parts[2:7])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed field ({exc})") from None
            if frame < 1 or obj_id < 1:
                raise ValueError(f"{path}:{lineno}: frame and id must be 1-based positive integers")
            out.append(MotRecord(frame, obj_id, left, top, w, h, conf))
    return out


def gt_to_records(gt: GroundTruth) -> List[MotRecord]:
    return [
        MotRecord(t + 1, o.obj_id, *o.box, conf=1.0 if o.visible else 0.0)
        for t, rows in enumerate(gt)
        for o in rows
    ]


def records_to_gt(records: Sequence[MotRecord], num_frames: Optional[int] = None) -> GroundTruth:
    n = num_frames if num_frames is not None else max((r.frame for r in records), default=0)
    gt: GroundTruth = [[] for _ in range(n)]
    for r in records:
        if r.frame > n:
            raise ValueError(f"record for frame {r.frame} beyond sequence length {n}")
        gt[r.frame - 1].append(GTObject(r.obj_id, (r.left, r.top, r.width, r.height), r.conf > 0))
    return gt


# ---------------------------------------------------------------------------
# PPM images and overlays


def frame_to_image(frame: Frame) -> np.ndarray:
    return np.round(np.clip(frame.pixels, 0, 1) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only binary 8-bit PPM (P6, maxval 255) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(buf[pos : pos + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).copy()


def image_to_frame(img: np.ndarray, frame_index: int = 0) -> Frame:
    return Frame(img.transpose(2, 0, 1).astype(np.float64) / 255.0, frame_index)


ID_PALETTE = np.array(
    [
        (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
        (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
        (210, 245, 60), (250, 190, 212), (0, 128, 128), (170, 110, 40),
    ],
    dtype=np.uint8,
)
GT_COLOR = np.array((255, 255, 255), dtype=np.uint8)


def id_color(track_id: int) -> np.ndarray:
    h = (int(track_id) * 2654435761) & 0xFFFFFFFF
    return ID_PALETTE[h % len(ID_PALETTE)]


def draw_box(img: np.ndarray, box, color) -> None:
    """1-px outline of a (left, top, width, height) pixel box, clipped to the image."""
    h, w, _ = img.shape
    l, t, bw, bh = box
    x0, y0 = int(math.floor(l + 0.5)), int(math.floor(t + 0.5))
    x1, y1 = int(math.floor(l + bw + 0.5)) - 1, int(math.floor(t + bh + 0.5)) - 1
    if x1 < x0 or y1 < y0:
        return
    cx0, cx1 = max(x0, 0), min(x1, w - 1)
    cy0, cy1 = max(y0, 0), min(y1, h - 1)
    if cx0 > cx1 or cy0 > cy1:
        return
    for y in (y0, y1):
        if 0 <= y < h:
            img[y, cx0 : cx1 + 1] = color
    for x in (x0, x1):
        if 0 <= x < w:
            img[cy0 : cy1 + 1, x] = color


def render_overlay(frame: Frame, results, gt: Optional[Sequence[GTObject]] = None) -> np.ndarray:
    """H x W x 3 uint8 image with id-colored result boxes (and white gt boxes)."""
    img = frame_to_image(frame)
    for o in gt or ():
        draw_box(img, o.box, GT_COLOR)
    for entry in getattr(results, "entries", results) or ():
        draw_box(img, entry.box, id_color(entry.track_id))
    return img


# ---------------------------------------------------------------------------
# sequence directories: <dir>/img/000001.ppm ..., <dir>/gt.csv


def save_sequence(out_dir, frames: Sequence[Frame], gt: GroundTruth, cfg: Optional[SceneConfig] = None) -> None:
    out = Path(out_dir)
    (out / "img").mkdir(parents=True, exist_ok=True)
    for t, fr in enumerate(frames):
        write_ppm(out / "img" / f"{t + 1:06d}.ppm", frame_to_image(fr))
    write_mot(out / "gt.csv", gt_to_records(gt))
    if cfg is not None:
        (out / "config.json").write_text(cfg.to_json())


def load_sequence(seq_dir) -> Tuple[List[Frame], GroundTruth]:
    seq = Path(seq_dir)
    names = sorted(p for p in (seq / "img").glob("*.ppm"))
    if not names:
        raise FileNotFoundError(f"{seq}: no frames under img/")
    frames = [image_to_frame(read_ppm(p), i) for i, p in enumerate(names)]
    gt = records_to_gt(read_mot(seq / "gt.csv"), len(frames)) if (seq / "gt.csv").exists() else [[] for _ in frames]
    return frames, gt


def find_sequences(data_dir) -> List[Path]:
    """``data_dir`` itself if it is a sequence, else its sequence subdirectories."""
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: no such directory")
    if (root / "img").is_dir():
        return [root]
    seqs = sorted(p for p in root.iterdir() if (p / "img").is_dir())
    if not seqs:
        raise FileNotFoundError(f"{root}: no sequences found")
    return seqs
