"""Shared backbone plus detection, size, search and controller heads."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor

STRIDE = 4
SEARCH_CHANNELS = 16
THETA_SIZE = 233
HEAD_WIDTH = 32
HEATMAP_PRIOR_BIAS = -2.19
SEARCH_PRIOR_BIAS = -4.6

BACKBONE_LAYERS = [(3, 16, 1), (16, 32, 2), (32, 32, 1), (32, 64, 2)]
HEAD_NAMES = ("heatmap", "size", "search", "controller")

DEFAULT_DET_THRESHOLD = 0.4
DEFAULT_MAX_K = 32


@dataclass
class Frame:
    pixels: np.ndarray  # 3 x H_I x W_I in [0, 1]
    frame_index: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"frame pixels must be 3 x H x W, got shape {self.pixels.shape}")
        h, w = self.pixels.shape[1:]
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"frame size {w}x{h} is not divisible by {STRIDE}")

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]


@dataclass
class HeadOutputs:
    heatmap: Optional[Tensor] = None  # C x H x W, post-sigmoid
    size_map: Optional[Tensor] = None  # 2 x H x W, (h, w) in grid cells
    search_feature: Optional[Tensor] = None  # 16 x H x W
    weight_map: Optional[Tensor] = None  # 233 x H x W


@dataclass
class Detection:
    center: Tuple[float, float]  # (x, y) in grid cells
    size: Tuple[float, float]  # (h, w) in grid cells
    score: float
    theta: np.ndarray
    cls: int = 0
    track_id: Optional[int] = None


def _out_channels(name: str, num_classes: int) -> int:
    return {"heatmap": num_classes, "size": 2, "search": SEARCH_CHANNELS, "controller": THETA_SIZE}[name]


class SearchTrackNet:
    """Parameter container and forward passes.

    Parameters are stored by name in insertion order; the order is the
    checkpoint order.
    """

    def __init__(self, num_classes: int = 1, seed: int = 0):
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)
        self.params: Dict[str, Tensor] = {}
        for i, (cin, cout, _) in enumerate(BACKBONE_LAYERS):
            self._conv(rng, f"backbone.{i}", cin, cout, 3)
        for name in HEAD_NAMES:
            self._conv(rng, f"{name}.0", 64, HEAD_WIDTH, 3)
            self._conv(rng, f"{name}.1", HEAD_WIDTH, _out_channels(name, num_classes), 1)
        self.params["heatmap.1.bias"].data[:] = HEATMAP_PRIOR_BIAS
        # the searcher's output bias gets the same treatment so early responses start near 0.01
        self.params["controller.1.bias"].data[THETA_SIZE - 1] = SEARCH_PRIOR_BIAS

    def _conv(self, rng, name, cin, cout, k):
        a = 1.0 / math.sqrt(cin * k * k)
        self.params[f"{name}.weight"] = Tensor(rng.uniform(-a, a, (cout, cin, k, k)), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(rng.uniform(-a, a, cout), requires_grad=True)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def group(self, prefix: str) -> List[Tensor]:
        return [t for n, t in self.params.items() if n.startswith(prefix + ".")]

    # -- forward ------------------------------------------------------------

    def backbone_forward(self, frame) -> Tensor:
        pixels = frame.pixels if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[1] % STRIDE or pixels.shape[2] % STRIDE:
            raise ValueError(f"frame of shape {pixels.shape} is not 3 x H x W with H, W divisible by {STRIDE}")
        x = Tensor(pixels)
        p = self.params
        last = len(BACKBONE_LAYERS) - 1
        for i, (_, _, stride) in enumerate(BACKBONE_LAYERS):
            x = nk.conv2d(x, p[f"backbone.{i}.weight"], p[f"backbone.{i}.bias"], stride=stride, pad=1)
            if i < last:
                x = nk.relu(x)
        return x

    def heads_forward(self, f: Tensor, heads: Sequence[str] = HEAD_NAMES) -> HeadOutputs:
        """Run the requested heads on a backbone feature map.

        The first 3x3 layers of all requested heads share one im2col by
        running as a single stacked convolution.
        """
        if f.data.ndim != 3 or f.shape[0] != 64:
            raise ValueError(f"heads expect a 64 x H x W feature map, got {f.shape}")
        heads = [h for h in HEAD_NAMES if h in heads]
        p = self.params
        w0 = nk.concat([p[f"{h}.0.weight"] for h in heads], axis=0)
        b0 = nk.concat([p[f"{h}.0.bias"] for h in heads], axis=0)
        hidden = nk.relu(nk.conv2d(f, w0, b0, stride=1, pad=1))
        out = HeadOutputs()
        for i, h in enumerate(heads):
            hi = nk.slice_channels(hidden, i * HEAD_WIDTH, (i + 1) * HEAD_WIDTH)
            y = nk.conv2d(hi, p[f"{h}.1.weight"], p[f"{h}.1.bias"])
            if h == "heatmap":
                out.heatmap = nk.sigmoid(y)
            elif h == "size":
                out.size_map = y
            elif h == "search":
                out.search_feature = y
            else:
                out.weight_map = y
        return out

    def forward(self, frame, heads: Sequence[str] = HEAD_NAMES) -> HeadOutputs:
        return self.heads_forward(self.backbone_forward(frame), heads)

    # -- persistence ----------------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, t in self.params.items():
            if state[n].shape != t.shape:
                raise ValueError(f"checkpoint tensor {n} has shape {state[n].shape}, expected {t.shape}")
            t.data = np.array(state[n], dtype=np.float64)
            t.grad = None
            t.velocity = None

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path) -> "SearchTrackNet":
        state = load_checkpoint(path)
        if "heatmap.1.bias" not in state:
            raise ValueError("checkpoint has no heatmap head")
        model = cls(num_classes=state["heatmap.1.bias"].shape[0])
        model.load_state_dict(state)
        return model


def backbone_forward(model: SearchTrackNet, frame) -> Tensor:
    return model.backbone_forward(frame)


def heads_forward(model: SearchTrackNet, f: Tensor, heads: Sequence[str] = HEAD_NAMES) -> HeadOutputs:
    return model.heads_forward(f, heads)


# ---------------------------------------------------------------------------
# detection decoding


def _peak_mask(y: np.ndarray) -> np.ndarray:
    """3x3 local maxima of an H x W map; plateaus keep their first cell in row-major order."""
    h, w = y.shape
    yp = np.pad(y, 1, constant_values=-np.inf)
    mask = np.ones((h, w), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = yp[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
            # neighbours earlier in row-major order must be strictly lower
            if (dy, dx) < (0, 0):
                mask &= y > nb
            else:
                mask &= y >= nb
    return mask


def extract_detections(
    out: HeadOutputs, threshold: float = DEFAULT_DET_THRESHOLD, max_k: int = DEFAULT_MAX_K
) -> List[Detection]:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"detection threshold must lie in (0, 1), got {threshold}")
    if max_k < 1:
        raise ValueError(f"max_k must be >= 1, got {max_k}")
    heat = out.heatmap.data
    size = out.size_map.data if out.size_map is not None else None
    theta = out.weight_map.data if out.weight_map is not None else None
    dets: List[Detection] = []
    for c in range(heat.shape[0]):
        y = heat[c]
        ys, xs = np.nonzero(_peak_mask(y) & (y >= threshold))
        scores = y[ys, xs]
        # stable sort keeps row-major order among equal scores
        order = np.argsort(-scores, kind="stable")[:max_k]
        for i in order:
            cy, cx = int(ys[i]), int(xs[i])
            dets.append(
                Detection(
                    center=(float(cx), float(cy)),
                    size=(float(size[0, cy, cx]), float(size[1, cy, cx])) if size is not None else (0.0, 0.0),
                    score=float(scores[i]),
                    theta=theta[:, cy, cx].copy() if theta is not None else np.zeros(THETA_SIZE),
                    cls=c,
                )
            )
    dets.sort(key=lambda d: -d.score)
    return dets


def nearest_cell(p: Tuple[float, float]) -> Tuple[int, int]:
    return int(math.floor(p[0] + 0.5)), int(math.floor(p[1] + 0.5))


def sample_weights(weight_map, p: Tuple[float, float]):
    """Channel fiber of the weight map at the cell nearest to ``p = (x, y)``.

    Accepts a Tensor (result stays on the graph) or a plain array.
    """
    x, y = nearest_cell(p)
    _, h, w = weight_map.shape
    if not (0 <= x < w and 0 <= y < h):
        raise IndexError(f"point {p} rounds to cell ({x}, {y}) outside the {w}x{h} grid")
    if isinstance(weight_map, Tensor):
        return nk.index(weight_map, (slice(None), y, x))
    return np.asarray(weight_map)[:, y, x].copy()


# ---------------------------------------------------------------------------
# checkpoint format: "STCK", u32 version, u32 count, then per tensor
# u32 name_len, name, u32 ndim, u32 dims[ndim], float64 data (little-endian)

_MAGIC = b"STCK"
_VERSION = 1


def save_checkpoint(path, tensors: Dict[str, np.ndarray]) -> None:
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"{path}: truncated checkpoint")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes after {count} tensors")
    return out
