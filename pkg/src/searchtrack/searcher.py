"""Object-customized dynamic searcher.

A 233-float weight vector instantiates a three-layer 1x1-conv network
(18 -> 8 -> 8 -> 1) that maps a motion-aware feature map to a response map.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor
from .nets import THETA_SIZE

IN_CHANNELS = 18
HIDDEN = 8

# (cout, cin) of each dynamic layer, in packing order
LAYER_SHAPES = [(HIDDEN, IN_CHANNELS), (HIDDEN, HIDDEN), (1, HIDDEN)]


def _offsets():
    offs, pos = [], 0
    for cout, cin in LAYER_SHAPES:
        offs.append((pos, pos + cout * cin, pos + cout * cin + cout))
        pos += cout * cin + cout
    assert pos == THETA_SIZE
    return offs


OFFSETS = _offsets()


def unpack_weights(theta) -> List[Tuple[Tensor, Tensor]]:
    """Split a flat weight vector into (weight, bias) pairs of 1x1 conv layers."""
    if not isinstance(theta, Tensor):
        theta = Tensor(theta)
    if theta.shape != (THETA_SIZE,):
        raise ValueError(f"dynamic weights must have length {THETA_SIZE}, got shape {theta.shape}")
    layers = []
    for (cout, cin), (w0, b0, b1) in zip(LAYER_SHAPES, OFFSETS):
        w = nk.reshape(nk.index(theta, slice(w0, b0)), (cout, cin, 1, 1))
        b = nk.index(theta, slice(b0, b1))
        layers.append((w, b))
    return layers


def search(feature: Tensor, theta) -> Tensor:
    """Response map H x W in [0, 1] for one object."""
    if feature.data.ndim != 3 or feature.shape[0] != IN_CHANNELS:
        raise ValueError(f"searcher input must have {IN_CHANNELS} channels, got shape {feature.shape}")
    x = feature
    layers = unpack_weights(theta)
    for i, (w, b) in enumerate(layers):
        x = nk.conv2d(x, w, b)
        if i < len(layers) - 1:
            x = nk.relu(x)
    r = nk.sigmoid(x)
    return nk.reshape(r, r.shape[1:])


def find_peak(response) -> Tuple[Tuple[int, int], float]:
    """Global argmax as ((x, y), value); ties resolve to the first cell in row-major order."""
    r = response.data if isinstance(response, Tensor) else np.asarray(response)
    if r.size == 0:
        raise ValueError("empty response map")
    flat = int(np.argmax(r))
    y, x = divmod(flat, r.shape[1])
    return (x, y), float(r[y, x])


def batch_search(features: Sequence[Tensor], thetas: Sequence) -> List[Tensor]:
    if len(features) != len(thetas):
        raise ValueError(f"batch_search got {len(features)} features but {len(thetas)} weight vectors")
    return [search(f, t) for f, t in zip(features, thetas)]


def write_pgm(path, response) -> None:
    """Binary PGM (P5, maxval 255) with value round(255 * R)."""
    r = response.data if isinstance(response, Tensor) else np.asarray(response)
    img = np.floor(255.0 * np.clip(r, 0.0, 1.0) + 0.5).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
