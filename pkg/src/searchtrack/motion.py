"""Constant-velocity Kalman filter on grid-cell centers and motion-offset maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor

# state (cx, cy, vx, vy), dt = 1 frame
TRANSITION = np.array(
    [
        [1.0, 0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, 1.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
)
OBSERVATION = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class KalmanNoise:
    process: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0, 0.25, 0.25]))
    measurement: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0]))
    initial: np.ndarray = field(default_factory=lambda: np.diag([10.0, 10.0, 100.0, 100.0]))


DEFAULT_NOISE = KalmanNoise()


@dataclass
class KalmanState:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def center(self) -> Tuple[float, float]:
        return float(self.mean[0]), float(self.mean[1])

    def copy(self) -> "KalmanState":
        return KalmanState(self.mean.copy(), self.cov.copy())


def _check_finite(state: KalmanState) -> None:
    if not (np.all(np.isfinite(state.mean)) and np.all(np.isfinite(state.cov))):
        raise ValueError("Kalman state is not finite")


def kf_init(center: Tuple[float, float], noise: KalmanNoise = DEFAULT_NOISE) -> KalmanState:
    cx, cy = center
    return KalmanState(np.array([cx, cy, 0.0, 0.0], dtype=np.float64), noise.initial.astype(np.float64).copy())


def kf_predict(state: KalmanState, noise: KalmanNoise = DEFAULT_NOISE) -> Tuple[KalmanState, Tuple[float, float]]:
    """Advance one frame; returns the new state and its predicted center."""
    _check_finite(state)
    mean = TRANSITION @ state.mean
    cov = TRANSITION @ state.cov @ TRANSITION.T + noise.process
    cov = 0.5 * (cov + cov.T)
    out = KalmanState(mean, cov)
    return out, out.center


def kf_update(state: KalmanState, measured: Tuple[float, float], noise: KalmanNoise = DEFAULT_NOISE) -> KalmanState:
    """Correct with a measured center (Joseph-form covariance update)."""
    _check_finite(state)
    z = np.asarray(measured, dtype=np.float64)
    if z.shape != (2,) or not np.all(np.isfinite(z)):
        raise ValueError(f"measurement must be a finite (x, y) pair, got {measured!r}")
    H = OBSERVATION
    S = H @ state.cov @ H.T + noise.measurement
    if np.linalg.det(S) <= 0:
        raise np.linalg.LinAlgError("innovation covariance is singular")
    K = np.linalg.solve(S, H @ state.cov).T
    mean = state.mean + K @ (z - H @ state.mean)
    I_KH = np.eye(4) - K @ H
    cov = I_KH @ state.cov @ I_KH.T + K @ noise.measurement @ K.T
    return KalmanState(mean, 0.5 * (cov + cov.T))


def build_motion_map(m: Tuple[float, float], h: int, w: int) -> Tensor:
    """2 x H x W map of offsets p - m (channel 0: x, channel 1: y)."""
    mx, my = float(m[0]), float(m[1])
    if not (np.isfinite(mx) and np.isfinite(my)):
        raise ValueError(f"motion center must be finite, got {m!r}")
    out = np.empty((2, h, w), dtype=np.float64)
    out[0] = np.arange(w, dtype=np.float64)[None, :] - mx
    out[1] = np.arange(h, dtype=np.float64)[:, None] - my
    return Tensor(out)


def make_motion_aware(feature: Tensor, motion_map: Tensor) -> Tensor:
    """Concatenate [motion map; search feature] into the 18-channel searcher input."""
    if motion_map.shape[0] != 2:
        raise ValueError(f"motion map must have 2 channels, got {motion_map.shape[0]}")
    if feature.shape[1:] != motion_map.shape[1:]:
        raise ValueError(f"feature {feature.shape} and motion map {motion_map.shape} differ in H x W")
    return nk.concat_channels(motion_map, feature)
