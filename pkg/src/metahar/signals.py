"""Sensor preprocessing: amplitude axis, interval split, FFT stacks, handcrafted stats, PCA."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

CANONICAL_LENGTH = 150
DEFAULT_INTERVALS = 5


class InvalidSignalError(ValueError):
    pass


@dataclass(frozen=True)
class SensorTrack:
    name: str
    axes: np.ndarray          # (d_g, T)
    rate_hz: float = 25.0

    def __post_init__(self):
        axes = np.atleast_2d(np.asarray(self.axes, dtype=np.float64))
        if axes.ndim != 2 or axes.shape[0] < 1 or axes.shape[1] < 1:
            raise InvalidSignalError(f"sensor {self.name!r}: need at least one non-empty axis")
        if not np.all(np.isfinite(axes)):
            raise InvalidSignalError(f"sensor {self.name!r}: non-finite readings")
        axes.setflags(write=False)
        object.__setattr__(self, "axes", axes)

    @property
    def n_axes(self) -> int:
        return self.axes.shape[0]

    @property
    def length(self) -> int:
        return self.axes.shape[1]


@dataclass(frozen=True)
class SensorSample:
    user_id: str
    activity: str
    sensors: Tuple[SensorTrack, ...]

    def __post_init__(self):
        sensors = tuple(self.sensors)
        if not sensors:
            raise InvalidSignalError("a sample needs at least one sensor")
        lengths = {s.length for s in sensors}
        if len(lengths) != 1:
            raise InvalidSignalError(f"sensor tracks have unequal lengths {sorted(lengths)}")
        object.__setattr__(self, "sensors", sensors)

    @property
    def length(self) -> int:
        return self.sensors[0].length

    def __eq__(self, other):
        if not isinstance(other, SensorSample):
            return NotImplemented
        return (self.user_id == other.user_id and self.activity == other.activity
                and len(self.sensors) == len(other.sensors)
                and all(a.name == b.name and a.rate_hz == b.rate_hz and np.array_equal(a.axes, b.axes)
                        for a, b in zip(self.sensors, other.sensors)))

    def __hash__(self):
        return hash((self.user_id, self.activity, tuple(s.name for s in self.sensors)))


def amplitude_augment(track: SensorTrack) -> SensorTrack:
    """Append the per-time-step Euclidean norm of all axes as an extra axis."""
    if track.axes.size == 0:
        raise InvalidSignalError("empty track")
    amp = np.sqrt(np.sum(track.axes ** 2, axis=0))
    return SensorTrack(track.name, np.vstack([track.axes, amp]), track.rate_hz)


def segment(axes: np.ndarray, k: int, length: int = CANONICAL_LENGTH) -> np.ndarray:
    """Split ``(d, T)`` readings into ``(k, d, T_used // k)`` blocks.

    Inputs longer than ``length`` are truncated to the first ``length``
    points; the remaining length must then be divisible by ``k``.
    """
    axes = np.atleast_2d(np.asarray(axes, dtype=np.float64))
    if k < 1:
        raise InvalidSignalError("k must be >= 1")
    used = axes[:, :length] if length else axes
    t = used.shape[1]
    if k > t:
        raise InvalidSignalError(f"k={k} exceeds series length {t}")
    if t % k:
        raise InvalidSignalError(f"series length {t} not divisible by k={k}")
    tau = t // k
    return used.reshape(used.shape[0], k, tau).transpose(1, 0, 2)


def fft_features(block: np.ndarray, rate_hz: float) -> Tuple[np.ndarray, np.ndarray]:
    """One-sided DFT magnitudes and bin frequencies (Hz) along the last axis.

    Unnormalized transform: a constant block of value c gives ``tau*|c|`` at DC.
    """
    block = np.asarray(block, dtype=np.float64)
    tau = block.shape[-1]
    if tau < 2:
        raise InvalidSignalError("FFT block needs at least 2 points")
    mags = np.abs(np.fft.rfft(block, axis=-1))
    freqs = np.fft.rfftfreq(tau, d=1.0 / rate_hz)
    return mags, np.broadcast_to(freqs, mags.shape).copy()


def n_bins(tau: int) -> int:
    return tau // 2 + 1


def preprocess_track(track: SensorTrack, k: int = DEFAULT_INTERVALS,
                     length: int = CANONICAL_LENGTH) -> np.ndarray:
    """Tensor of shape ``(k, 2*(d+1), f)`` with channels [mag0, freq0, mag1, freq1, ...]."""
    aug = amplitude_augment(track)
    blocks = segment(aug.axes, k, length)                # k, d+1, tau
    mags, freqs = fft_features(blocks, track.rate_hz)    # k, d+1, f
    k_, d1, f = mags.shape
    out = np.empty((k_, 2 * d1, f))
    out[:, 0::2] = mags
    out[:, 1::2] = freqs
    return out


def preprocess(sample: SensorSample, k: int = DEFAULT_INTERVALS,
               length: int = CANONICAL_LENGTH) -> List[np.ndarray]:
    """FeatureTensor of a sample: one ``(k, 2(d_g+1), f)`` array per sensor."""
    return [preprocess_track(s, k, length) for s in sample.sensors]


def preprocess_batch(samples: Sequence[SensorSample], k: int = DEFAULT_INTERVALS,
                     length: int = CANONICAL_LENGTH) -> List[np.ndarray]:
    """Stack per-sensor tensors of many samples: list of ``(N, k, C, f)`` arrays."""
    if not samples:
        raise InvalidSignalError("no samples to preprocess")
    per = [preprocess(s, k, length) for s in samples]
    return [np.stack([p[i] for p in per]) for i in range(len(per[0]))]


@dataclass
class Standardizer:
    """Per-(sensor, channel) z-scoring with statistics from a training split."""

    means: List[np.ndarray] = field(default_factory=list)
    stds: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def fit(cls, xs: Sequence[np.ndarray]) -> "Standardizer":
        means, stds = [], []
        for x in xs:
            mu = x.mean(axis=(0, 1, 3), keepdims=True)[0]
            sd = x.std(axis=(0, 1, 3), keepdims=True)[0]
            means.append(mu)
            stds.append(np.where(sd > 1e-12, sd, 1.0))
        return cls(means, stds)

    def __call__(self, xs: Sequence[np.ndarray]) -> List[np.ndarray]:
        return [(x - m) / s for x, m, s in zip(xs, self.means, self.stds)]


def handcrafted(sample: SensorSample) -> np.ndarray:
    """Mean, population std, max, min per axis (amplitude axis included).

    Returned flat in sensor order, each axis contributing 4 values.
    """
    feats = []
    for track in sample.sensors:
        axes = amplitude_augment(track).axes[:, :CANONICAL_LENGTH]
        stats = np.stack([axes.mean(axis=1), axes.std(axis=1), axes.max(axis=1), axes.min(axis=1)], axis=1)
        feats.append(stats.ravel())
    return np.concatenate(feats)


def pca_project(features: np.ndarray, dims: int = 2) -> np.ndarray:
    """Project mean-centered rows onto the top ``dims`` principal components."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise InvalidSignalError("pca needs >= 2 vectors with >= 2 dimensions")
    xc = x - x.mean(axis=0)
    if not np.any(np.abs(xc) > 0):
        return np.zeros((x.shape[0], dims))
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:dims]
    out = xc @ comps.T
    if out.shape[1] < dims:
        out = np.hstack([out, np.zeros((x.shape[0], dims - out.shape[1]))])
    return out


def pca_components(features: np.ndarray, dims: int = 2) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    _, _, vt = np.linalg.svd(x - x.mean(axis=0), full_matrices=False)
    return vt[:dims]
