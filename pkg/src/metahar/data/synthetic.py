"""Desk-scale stand-in for HAR datasets: sinusoid-plus-noise users with personal style.

An activity fixes a base cadence band, an axis pattern and a gravity
direction. A user's style rescales cadence and intensity, rotates the device
frame and shifts the harmonic phase, so the same activity looks different
from user to user while staying separable within one user.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from ..signals import CANONICAL_LENGTH, SensorSample, SensorTrack
from .partition import make_clients
from .types import ClientDataset

ACTIVITY_NAMES = ("walk", "run", "upstairs", "downstairs", "bike", "sit", "stand")


@dataclass(frozen=True)
class ActivityProfile:
    name: str
    cadence_hz: float
    acc_pattern: Tuple[float, float, float]
    gyro_pattern: Tuple[float, float, float]
    harmonic: float
    gravity: Tuple[float, float, float]


def default_profiles(n_classes: int, rng: Optional[np.random.Generator] = None,
                     cadence_range: Tuple[float, float] = (1.0, 2.5)) -> List[ActivityProfile]:
    """Activity profiles with geometrically spaced cadences over ``cadence_range`` Hz."""
    if not 1 <= n_classes <= len(ACTIVITY_NAMES):
        raise ValueError(f"n_classes must be in [1, {len(ACTIVITY_NAMES)}]")
    rng = rng or np.random.default_rng(12345)
    lo, hi = cadence_range
    cadences = np.geomspace(lo, hi, n_classes) if n_classes > 1 else np.array([np.sqrt(lo * hi)])
    out = []
    for c in range(n_classes):
        acc = rng.uniform(0.2, 1.0, 3)
        gyro = rng.uniform(0.1, 0.8, 3)
        g = rng.normal(size=3)
        g = 9.81 * g / np.linalg.norm(g)
        out.append(ActivityProfile(ACTIVITY_NAMES[c], float(cadences[c]), tuple(acc), tuple(gyro),
                                   float(rng.uniform(0.1, 0.6)), tuple(g)))
    return out


@dataclass(frozen=True)
class SyntheticUserSpec:
    user_id: str
    freq_scale: float = 1.0
    amp_scale: float = 1.0
    orientation: Tuple[float, float, float] = (0.0, 0.0, 0.0)   # device frame, Euler xyz (rad)
    phase: float = 0.0                                          # harmonic phase offset
    noise: float = 0.3
    tone_hz: float = 0.0                                        # device vibration signature
    tone_amp: float = 0.0
    activities: Optional[Tuple[str, ...]] = None
    rate_hz: float = 25.0


def random_user_specs(n_users: int, rng: np.random.Generator, heterogeneity: float = 1.0,
                      noise: float = 0.3, prefix: str = "u", cadence_spread: float = 0.45,
                      tone_amp: float = 0.5) -> List[SyntheticUserSpec]:
    """User styles; ``heterogeneity=0`` makes every user identical.

    Cadence scales are drawn from ``exp(U(-s, s))`` with ``s = heterogeneity *
    cadence_spread``; a spread above half the log-ratio between neighbouring
    activity cadences makes one user's activity overlap another's.
    """
    specs = []
    h = heterogeneity
    for i in range(n_users):
        specs.append(SyntheticUserSpec(
            user_id=f"{prefix}{i:02d}",
            freq_scale=float(np.exp(h * cadence_spread * rng.uniform(-1.0, 1.0))),
            amp_scale=float(np.exp(h * rng.uniform(-0.5, 0.5))),
            orientation=tuple(float(a) for a in h * rng.uniform(-np.pi, np.pi, 3)),
            phase=float(h * rng.uniform(-np.pi, np.pi)),
            noise=noise,
            tone_hz=float(rng.uniform(6.0, 11.0)) if h > 0 else 0.0,
            tone_amp=float(h * tone_amp)))
    return specs


def synth_sample(spec: SyntheticUserSpec, profile: ActivityProfile, rng: np.random.Generator,
                 length: int = CANONICAL_LENGTH) -> SensorSample:
    t = np.arange(length) / spec.rate_hz
    f = profile.cadence_hz * spec.freq_scale * (1.0 + 0.03 * rng.normal())
    phi = rng.uniform(0, 2 * np.pi)
    axis_phase = np.array([0.0, 2.1, 4.2])[:, None]
    w = 2 * np.pi * f * t[None, :] + phi + axis_phase
    wave = np.sin(w) + profile.harmonic * np.sin(2 * w + spec.phase)
    body = spec.amp_scale * np.asarray(profile.acc_pattern)[:, None] * 3.0 * wave
    acc = np.asarray(profile.gravity)[:, None] + body
    gyro = spec.amp_scale * np.asarray(profile.gyro_pattern)[:, None] * 2.0 * np.cos(w + spec.phase)
    rot = Rotation.from_euler("xyz", spec.orientation).as_matrix()
    if spec.tone_amp:
        acc = acc + spec.tone_amp * np.sin(2 * np.pi * spec.tone_hz * t + rng.uniform(0, 2 * np.pi))
    acc = rot @ acc + spec.noise * rng.normal(size=acc.shape)
    gyro = rot @ gyro + 0.5 * spec.noise * rng.normal(size=gyro.shape)
    return SensorSample(spec.user_id, profile.name, (
        SensorTrack("acc", acc, spec.rate_hz), SensorTrack("gyro", gyro, spec.rate_hz)))


def synth_samples(specs: Sequence[SyntheticUserSpec], n_per_class: int, rng: np.random.Generator,
                  profiles: Optional[Sequence[ActivityProfile]] = None, n_classes: int = 4,
                  ) -> List[SensorSample]:
    profiles = list(profiles) if profiles is not None else default_profiles(n_classes)
    out = []
    for spec in specs:
        for prof in profiles:
            if spec.activities is not None and prof.name not in spec.activities:
                continue
            out.extend(synth_sample(spec, prof, rng) for _ in range(n_per_class))
    return out


def synth_generate(specs: Sequence[SyntheticUserSpec], n_per_class: int, rng: np.random.Generator,
                   profiles: Optional[Sequence[ActivityProfile]] = None, n_classes: int = 4,
                   train_frac: float = 0.8) -> List[ClientDataset]:
    """Generate every user's samples and split them into local train/test sets."""
    samples = synth_samples(specs, n_per_class, rng, profiles, n_classes)
    if not samples:
        return []
    return make_clients(samples, rng, train_frac)
