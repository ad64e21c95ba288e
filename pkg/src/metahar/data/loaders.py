"""Readers for the canonical JSONL format and public HAR dataset layouts.

Canonical record (one JSON object per line)::

    {"user_id": "a", "activity": "walk", "rate_hz": 25.0,
     "sensors": [{"name": "acc", "axes": [[x0, x1, ...], [y...], [z...]]},
                 {"name": "gyro", "axes": [[...], [...], [...]]}]}

All axes of all sensors in a record have the same length.
"""
from __future__ import annotations

import json
import logging
import re
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..signals import CANONICAL_LENGTH, InvalidSignalError, SensorSample, SensorTrack

log = logging.getLogger(__name__)

MAX_MALFORMED_FRACTION = 0.5
LENGTH_GATE = (150, 200)

HHAR_ACTIVITIES = {"stand": "stand", "sit": "sit", "walk": "walk", "stairsup": "upstairs",
                   "stairsdown": "downstairs", "bike": "bike"}
USCHAD_ACTIVITIES = {1: "walk", 2: "walk_left", 3: "walk_right", 4: "upstairs", 5: "downstairs",
                     6: "run", 7: "jump", 8: "sit", 9: "stand", 10: "sleep",
                     11: "elevator_up", 12: "elevator_down"}
USCHAD_DEFAULT = ("walk", "upstairs", "downstairs", "run", "sit", "stand")


class DatasetFormatError(ValueError):
    pass


def _check_malformed(bad: int, total: int, source) -> None:
    if total and bad / total > MAX_MALFORMED_FRACTION:
        raise DatasetFormatError(f"{source}: {bad} of {total} records malformed")
    if bad:
        log.warning("%s: skipped %d of %d malformed records", source, bad, total)


# ------------------------------------------------------------------ canonical

def sample_to_record(sample: SensorSample) -> dict:
    rate = sample.sensors[0].rate_hz
    return {"user_id": sample.user_id, "activity": sample.activity, "rate_hz": rate,
            "sensors": [{"name": s.name, "axes": s.axes.tolist()} for s in sample.sensors]}


def record_to_sample(rec: Mapping, length_gate: Optional[Tuple[int, int]] = LENGTH_GATE,
                     length: int = CANONICAL_LENGTH) -> Optional[SensorSample]:
    """Parse one record; returns None when it falls outside the length gate."""
    rate = float(rec["rate_hz"])
    tracks = []
    for s in rec["sensors"]:
        axes = np.asarray(s["axes"], dtype=np.float64)
        if axes.ndim != 2:
            raise InvalidSignalError("axes must be a list of equal-length lists")
        tracks.append(SensorTrack(str(s["name"]), axes, rate))
    sample = SensorSample(str(rec["user_id"]), str(rec["activity"]), tuple(tracks))
    if length_gate is not None:
        lo, hi = length_gate
        if not lo <= sample.length <= hi:
            return None
    if length and sample.length > length:
        sample = SensorSample(sample.user_id, sample.activity,
                              tuple(SensorTrack(t.name, t.axes[:, :length], t.rate_hz) for t in sample.sensors))
    return sample


def write_canonical(samples: Iterable[SensorSample], path: Union[str, Path]) -> int:
    n = 0
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s)) + "\n")
            n += 1
    return n


def load_canonical(path: Union[str, Path], length_gate: Optional[Tuple[int, int]] = LENGTH_GATE,
                   length: int = CANONICAL_LENGTH) -> List[SensorSample]:
    samples, bad, total, gated = [], 0, 0, 0
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            total += 1
            try:
                s = record_to_sample(json.loads(line), length_gate, length)
            except (ValueError, KeyError, TypeError) as exc:
                log.debug("bad record %d in %s: %s", total, path, exc)
                bad += 1
                continue
            if s is None:
                gated += 1
            else:
                samples.append(s)
    _check_malformed(bad, total, path)
    if gated:
        log.info("%s: %d records outside length gate %s", path, gated, length_gate)
    return samples


# ------------------------------------------------------------------ resampling

def resample(times: np.ndarray, values: np.ndarray, rate_hz: float,
             start: Optional[float] = None, stop: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Linearly interpolate ``values`` (d, n) sampled at ``times`` onto a uniform grid."""
    times = np.asarray(times, dtype=np.float64)
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    order = np.argsort(times, kind="stable")
    times, values = times[order], values[:, order]
    keep = np.concatenate([[True], np.diff(times) > 0])
    times, values = times[keep], values[:, keep]
    start = times[0] if start is None else start
    stop = times[-1] if stop is None else stop
    n = int(np.floor((stop - start) * rate_hz + 1e-9)) + 1
    grid = start + np.arange(max(n, 0)) / rate_hz
    return grid, np.vstack([np.interp(grid, times, v) for v in values])


def windows(n_points: int, window: int) -> List[slice]:
    return [slice(i, i + window) for i in range(0, n_points - window + 1, window)]


def _split_runs(times: np.ndarray, max_gap: float) -> List[np.ndarray]:
    order = np.argsort(times, kind="stable")
    t = times[order]
    cuts = np.flatnonzero(np.diff(t) > max_gap) + 1
    return np.split(order, cuts)


# ------------------------------------------------------------------ HHAR

HHAR_COLUMNS = {"time": "Creation_Time", "x": "x", "y": "y", "z": "z", "user": "User",
                "device": "Device", "activity": "gt"}


def load_hhar(path: Union[str, Path], rate_hz: float = 25.0, window_s: float = 6.0,
              columns: Optional[Mapping[str, str]] = None, time_unit: float = 1e-9,
              activity_map: Mapping[str, str] = HHAR_ACTIVITIES, max_gap_s: float = 1.0,
              accel_file: str = "Phones_accelerometer.csv",
              gyro_file: str = "Phones_gyroscope.csv") -> List[SensorSample]:
    """HHAR phone recordings: align accelerometer and gyroscope per (user, device,
    activity) run, resample to ``rate_hz`` and cut ``window_s`` windows."""
    import pandas as pd

    cols = dict(HHAR_COLUMNS, **(columns or {}))
    root = Path(path)
    frames = {}
    for sensor, fname in (("acc", accel_file), ("gyro", gyro_file)):
        fp = root / fname
        if not fp.exists():
            raise FileNotFoundError(fp)
        df = pd.read_csv(fp)
        missing = [c for c in cols.values() if c not in df.columns]
        if missing:
            raise DatasetFormatError(f"{fp}: missing columns {missing}")
        num = df[[cols["time"], cols["x"], cols["y"], cols["z"]]].apply(pd.to_numeric, errors="coerce")
        ok = num.notna().all(axis=1) & df[cols["activity"]].notna()
        _check_malformed(int((~ok).sum()), len(df), fp)
        df = df[ok].copy()
        df[[cols["time"], cols["x"], cols["y"], cols["z"]]] = num[ok]
        df = df[df[cols["activity"]].astype(str).isin(activity_map)]
        frames[sensor] = df
    window = int(round(rate_hz * window_s))
    samples = []
    acc_groups = frames["acc"].groupby([cols["user"], cols["device"], cols["activity"]], sort=True)
    gyro_groups = dict(list(frames["gyro"].groupby([cols["user"], cols["device"], cols["activity"]], sort=True)))
    for key, acc in acc_groups:
        gyro = gyro_groups.get(key)
        if gyro is None:
            continue
        user, _, act = key
        ta = acc[cols["time"]].to_numpy() * time_unit
        tg = gyro[cols["time"]].to_numpy() * time_unit
        xa = acc[[cols["x"], cols["y"], cols["z"]]].to_numpy().T
        xg = gyro[[cols["x"], cols["y"], cols["z"]]].to_numpy().T
        for run in _split_runs(ta, max_gap_s):
            t0, t1 = ta[run].min(), ta[run].max()
            sel = (tg >= t0) & (tg <= t1)
            if sel.sum() < 2 or len(run) < 2:
                continue
            start, stop = max(t0, tg[sel].min()), min(t1, tg[sel].max())
            if stop - start < window_s:
                continue
            _, ra = resample(ta[run], xa[:, run], rate_hz, start, stop)
            _, rg = resample(tg[sel], xg[:, sel], rate_hz, start, stop)
            n = min(ra.shape[1], rg.shape[1])
            for w in windows(n, window):
                samples.append(SensorSample(str(user), activity_map[str(act)], (
                    SensorTrack("acc", ra[:, w], rate_hz), SensorTrack("gyro", rg[:, w], rate_hz))))
    return samples


# ------------------------------------------------------------------ USC-HAD

def load_uschad(path: Union[str, Path], rate_hz: float = 50.0, window_s: float = 3.0,
                source_rate_hz: float = 100.0,
                activities: Optional[Sequence[str]] = USCHAD_DEFAULT) -> List[SensorSample]:
    """USC-HAD ``Subject*/a<act>t<trial>.mat`` files (6 columns: acc xyz, gyro xyz)."""
    from scipy.io import loadmat

    root = Path(path)
    files = sorted(root.rglob("*.mat"))
    if not files:
        raise FileNotFoundError(f"no .mat files under {root}")
    window = int(round(rate_hz * window_s))
    samples, bad = [], 0
    for fp in files:
        try:
            mat = loadmat(fp)
            readings = np.asarray(mat["sensor_readings"], dtype=np.float64)
            act_raw = mat.get("activity_number", mat.get("activity_numbr"))
            if act_raw is None:
                m = re.match(r"a(\d+)t\d+", fp.stem)
                act_num = int(m.group(1))
            else:
                act_num = int(np.asarray(act_raw).ravel()[0])
            subj = mat.get("subject")
            user = str(np.asarray(subj).ravel()[0]) if subj is not None else fp.parent.name
            if readings.ndim != 2 or readings.shape[1] < 6 or not np.all(np.isfinite(readings)):
                raise DatasetFormatError("sensor_readings must be finite with 6 columns")
        except (KeyError, ValueError, AttributeError, TypeError, OSError) as exc:
            log.debug("bad file %s: %s", fp, exc)
            bad += 1
            continue
        act = USCHAD_ACTIVITIES.get(act_num)
        if act is None or (activities is not None and act not in activities):
            continue
        t = np.arange(readings.shape[0]) / source_rate_hz
        _, res = resample(t, readings[:, :6].T, rate_hz)
        for w in windows(res.shape[1], window):
            samples.append(SensorSample(f"usc{user}", act, (
                SensorTrack("acc", res[0:3, w], rate_hz), SensorTrack("gyro", res[3:6, w], rate_hz))))
    _check_malformed(bad, len(files), root)
    return samples


def load_dataset(path: Union[str, Path], format: str = "canonical", **options) -> List[SensorSample]:
    """Load ``path`` as ``canonical`` JSONL, an ``hhar`` CSV directory or a ``uschad`` tree."""
    loaders = {"canonical": load_canonical, "hhar": load_hhar, "uschad": load_uschad}
    if format not in loaders:
        raise ValueError(f"unknown dataset format {format!r}; choose from {sorted(loaders)}")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    return loaders[format](p, **options)
