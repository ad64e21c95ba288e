"""Named, ordered parameter collections with value semantics."""
from __future__ import annotations

import io
import json
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterable, Iterator, Mapping, Sequence, Tuple, Union

import numpy as np


class IncongruentParamsError(ValueError):
    """Raised when two ParamSets disagree on names or shapes."""


class ParamSet(Mapping[str, np.ndarray]):
    """Ordered map ``name -> float64 array``.

    Arithmetic helpers always return new sets; the arrays held by an instance
    are never modified in place by this class.
    """

    def __init__(self, items: Union[Mapping[str, np.ndarray], Iterable[Tuple[str, np.ndarray]], None] = None):
        self._data: "OrderedDict[str, np.ndarray]" = OrderedDict()
        if items is None:
            return
        pairs = items.items() if isinstance(items, Mapping) else items
        for name, value in pairs:
            if name in self._data:
                raise ValueError(f"duplicate parameter name {name!r}")
            arr = np.array(value, dtype=np.float64, copy=True)
            self._data[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {tuple(v.shape)}" for k, v in self._data.items())
        return f"ParamSet({inner})"

    @property
    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._data.items()}

    def size(self) -> int:
        return int(sum(v.size for v in self._data.values()))

    def copy(self) -> "ParamSet":
        return ParamSet(self._data)

    def check_congruent(self, other: "ParamSet") -> None:
        if list(self._data) != list(other):
            raise IncongruentParamsError(
                f"parameter names differ: {sorted(set(self._data) ^ set(other))}")
        for name, value in self._data.items():
            if value.shape != other[name].shape:
                raise IncongruentParamsError(
                    f"shape mismatch for {name!r}: {value.shape} vs {other[name].shape}")

    def is_congruent(self, other: "ParamSet") -> bool:
        try:
            self.check_congruent(other)
        except IncongruentParamsError:
            return False
        return True

    def map(self, fn) -> "ParamSet":
        return ParamSet((k, fn(v)) for k, v in self._data.items())

    def __add__(self, other: "ParamSet") -> "ParamSet":
        self.check_congruent(other)
        return ParamSet((k, v + other[k]) for k, v in self._data.items())

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        self.check_congruent(other)
        return ParamSet((k, v - other[k]) for k, v in self._data.items())

    def scale(self, factor: float) -> "ParamSet":
        return ParamSet((k, v * factor) for k, v in self._data.items())

    def subset(self, names: Iterable[str]) -> "ParamSet":
        return ParamSet((k, self._data[k]) for k in names)

    def select(self, prefix: str) -> "ParamSet":
        return ParamSet((k, v) for k, v in self._data.items() if k.startswith(prefix))

    def merged(self, other: "ParamSet") -> "ParamSet":
        """Union of two sets with disjoint names; ``self`` entries come first."""
        clash = set(self._data) & set(other)
        if clash:
            raise ValueError(f"cannot merge, names overlap: {sorted(clash)}")
        return ParamSet(list(self._data.items()) + list(other.items()))

    def updated(self, other: Mapping[str, np.ndarray]) -> "ParamSet":
        """Copy with the entries named in ``other`` replaced (shapes must match)."""
        out = self.copy()
        for k, v in other.items():
            if k not in out._data:
                raise KeyError(k)
            v = np.asarray(v, dtype=np.float64)
            if v.shape != out._data[k].shape:
                raise IncongruentParamsError(f"shape mismatch for {k!r}")
            out._data[k] = v.copy()
        return out

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v)) for k, v in self._data.items())

    def flatten(self) -> np.ndarray:
        if not self._data:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._data.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamSet":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size():
            raise ValueError(f"expected {self.size()} values, got {flat.size}")
        out, pos = [], 0
        for k, v in self._data.items():
            out.append((k, flat[pos:pos + v.size].reshape(v.shape)))
            pos += v.size
        return ParamSet(out)

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, shapes and values."""
        return self.is_congruent(other) and all(
            np.array_equal(v, other[k]) for k, v in self._data.items())


def mean(sets: Sequence[ParamSet], weights: Sequence[float] | None = None) -> ParamSet:
    """Elementwise (optionally weighted) mean of congruent ParamSets.

    The unweighted mean is exactly invariant to the order of ``sets`` and
    returns the input bitwise when all sets are identical: values are
    offset from the elementwise minimum and the offsets are summed in
    sorted order.
    """
    if not sets:
        raise ValueError("cannot average an empty list of ParamSets")
    first = sets[0]
    for other in sets[1:]:
        first.check_congruent(other)
    if weights is None:
        out = []
        for k in first:
            stack = np.stack([s[k] for s in sets])
            base = stack.min(axis=0)
            offsets = np.sort(stack - base, axis=0)
            out.append((k, base + offsets.sum(axis=0) / len(sets)))
        return ParamSet(out)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(sets),) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive sum, one per set")
    w = w / w.sum()
    out = []
    for k in first:
        acc = np.zeros_like(first[k])
        for wi, s in zip(w, sets):
            acc = acc + wi * s[k]
        out.append((k, acc))
    return ParamSet(out)


# On-disk layout (.npz): one array per parameter keyed by its name, plus a
# "__order__" entry holding the JSON list of names so iteration order survives.
_ORDER_KEY = "__order__"


def save(params: ParamSet, path: Union[str, Path, io.IOBase]) -> None:
    arrays = {k: v for k, v in params.items()}
    if _ORDER_KEY in arrays:
        raise ValueError(f"{_ORDER_KEY!r} is reserved")
    arrays[_ORDER_KEY] = np.array(json.dumps(list(params)))
    np.savez(path, **arrays)


def load(path: Union[str, Path, io.IOBase]) -> ParamSet:
    with np.load(path, allow_pickle=False) as data:
        order = json.loads(str(data[_ORDER_KEY]))
        return ParamSet((k, data[k]) for k in order)
