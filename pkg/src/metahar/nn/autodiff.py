"""Reverse-mode automatic differentiation over numpy arrays.

Nodes are coarse: a whole convolution or LSTM sequence is one node with a
hand-written vector-Jacobian product, which keeps graphs small enough for
plain Python traversal.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .params import ParamSet


class NonFiniteError(FloatingPointError):
    """A forward or backward value contained NaN or Inf."""


class TapeConsumedError(RuntimeError):
    """``backward`` was called twice on the same tape."""


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return arr


class Var:
    """A value in the computation graph."""

    __slots__ = ("data", "parents", "vjp", "op")

    def __init__(self, data: np.ndarray, parents: Tuple["Var", ...] = (),
                 vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
                 op: str = "leaf"):
        self.data = data
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.data.shape})"


def node(data: np.ndarray, parents: Tuple[Var, ...], vjp, op: str) -> Var:
    return Var(_check_finite(data, op), parents, vjp, op)


class Tape:
    """Record of one forward pass; consumed by a single ``backward`` call."""

    def __init__(self, output: Var, params: Dict[str, Var], order: Sequence[str]):
        self.output = output
        self.params = params
        self.order = list(order)
        self.consumed = False


class Context:
    """Per-forward state handed to layers: parameter leaves, mode and RNG."""

    def __init__(self, params: ParamSet, train: bool = False,
                 rng: Optional[np.random.Generator] = None):
        self.leaves: Dict[str, Var] = {k: Var(v) for k, v in params.items()}
        self.order = list(params)
        self.train = train
        self.rng = rng

    def param(self, name: str) -> Var:
        try:
            return self.leaves[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None


def _topological(root: Var) -> List[Var]:
    order: List[Var] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        v, expanded = stack.pop()
        if expanded:
            order.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p in v.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def forward(graph: Callable[[Context, object], Var], params: ParamSet, inputs,
            mode: str = "eval", rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, Tape]:
    """Run ``graph`` on ``inputs`` and return ``(output, tape)``.

    ``inputs`` may be an array or a list of arrays; they are wrapped as
    constant leaves. Dropout needs ``rng`` in train mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    ctx = Context(params, train=(mode == "train"), rng=rng)
    if isinstance(inputs, (list, tuple)):
        wrapped = [Var(np.asarray(x, dtype=np.float64)) for x in inputs]
    else:
        wrapped = Var(np.asarray(inputs, dtype=np.float64))
    out = graph(ctx, wrapped)
    return out.data, Tape(out, ctx.leaves, ctx.order)


def backward(tape: Tape, loss_grad: np.ndarray) -> ParamSet:
    """Propagate ``loss_grad`` (d loss / d output) back to every parameter."""
    if tape.consumed:
        raise TapeConsumedError("tape already used for a backward pass")
    tape.consumed = True
    root = tape.output
    g0 = np.asarray(loss_grad, dtype=np.float64)
    if g0.shape != root.data.shape:
        raise ValueError(f"loss_grad shape {g0.shape} != output shape {root.data.shape}")
    grads: Dict[int, np.ndarray] = {id(root): g0}
    for v in reversed(_topological(root)):
        g = grads.get(id(v))
        if g is None or v.vjp is None:
            continue
        parent_grads = v.vjp(g)
        for p, pg in zip(v.parents, parent_grads):
            if pg is None:
                continue
            _check_finite(pg, f"backward of {v.op}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = []
    for name in tape.order:
        leaf = tape.params[name]
        g = grads.get(id(leaf))
        out.append((name, np.zeros_like(leaf.data) if g is None else g))
    return ParamSet(out)
