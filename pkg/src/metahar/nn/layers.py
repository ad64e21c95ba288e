"""Differentiable ops and the parameterized layers built from them."""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .autodiff import Context, Var, node


# ---------------------------------------------------------------- plain ops

def relu(x: Var) -> Var:
    mask = x.data > 0
    return node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def reshape(x: Var, shape: Sequence[int]) -> Var:
    src = x.data.shape
    return node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Var, axes: Sequence[int]) -> Var:
    inv = np.argsort(axes)
    return node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs: Sequence[Var], axis: int) -> Var:
    sizes = [v.data.shape[axis] for v in xs]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return node(np.concatenate([v.data for v in xs], axis=axis), tuple(xs), vjp, "concat")


def mean(x: Var, axis: int) -> Var:
    n = x.data.shape[axis]
    src = x.data.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, src).copy(),)

    return node(x.data.mean(axis=axis), (x,), vjp, "mean")


def take_last(x: Var, axis: int = 1) -> Var:
    """Select the last entry along ``axis`` (e.g. final LSTM step)."""
    src = x.data.shape
    idx = [slice(None)] * x.data.ndim
    idx[axis] = -1
    idx = tuple(idx)

    def vjp(g):
        out = np.zeros(src)
        out[idx] = g
        return (out,)

    return node(x.data[idx], (x,), vjp, "take_last")


def linear(x: Var, w: Var, b: Optional[Var] = None) -> Var:
    """``x @ w + b`` over the last axis of ``x``."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"linear: input width {x.data.shape[-1]} != weight rows {w.data.shape[0]}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    x2 = x.data.reshape(-1, x.data.shape[-1])

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        dx = g @ w.data.T
        dw = x2.T @ g2
        if b is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return node(y, parents, vjp, "linear")


def softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Var, axis: int = -1) -> Var:
    s = softmax_array(x.data, axis)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return node(s, (x,), vjp, "softmax")


def dropout(x: Var, rate: float, ctx: Context) -> Var:
    """Inverted dropout; the identity in eval mode or at rate 0."""
    if not ctx.train or rate <= 0.0:
        return x
    if ctx.rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (ctx.rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def conv1d(x: Var, w: Var, b: Var) -> Var:
    """Same-padded 1-D convolution. x: (N, Cin, L); w: (Cout, Cin, K), K odd."""
    n, cin, length = x.data.shape
    cout, wcin, k = w.data.shape
    if cin != wcin:
        raise ValueError(f"conv1d: input has {cin} channels, kernel expects {wcin}")
    pad = k // 2
    # channel-last working layout so every kernel tap is one contiguous matmul
    xt = np.pad(x.data.transpose(0, 2, 1), ((0, 0), (pad, pad), (0, 0)))
    taps = [np.ascontiguousarray(xt[:, j:j + length]).reshape(n * length, cin) for j in range(k)]
    y = np.broadcast_to(b.data, (n * length, cout)).copy()
    for j in range(k):
        y += taps[j] @ np.ascontiguousarray(w.data[:, :, j].T)
    y = y.reshape(n, length, cout).transpose(0, 2, 1)

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(n * length, cout)
        dw = np.empty_like(w.data)
        dxt = np.zeros((n, length + 2 * pad, cin))
        for j in range(k):
            dw[:, :, j] = g2.T @ taps[j]
            dxt[:, j:j + length] += (g2 @ np.ascontiguousarray(w.data[:, :, j])).reshape(n, length, cin)
        return dxt[:, pad:pad + length].transpose(0, 2, 1), dw, g2.sum(axis=0)

    return node(np.ascontiguousarray(y), (x, w, b), vjp, "conv1d")


def conv2d(x: Var, w: Var, b: Var) -> Var:
    """Same-padded 2-D convolution. x: (N, Cin, H, W); w: (Cout, Cin, KH, KW), odd kernels."""
    n, cin, h, wd = x.data.shape
    cout, wcin, kh, kw = w.data.shape
    if cin != wcin:
        raise ValueError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    ph, pw = kh // 2, kw // 2
    m = n * h * wd
    xt = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    taps = [np.ascontiguousarray(xt[:, i:i + h, j:j + wd]).reshape(m, cin) for i, j in offsets]
    y = np.broadcast_to(b.data, (m, cout)).copy()
    for (i, j), tap in zip(offsets, taps):
        y += tap @ np.ascontiguousarray(w.data[:, :, i, j].T)
    y = y.reshape(n, h, wd, cout).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(m, cout)
        dw = np.empty_like(w.data)
        dxt = np.zeros((n, h + 2 * ph, wd + 2 * pw, cin))
        for (i, j), tap in zip(offsets, taps):
            dw[:, :, i, j] = g2.T @ tap
            dxt[:, i:i + h, j:j + wd] += (g2 @ np.ascontiguousarray(w.data[:, :, i, j])).reshape(n, h, wd, cin)
        return dxt[:, ph:ph + h, pw:pw + wd].transpose(0, 3, 1, 2), dw, g2.sum(axis=0)

    return node(np.ascontiguousarray(y), (x, w, b), vjp, "conv2d")


def lstm(x: Var, wx: Var, wh: Var, b: Var) -> Var:
    """Single LSTM layer over a sequence, zero initial state.

    x: (N, T, D); wx: (D, 4H); wh: (H, 4H); b: (4H,). Gate order i, f, g, o.
    Returns all hidden states, shape (N, T, H).
    """
    n, steps, d = x.data.shape
    hid = wh.data.shape[0]
    if wx.data.shape != (d, 4 * hid):
        raise ValueError(f"lstm: input width {d} does not match kernel {wx.data.shape}")
    xw = x.data @ wx.data + b.data                                  # N, T, 4H
    hs = np.zeros((n, steps + 1, hid))
    cs = np.zeros((n, steps + 1, hid))
    gates = np.zeros((n, steps, 4 * hid))
    for t in range(steps):
        z = xw[:, t] + hs[:, t] @ wh.data
        i = expit(z[:, :hid])
        f = expit(z[:, hid:2 * hid])
        gg = np.tanh(z[:, 2 * hid:3 * hid])
        o = expit(z[:, 3 * hid:])
        cs[:, t + 1] = f * cs[:, t] + i * gg
        hs[:, t + 1] = o * np.tanh(cs[:, t + 1])
        gates[:, t] = np.concatenate([i, f, gg, o], axis=1)

    def vjp(g):
        dz = np.zeros_like(gates)
        dh_next = np.zeros((n, hid))
        dc_next = np.zeros((n, hid))
        for t in reversed(range(steps)):
            i, f, gg, o = np.split(gates[:, t], 4, axis=1)
            tc = np.tanh(cs[:, t + 1])
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dzt = dz[:, t]
            dzt[:, :hid] = dc * gg * i * (1.0 - i)
            dzt[:, hid:2 * hid] = dc * cs[:, t] * f * (1.0 - f)
            dzt[:, 2 * hid:3 * hid] = dc * i * (1.0 - gg * gg)
            dzt[:, 3 * hid:] = dh * tc * o * (1.0 - o)
            dh_next = dzt @ wh.data.T
            dc_next = dc * f
        dz2 = dz.reshape(n * steps, 4 * hid)
        dx = dz @ wx.data.T
        dwx = x.data.reshape(n * steps, d).T @ dz2
        dwh = hs[:, :-1].reshape(n * steps, hid).T @ dz2
        db = dz2.sum(axis=0)
        return dx, dwx, dwh, db

    return node(hs[:, 1:].copy(), (x, wx, wh, b), vjp, "lstm")


# ----------------------------------------------------------- initialization

def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ------------------------------------------------------------------- layers

class Layer:
    """A named unit owning some parameters. Subclasses define ``shapes``,
    ``init`` and ``__call__``."""

    def __init__(self, name: str):
        self.name = name

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {}

    def init(self, rng: np.random.Generator) -> List[Tuple[str, np.ndarray]]:
        return []

    def p(self, ctx: Context, key: str) -> Var:
        return ctx.param(f"{self.name}.{key}")

    def _checked(self, fn, *args):
        try:
            return fn(*args)
        except ValueError as exc:
            raise ValueError(f"layer {self.name!r}: {exc}") from None


class Dense(Layer):
    def __init__(self, name: str, n_in: int, n_out: int, bias: bool = True):
        super().__init__(name)
        self.n_in, self.n_out, self.bias = n_in, n_out, bias

    def shapes(self):
        s = {f"{self.name}.W": (self.n_in, self.n_out)}
        if self.bias:
            s[f"{self.name}.b"] = (self.n_out,)
        return s

    def init(self, rng):
        out = [(f"{self.name}.W", glorot_uniform(rng, (self.n_in, self.n_out), self.n_in, self.n_out))]
        if self.bias:
            out.append((f"{self.name}.b", np.zeros(self.n_out)))
        return out

    def __call__(self, ctx: Context, x: Var) -> Var:
        b = self.p(ctx, "b") if self.bias else None
        return self._checked(linear, x, self.p(ctx, "W"), b)


class Conv1d(Layer):
    def __init__(self, name: str, c_in: int, c_out: int, kernel: int = 3):
        super().__init__(name)
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd for same padding")
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel

    def shapes(self):
        return {f"{self.name}.W": (self.c_out, self.c_in, self.kernel), f"{self.name}.b": (self.c_out,)}

    def init(self, rng):
        shape = (self.c_out, self.c_in, self.kernel)
        w = glorot_uniform(rng, shape, self.c_in * self.kernel, self.c_out * self.kernel)
        return [(f"{self.name}.W", w), (f"{self.name}.b", np.zeros(self.c_out))]

    def __call__(self, ctx, x):
        return self._checked(conv1d, x, self.p(ctx, "W"), self.p(ctx, "b"))


class Conv2d(Layer):
    def __init__(self, name: str, c_in: int, c_out: int, kernel: Tuple[int, int] = (3, 3)):
        super().__init__(name)
        if kernel[0] % 2 != 1 or kernel[1] % 2 != 1:
            raise ValueError("kernel sizes must be odd for same padding")
        self.c_in, self.c_out, self.kernel = c_in, c_out, tuple(kernel)

    def shapes(self):
        return {f"{self.name}.W": (self.c_out, self.c_in) + self.kernel, f"{self.name}.b": (self.c_out,)}

    def init(self, rng):
        area = self.kernel[0] * self.kernel[1]
        shape = (self.c_out, self.c_in) + self.kernel
        w = glorot_uniform(rng, shape, self.c_in * area, self.c_out * area)
        return [(f"{self.name}.W", w), (f"{self.name}.b", np.zeros(self.c_out))]

    def __call__(self, ctx, x):
        return self._checked(conv2d, x, self.p(ctx, "W"), self.p(ctx, "b"))


class LSTM(Layer):
    def __init__(self, name: str, n_in: int, hidden: int):
        super().__init__(name)
        self.n_in, self.hidden = n_in, hidden

    def shapes(self):
        h = self.hidden
        return {f"{self.name}.Wx": (self.n_in, 4 * h), f"{self.name}.Wh": (h, 4 * h),
                f"{self.name}.b": (4 * h,)}

    def init(self, rng):
        h = self.hidden
        return [(f"{self.name}.Wx", glorot_uniform(rng, (self.n_in, 4 * h), self.n_in, h)),
                (f"{self.name}.Wh", glorot_uniform(rng, (h, 4 * h), h, h)),
                (f"{self.name}.b", np.zeros(4 * h))]

    def __call__(self, ctx, x):
        return self._checked(lstm, x, self.p(ctx, "Wx"), self.p(ctx, "Wh"), self.p(ctx, "b"))


class Dropout(Layer):
    def __init__(self, name: str, rate: float):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate

    def __call__(self, ctx, x):
        return dropout(x, self.rate, ctx)


class Softmax(Layer):
    def __call__(self, ctx, x):
        return softmax(x)


class Sequential:
    """Chain of layers; also usable directly as a ``forward`` graph."""

    def __init__(self, layers: Sequence):
        self.layers = list(layers)

    def shapes(self):
        out = {}
        for layer in self.layers:
            if isinstance(layer, Layer):
                out.update(layer.shapes())
        return out

    def init(self, rng):
        from .params import ParamSet
        items = []
        for layer in self.layers:
            if isinstance(layer, Layer):
                items.extend(layer.init(rng))
        return ParamSet(items)

    def __call__(self, ctx, x):
        for layer in self.layers:
            x = layer(ctx, x)
        return x


class Lambda:
    """Wrap a parameter-free op (e.g. ``relu``) as a chain element."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, ctx, x):
        return self.fn(x)
