"""Shared oracles for the test suite."""
import numpy as np

from metahar import nn


def numeric_grad(loss_fn, params: nn.ParamSet, h: float = 1e-4) -> nn.ParamSet:
    """Central finite differences of ``loss_fn(params)`` for every parameter entry."""
    out = []
    for name, value in params.items():
        g = np.zeros_like(value)
        flat = g.reshape(-1)
        for i in range(value.size):
            bumped = value.copy().reshape(-1)
            bumped[i] += h
            up = loss_fn(params.updated({name: bumped.reshape(value.shape)}))
            bumped[i] -= 2 * h
            down = loss_fn(params.updated({name: bumped.reshape(value.shape)}))
            flat[i] = (up - down) / (2 * h)
        out.append((name, g))
    return nn.ParamSet(out)


def max_rel_error(analytic: nn.ParamSet, numeric: nn.ParamSet, floor: float = 1e-7) -> float:
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(rel.max(initial=0.0)))
    return worst


def gradcheck(graph, params: nn.ParamSet, inputs, seed: int = 0, h: float = 1e-4) -> float:
    """Relative error between backward() and central differences for loss = <R, graph(x)>."""
    out, tape = nn.forward(graph, params, inputs)
    weights = np.random.default_rng(seed).normal(size=out.shape)
    analytic = nn.backward(tape, weights)

    def loss(p):
        return float(np.sum(weights * nn.forward(graph, p, inputs)[0]))

    return max_rel_error(analytic, numeric_grad(loss, params, h))
