"""Shared oracles and fixtures-as-functions for the test suite."""

import math

import numpy as np

from hrtrader.nn import Mlp

N_STOCKS = 5
# policy, value, actor, critic as built by the agents for a 5-stock universe
GRAD_ARCHITECTURES = [
    ([2 * N_STOCKS, 64, 64, 3 * N_STOCKS], ["tanh", "tanh", "identity"]),
    ([2 * N_STOCKS, 64, 64, 1], ["tanh", "tanh", "identity"]),
    ([3 * N_STOCKS + 1, 64, 64, N_STOCKS], ["tanh", "tanh", "tanh"]),
    ([4 * N_STOCKS + 1, 64, 64, 1], ["tanh", "tanh", "identity"]),
]


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference_errors(sizes, acts, probes=25, seed=0, h=1e-5, batch=4):
    """Relative errors between backward() and central differences at random parameters.

    The scalar probed is ``sum(weights * forward(X))`` for a random batch ``X``.
    """
    rng = np.random.default_rng(seed)
    net = Mlp(sizes, acts, seed=seed)
    X = rng.normal(size=(batch, sizes[0]))
    W = rng.normal(size=(batch, sizes[-1]))
    grad = net.backward(X, W)
    errs = []
    for k in rng.choice(net.n_params, size=probes, replace=False):
        orig = net.params[k]
        net.params[k] = orig + h
        up = float(np.sum(W * net(X)))
        net.params[k] = orig - h
        down = float(np.sum(W * net(X)))
        net.params[k] = orig
        errs.append(relative_error(grad[k], (up - down) / (2 * h)))
    return errs


def clip_oracle(r, a, eps):
    lo, hi = 1 - eps, 1 + eps
    clipped = lo if r < lo else hi if r > hi else r
    return min(r * a, clipped * a)


def ledger_oracle(prices, holdings, cash, directive, sizes, h_max, cost):
    """Sequential per-order ledger written independently of execute_trades."""
    holdings = [int(x) for x in holdings]
    executed = [0] * len(prices)
    fees = [0.0] * len(prices)
    for i, (d, s) in enumerate(zip(directive, sizes)):
        if d == -1:
            k = int(math.floor(min(max(s, 0.0), 1.0) * h_max + 0.5))
            q = min(k, holdings[i])
            cash += prices[i] * q * (1 - cost)
            fees[i] = prices[i] * q * cost
            holdings[i] -= q
            executed[i] = -q
    for i, (d, s) in enumerate(zip(directive, sizes)):
        if d == 1:
            k = int(math.floor(min(max(s, 0.0), 1.0) * h_max + 0.5))
            q = 0
            while q < k and prices[i] * (q + 1) * (1 + cost) <= cash:
                q += 1
            cash -= prices[i] * q * (1 + cost)
            fees[i] = prices[i] * q * cost
            holdings[i] += q
            executed[i] = q
    return holdings, cash, executed, fees
