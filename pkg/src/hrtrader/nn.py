"""Dense feed-forward networks with hand-written backprop and AdamW.

Parameters are stored in one flat float64 vector; per-layer weight and bias
arrays are reshaped views into it, so optimizers and soft updates work on the
flat vector directly. Weights are laid out ``(fan_in, fan_out)`` and inputs are
row vectors (or row-stacked batches).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArchitectureMismatch, NonFiniteGradient, ShapeMismatch, VersionError

ACTIVATIONS = ("identity", "tanh", "relu", "softmax_group")
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}

MLP_MAGIC = b"HMLP"
MLP_VERSION = 1


def param_count(layer_sizes: Sequence[int]) -> int:
    return sum((a + 1) * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def _group_softmax(z: np.ndarray, group: int) -> np.ndarray:
    g = z.reshape(z.shape[:-1] + (-1, group))
    g = g - g.max(axis=-1, keepdims=True)
    e = np.exp(g)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(z.shape)


class Mlp:
    """Multilayer perceptron ``layer_sizes[0] -> ... -> layer_sizes[-1]``.

    ``activations`` has one tag per weight layer. ``softmax_group`` normalizes
    consecutive blocks of ``group_size`` outputs independently.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        activations: Sequence[str],
        seed: int = 0,
        group_size: int = 3,
        params: np.ndarray | None = None,
    ):
        self.layer_sizes = tuple(int(n) for n in layer_sizes)
        self.activations = tuple(activations)
        self.seed = int(seed)
        self.group_size = int(group_size)
        if len(self.layer_sizes) < 2 or any(n < 1 for n in self.layer_sizes):
            raise ShapeMismatch(f"invalid layer sizes {self.layer_sizes}")
        if len(self.activations) != len(self.layer_sizes) - 1:
            raise ShapeMismatch("need exactly one activation per weight layer")
        for i, act in enumerate(self.activations):
            if act not in _ACT_CODE:
                raise ValueError(f"unknown activation {act!r}")
            if act == "softmax_group" and self.layer_sizes[i + 1] % self.group_size:
                raise ShapeMismatch("softmax_group width must be a multiple of group_size")

        self._offsets = []
        off = 0
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self._offsets.append((off, off + a * b, off + a * b + b))
            off += (a + 1) * b
        self.n_params = off

        if params is None:
            params = self._init_params()
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ShapeMismatch(f"expected {self.n_params} params, got {params.shape}")
        self.params = params.copy()

    def _init_params(self) -> np.ndarray:
        # Glorot-uniform weights, zero biases
        rng = np.random.default_rng(self.seed)
        out = np.zeros(self.n_params)
        for (w0, w1, _), a, b in zip(self._offsets, self.layer_sizes[:-1], self.layer_sizes[1:]):
            limit = np.sqrt(6.0 / (a + b))
            out[w0:w1] = rng.uniform(-limit, limit, size=a * b)
        return out

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def layers(self):
        """Yield ``(W, b)`` views for each weight layer."""
        for (w0, w1, b1), a, b in zip(self._offsets, self.layer_sizes[:-1], self.layer_sizes[1:]):
            yield self.params[w0:w1].reshape(a, b), self.params[w1:b1]

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.activations, self.seed, self.group_size, self.params)

    def same_architecture(self, other: "Mlp") -> bool:
        return (
            self.layer_sizes == other.layer_sizes
            and self.activations == other.activations
            and self.group_size == other.group_size
        )

    # -- evaluation --------------------------------------------------------

    def _activate(self, act: str, z: np.ndarray) -> np.ndarray:
        if act == "tanh":
            return np.tanh(z)
        if act == "relu":
            return np.maximum(z, 0.0)
        if act == "softmax_group":
            return _group_softmax(z, self.group_size)
        return z

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise ShapeMismatch(f"input shape {x.shape} does not match width {self.input_size}")
        return x, single

    def _trace(self, x: np.ndarray) -> list[np.ndarray]:
        outs = [x]
        h = x
        for (W, b), act in zip(self.layers(), self.activations):
            h = self._activate(act, h @ W + b)
            outs.append(h)
        return outs

    def forward(self, x) -> np.ndarray:
        x, single = self._as_batch(x)
        y = self._trace(x)[-1]
        return y[0] if single else y

    __call__ = forward

    def trace(self, x) -> list[np.ndarray]:
        """Batched forward pass keeping every layer output, for ``backward_trace``."""
        return self._trace(self._as_batch(x)[0])

    def backward_trace(self, outs: list[np.ndarray], grad_out) -> tuple[np.ndarray, np.ndarray]:
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != outs[-1].shape:
            raise ShapeMismatch(f"grad_out shape {g.shape} does not match output {outs[-1].shape}")
        grad = np.empty(self.n_params)
        layers = list(self.layers())
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            y = outs[k + 1]
            act = self.activations[k]
            if act == "tanh":
                g = g * (1.0 - y * y)
            elif act == "relu":
                g = g * (y > 0)
            elif act == "softmax_group":
                gy = (g * y).reshape(y.shape[0], -1, self.group_size).sum(-1)
                g = y * (g - np.repeat(gy, self.group_size, axis=1))
            w0, w1, b1 = self._offsets[k]
            grad[w0:w1] = (outs[k].T @ g).ravel()
            grad[w1:b1] = g.sum(axis=0)
            g = g @ W.T
        return grad, g

    def backward_full(self, x, grad_out) -> tuple[np.ndarray, np.ndarray]:
        """Gradient of ``sum(grad_out * forward(x))`` w.r.t. params and input.

        Batched inputs sum the parameter gradient over rows.
        """
        x, single = self._as_batch(x)
        grad, gx = self.backward_trace(self._trace(x), grad_out)
        return grad, (gx[0] if single else gx)

    def backward(self, x, grad_out) -> np.ndarray:
        return self.backward_full(x, grad_out)[0]

    def input_grad(self, x, grad_out) -> np.ndarray:
        return self.backward_full(x, grad_out)[1]

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        L = len(self.activations)
        head = struct.pack("<4sHHQI", MLP_MAGIC, MLP_VERSION, L, self.seed & (2**64 - 1), self.group_size)
        head += struct.pack(f"<{L + 1}I", *self.layer_sizes)
        head += struct.pack(f"<{L}B", *(_ACT_CODE[a] for a in self.activations))
        head += b"\x00" * (-len(head) % 8)
        head += struct.pack("<Q", self.n_params)
        return head + self.params.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Mlp":
        magic, version, L, seed, group = struct.unpack_from("<4sHHQI", buf, 0)
        if magic != MLP_MAGIC:
            raise ValueError("not an MLP parameter blob")
        if version != MLP_VERSION:
            raise VersionError(f"MLP blob version {version}, expected {MLP_VERSION}")
        off = struct.calcsize("<4sHHQI")
        sizes = struct.unpack_from(f"<{L + 1}I", buf, off)
        off += 4 * (L + 1)
        acts = [ACTIVATIONS[c] for c in struct.unpack_from(f"<{L}B", buf, off)]
        off += L
        off += -off % 8
        (n,) = struct.unpack_from("<Q", buf, off)
        off += 8
        params = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64)
        return cls(sizes, acts, seed, group, params)

    def metadata(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activations": list(self.activations),
            "seed": self.seed,
            "group_size": self.group_size,
            "n_params": self.n_params,
            "format": "HMLP v1 little-endian; see README",
        }


def save_mlp(net: Mlp, path: str | Path) -> None:
    """Write ``path`` (binary parameters) and ``path.json`` (metadata sidecar)."""
    path = Path(path)
    path.write_bytes(net.to_bytes())
    Path(str(path) + ".json").write_text(json.dumps(net.metadata(), indent=2) + "\n", encoding="utf-8")


def load_mlp(path: str | Path) -> Mlp:
    return Mlp.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# optimization


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm > 0 and norm > max_norm:
        return grad * (max_norm / norm)
    return grad


class AdamW:
    """Adam with decoupled weight decay (Loshchilov & Hutter)."""

    def __init__(
        self,
        n_params: int,
        learning_rate: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        if not learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        self.learning_rate = float(learning_rate)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, net: Mlp, grad: np.ndarray) -> Mlp:
        """Descend ``grad`` in place on ``net.params``; returns ``net``."""
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != net.params.shape or self.m.shape != net.params.shape:
            raise ShapeMismatch(f"gradient {grad.shape} vs params {net.params.shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient("gradient contains NaN or inf")
        b1, b2 = self.betas
        self.t += 1
        lr = self.learning_rate
        net.params *= 1.0 - lr * self.weight_decay
        self.m = b1 * self.m + (1.0 - b1) * grad
        self.v = b2 * self.v + (1.0 - b2) * grad * grad
        m_hat = self.m / (1.0 - b1**self.t)
        v_hat = self.v / (1.0 - b2**self.t)
        net.params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return net

    def state_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "t": self.t,
            "m": self.m.copy(),
            "v": self.v.copy(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "AdamW":
        opt = cls(len(state["m"]), state["learning_rate"], tuple(state["betas"]), state["eps"], state["weight_decay"])
        opt.m = np.array(state["m"], dtype=np.float64)
        opt.v = np.array(state["v"], dtype=np.float64)
        opt.t = int(state["t"])
        return opt


def soft_update(target: Mlp, source: Mlp, tau: float) -> Mlp:
    """Polyak averaging ``target <- tau * source + (1 - tau) * target`` in place."""
    if not target.same_architecture(source):
        raise ArchitectureMismatch("target and source architectures differ")
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    if tau == 1.0:
        target.params[:] = source.params
    else:
        target.params *= 1.0 - tau
        target.params += tau * source.params
    return target
