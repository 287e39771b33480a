"""Hand-chained layers with explicit backward passes.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` during ``backward``.
Call ``zero_grad`` before each batch.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


class DimensionError(ValueError):
    pass


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, out: np.ndarray) -> np.ndarray:
    if name == "relu":
        # subgradient at 0 is 0
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1 - out * out
    return np.ones_like(z)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1 + np.tanh(0.5 * x))


class Module:
    """Base container. Leaves own ``params``/``grads``; composites own children."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.training = True

    def children(self) -> dict[str, "Module"]:
        out: dict[str, Module] = {}
        for k, v in vars(self).items():
            if isinstance(v, Module):
                out[k] = v
            elif isinstance(v, (list, tuple)) and v and all(isinstance(m, Module) for m in v):
                out.update({f"{k}.{i}": m for i, m in enumerate(v)})
        return out

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for name, p in self.params.items():
            yield prefix + name, p, self.grads[name]
        for cname, child in self.children().items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> dict[str, np.ndarray]:
        return {n: p for n, p, _ in self.named_parameters()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {n: g for n, _, g in self.named_parameters()}

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g.fill(0)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children().values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for name in list(self.params):
            self.params[name] = self.params[name].astype(dtype)
            self.grads[name] = np.zeros_like(self.params[name])
        for child in self.children().values():
            child.astype(dtype)
        return self

    def load_parameters(self, tensors: dict[str, np.ndarray]) -> None:
        """Copy values into existing parameter arrays, checking names and shapes."""
        own = self.parameters()
        missing = set(own) - set(tensors)
        extra = set(tensors) - set(own)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            src = np.asarray(tensors[name])
            if src.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {src.shape}")
            p[...] = src


class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int, activation: str = "identity",
                 rng: np.random.Generator | None = None, dtype=np.float32) -> None:
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim, self.activation = in_dim, out_dim, activation
        scale = np.sqrt((2.0 if activation == "relu" else 1.0) / in_dim)
        self.params = {
            "W": (rng.standard_normal((in_dim, out_dim)) * scale).astype(dtype),
            "b": np.zeros(out_dim, dtype=dtype),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache: tuple | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        W, b = self.params["W"], self.params["b"]
        if x.shape[-1] != W.shape[0]:
            raise DimensionError(f"dense input shape {x.shape} incompatible with weight shape {W.shape}")
        z = x @ W + b
        out = _act(self.activation, z)
        self._cache = (x, z, out)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x, z, out = self._cache
        dz = dout * _act_grad(self.activation, z, out)
        x2 = x.reshape(-1, self.in_dim)
        dz2 = dz.reshape(-1, self.out_dim)
        self.grads["W"] += x2.T @ dz2
        self.grads["b"] += dz2.sum(axis=0)
        return dz @ self.params["W"].T


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator | None = None,
                 dtype=np.float32, scale: float = 0.1) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab, self.dim = vocab, dim
        self.params = {"E": (rng.standard_normal((vocab, dim)) * scale).astype(dtype)}
        self.grads = {"E": np.zeros_like(self.params["E"])}
        self._idx: np.ndarray | None = None

    def forward(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= self.vocab):
            raise DimensionError(f"embedding index out of range [0, {self.vocab})")
        self._idx = idx
        return self.params["E"][idx]

    def backward(self, dout: np.ndarray) -> None:
        flat = self._idx.reshape(-1)
        cells = (flat[:, None] * self.dim + np.arange(self.dim)).reshape(-1)
        acc = np.bincount(cells, weights=dout.reshape(-1), minlength=self.vocab * self.dim)
        self.grads["E"] += acc.reshape(self.vocab, self.dim).astype(self.grads["E"].dtype)


class Dropout(Module):
    """Inverted dropout; identity outside training mode."""

    def __init__(self, rate: float, rng: np.random.Generator | None = None) -> None:
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if not self.training or self.rate == 0:
            self._mask = None
            return x
        keep = 1 - self.rate
        self._mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
        return x * self._mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout if self._mask is None else dout * self._mask


class Sequential(Module):
    def __init__(self, *layers: Module) -> None:
        super().__init__()
        self.layers = list(layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def mlp(sizes: list[int], rng: np.random.Generator, dropout: float = 0.0,
        final_activation: str = "identity", hidden_activation: str = "relu") -> Sequential:
    """Dense stack; dropout follows every hidden activation."""
    layers: list[Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        layers.append(Dense(a, b, final_activation if last else hidden_activation, rng=rng))
        if not last and dropout > 0:
            layers.append(Dropout(dropout, rng=np.random.default_rng(rng.integers(2**63))))
    return Sequential(*layers)


class GRUCell(Module):
    """Gated recurrent unit, gate order (reset, update, candidate).

        r  = sigmoid(x Wx_r + bx_r + h Wh_r + bh_r)
        z  = sigmoid(x Wx_z + bx_z + h Wh_z + bh_z)
        n  = tanh(x Wx_n + bx_n + r * (h Wh_n + bh_n))
        h' = (1 - z) * n + z * h
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator | None = None,
                 dtype=np.float32) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.hidden = in_dim, hidden
        k = 1.0 / np.sqrt(hidden)
        self.params = {
            "Wx": rng.uniform(-k, k, (in_dim, 3 * hidden)).astype(dtype),
            "Wh": rng.uniform(-k, k, (hidden, 3 * hidden)).astype(dtype),
            "bx": np.zeros(3 * hidden, dtype=dtype),
            "bh": np.zeros(3 * hidden, dtype=dtype),
        }
        self.grads = {k_: np.zeros_like(v) for k_, v in self.params.items()}

    def step(self, h: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        if h.shape[-1] != self.hidden:
            raise DimensionError(f"hidden shape {h.shape} does not match cell size {self.hidden}")
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"input shape {x.shape} does not match cell input size {self.in_dim}")
        H = self.hidden
        gx = x @ self.params["Wx"] + self.params["bx"]
        gh = h @ self.params["Wh"] + self.params["bh"]
        r = sigmoid(gx[..., :H] + gh[..., :H])
        z = sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
        hn = gh[..., 2 * H:]
        n = np.tanh(gx[..., 2 * H:] + r * hn)
        h_new = (1 - z) * n + z * h
        return h_new, (h, x, r, z, n, hn)

    def step_backward(self, dh_new: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray]:
        h, x, r, z, n, hn = cache
        dn = dh_new * (1 - z)
        dz = dh_new * (h - n)
        dh = dh_new * z
        dan = dn * (1 - n * n)
        dr = dan * hn
        dhn = dan * r
        dar = dr * r * (1 - r)
        daz = dz * z * (1 - z)
        dgx = np.concatenate([dar, daz, dan], axis=-1)
        dgh = np.concatenate([dar, daz, dhn], axis=-1)
        self.grads["Wx"] += x.reshape(-1, self.in_dim).T @ dgx.reshape(-1, 3 * self.hidden)
        self.grads["Wh"] += h.reshape(-1, self.hidden).T @ dgh.reshape(-1, 3 * self.hidden)
        self.grads["bx"] += dgx.reshape(-1, 3 * self.hidden).sum(axis=0)
        self.grads["bh"] += dgh.reshape(-1, 3 * self.hidden).sum(axis=0)
        dx = dgx @ self.params["Wx"].T
        dh = dh + dgh @ self.params["Wh"].T
        return dh, dx


class GRU(Module):
    """Unrolls a ``GRUCell`` over padded batches and returns the last valid state.

    ``forward(x, lengths)`` with ``x`` of shape (B, S, in_dim). Steps at or beyond
    a row's length leave its state untouched, so length 0 yields the zero state.
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator | None = None) -> None:
        super().__init__()
        self.cell = GRUCell(in_dim, hidden, rng=rng)
        self._caches: list = []

    def forward(self, x: np.ndarray, lengths: np.ndarray | None = None) -> np.ndarray:
        B, S, _ = x.shape
        if lengths is None:
            lengths = np.full(B, S)
        h = np.zeros((B, self.cell.hidden), dtype=x.dtype)
        self._caches = []
        for t in range(S):
            mask = (lengths > t).astype(x.dtype)[:, None]
            h_new, cache = self.cell.step(h, x[:, t])
            self._caches.append((cache, mask))
            h = mask * h_new + (1 - mask) * h
        self._shape = x.shape
        return h

    def backward(self, dh: np.ndarray) -> np.ndarray:
        dx = np.zeros(self._shape, dtype=dh.dtype)
        for t in range(len(self._caches) - 1, -1, -1):
            cache, mask = self._caches[t]
            dh_prev, dxt = self.cell.step_backward(dh * mask, cache)
            dx[:, t] = dxt
            dh = dh_prev + dh * (1 - mask)
        return dx
