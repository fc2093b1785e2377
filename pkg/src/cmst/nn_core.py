"""Small dense-network engine: layers, MLPs, manual backprop, optimizers.

Everything is float64 numpy. Row-major batches: ``x`` has shape (batch, features).
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError, StateError

ACTIVATIONS = ("relu", "sigmoid", "identity")


def sigmoid(z):
    # tanh form never overflows and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Rng:
    """Seed plus named, independent substreams.

    ``Rng(7).stream("init/g_v")`` always yields the same generator state, and
    two different labels yield unrelated streams.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) % (1 << 64)

    def stream(self, label: str) -> np.random.Generator:
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        key = int.from_bytes(digest[:8], "little")
        return np.random.default_rng(np.random.SeedSequence([self.seed, key]))


class Dense:
    """Fully connected layer ``a = act(x @ W.T + b)`` with W of shape (out, in)."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "relu"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.W = np.zeros((out_dim, in_dim))
        self.b = np.zeros(out_dim)
        self.activation = activation
        self._x = None
        self._z = None
        self._a = None

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        z = x @ self.W.T + self.b
        if self.activation == "relu":
            a = np.maximum(z, 0.0)
        elif self.activation == "sigmoid":
            a = sigmoid(z)
        else:
            a = z
        self._x, self._z, self._a = x, z, a
        return a

    def backward(self, da: np.ndarray):
        if self._x is None:
            raise StateError("backward called without a preceding forward pass")
        if self.activation == "relu":
            dz = da * (self._z > 0.0)
        elif self.activation == "sigmoid":
            dz = da * self._a * (1.0 - self._a)
        else:
            dz = da
        dW = dz.T @ self._x
        db = dz.sum(axis=0)
        dx = dz @ self.W
        self._x = self._z = self._a = None
        return (dW, db), dx


class MLP:
    """A chain of :class:`Dense` layers."""

    def __init__(self, layers: list[Dense]):
        if not layers:
            raise ShapeError("an MLP needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        self.layers = layers

    @classmethod
    def build(cls, sizes, hidden: str = "relu", output: str = "identity") -> "MLP":
        """``MLP.build([8, 16, 4])`` makes 8->16 (hidden act) -> 4 (output act)."""
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"bad layer sizes {sizes}")
        n = len(sizes) - 1
        return cls([
            Dense(sizes[k], sizes[k + 1], output if k == n - 1 else hidden)
            for k in range(n)
        ])

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(
                f"expected input of shape (batch, {self.input_dim}), got {x.shape}"
            )
        for layer in self.layers:
            x = layer.forward(x)
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite activations in forward pass")
        return x

    __call__ = forward

    def backward(self, upstream: np.ndarray):
        """Return ``(param_grads, input_grad)``; param_grads is ordered like :meth:`params`."""
        last = self.layers[-1]
        if last._a is None:
            raise StateError("backward called without a preceding forward pass")
        if upstream.shape != last._a.shape:
            raise ShapeError(
                f"upstream gradient shape {upstream.shape} != output shape {last._a.shape}"
            )
        grads = []
        g = upstream
        for layer in reversed(self.layers):
            (dW, db), g = layer.backward(g)
            grads.append(db)
            grads.append(dW)
        grads.reverse()
        return grads, g

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.W)
            out.append(layer.b)
        return out

    def set_params(self, values) -> None:
        values = list(values)
        mine = self.params()
        if len(values) != len(mine):
            raise ShapeError("parameter count mismatch")
        for dst, src in zip(mine, values):
            if dst.shape != np.shape(src):
                raise ShapeError(f"parameter shape {np.shape(src)} != {dst.shape}")
            dst[...] = src

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def activation_pattern(self) -> bytes:
        """ReLU on/off pattern of the cached forward pass (used to detect kinks)."""
        parts = [
            np.packbits(layer._z > 0.0).tobytes()
            for layer in self.layers
            if layer.activation == "relu" and layer._z is not None
        ]
        return b"|".join(parts)

    def copy(self) -> "MLP":
        clone = copy.deepcopy(self)
        for layer in clone.layers:
            layer._x = layer._z = layer._a = None
        return clone


def init_params(net: MLP, rng: np.random.Generator) -> MLP:
    """He-normal weights (std sqrt(2/in)), zero biases. Mutates and returns ``net``."""
    for layer in net.layers:
        std = np.sqrt(2.0 / layer.in_dim)
        layer.W[...] = rng.normal(0.0, std, size=layer.W.shape)
        layer.b[...] = 0.0
    return net


def _as_net_list(nets):
    return [nets] if isinstance(nets, MLP) else list(nets)


def finite_diff_grad(loss_fn, nets, eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``loss_fn()`` w.r.t. every parameter of ``nets``.

    ``loss_fn`` takes no arguments and reads the networks' current parameters,
    which are perturbed in place and restored afterwards.
    """
    grads, _ = finite_diff_grad_masked(lambda: (loss_fn(), None), nets, eps)
    return grads


def finite_diff_grad_masked(probe, nets, eps: float = 1e-5):
    """Like :func:`finite_diff_grad`, but ``probe()`` returns ``(loss, signature)``.

    The signature identifies the smooth piece the loss is on (ReLU patterns,
    hinge and abs-value signs, ...). Returns ``(grads, valid)`` where ``valid``
    is False for entries whose +/-eps perturbation changes the signature, i.e.
    parameters sitting within eps of a kink.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, base = probe()
    grads, valid = [], []
    for net in _as_net_list(nets):
        for p in net.params():
            g = np.zeros_like(p)
            ok = np.ones(p.shape, dtype=bool)
            flat, gflat, okflat = p.reshape(-1), g.reshape(-1), ok.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up, sig_up = probe()
                flat[k] = orig - eps
                down, sig_down = probe()
                flat[k] = orig
                up, down = float(up), float(down)
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NumericError("non-finite loss during finite differencing")
                gflat[k] = (up - down) / (2.0 * eps)
                okflat[k] = sig_up == base and sig_down == base
            grads.append(g)
            valid.append(ok)
    return grads, valid


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


def optimizer_step(state: OptimizerState, params, grads) -> list[np.ndarray]:
    """Apply one update in place and return ``params``."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
    lr = state.learning_rate
    if state.kind == "sgd":
        state.step += 1
        for p, g in zip(params, grads):
            p -= lr * g
        return params

    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif [m.shape for m in state.m] != [p.shape for p in params]:
        raise ShapeError("optimizer moments do not match parameter shapes")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params


def param_digest(nets) -> str:
    """SHA-256 over the raw bytes of every parameter; equal digests mean bit-equal weights."""
    h = hashlib.sha256()
    for net in _as_net_list(nets):
        for p in net.params():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()
