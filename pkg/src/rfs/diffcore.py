"""Dense MLPs with hand-written backprop, Adam, and finite-difference checks.

Parameters are stored in single precision; every forward/backward pass runs
in float64 so that reductions and gradient checks are accurate.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (z > 0.0)
    if name == "tanh":
        return g * (1.0 - h * h)
    return g


class Mlp:
    """Fully connected network ``y = f_L(W_L ... f_1(W_1 x + b_1) ... + b_L)``.

    ``weights[i]`` has shape ``(layer_dims[i+1], layer_dims[i])``. Inputs may be
    a single vector or a batch of row vectors.
    """

    def __init__(
        self,
        layer_dims: Sequence[int],
        activations: Sequence[str] | None = None,
        hidden_activation: str = "relu",
        rng: np.random.Generator | None = None,
        out_scale: float = 1.0,
        dtype=np.float32,
    ):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ValueError(f"layer_dims must hold >= 2 positive sizes, got {dims}")
        n_layers = len(dims) - 1
        if activations is None:
            activations = [hidden_activation] * (n_layers - 1) + ["identity"]
        activations = list(activations)
        if len(activations) != n_layers:
            raise ValueError(f"need {n_layers} activations, got {len(activations)}")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.layer_dims = dims
        self.activations = activations
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i in range(n_layers):
            bound = 1.0 / np.sqrt(dims[i])
            w = rng.uniform(-bound, bound, size=(dims[i + 1], dims[i]))
            b = rng.uniform(-bound, bound, size=dims[i + 1])
            if i == n_layers - 1:
                w, b = w * out_scale, b * out_scale
            self.weights.append(w.astype(dtype))
            self.biases.append(b.astype(dtype))

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order ``[W0, b0, W1, b1, ...]`` (live views)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, arrays: Sequence[np.ndarray]) -> None:
        for i in range(len(self.weights)):
            self.weights[i][...] = arrays[2 * i]
            self.biases[i][...] = arrays[2 * i + 1]

    def copy(self) -> "Mlp":
        new = object.__new__(Mlp)
        new.layer_dims = list(self.layer_dims)
        new.activations = list(self.activations)
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        return new

    def astype(self, dtype) -> "Mlp":
        new = self.copy()
        new.weights = [w.astype(dtype) for w in new.weights]
        new.biases = [b.astype(dtype) for b in new.biases]
        return new

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def _check_input(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of length {self.in_dim}, got shape {np.shape(x)}")
        return x, single

    def forward(self, x) -> np.ndarray:
        h, single = self._check_input(x)
        for w, b, a in zip(self.weights, self.biases, self.activations):
            h = _act(a, h @ w.T.astype(np.float64) + b)
        return h[0] if single else h

    __call__ = forward

    def forward_cache(self, x):
        """Forward pass that also returns what :meth:`backward` needs."""
        h, single = self._check_input(x)
        hs, zs = [h], []
        for w, b, a in zip(self.weights, self.biases, self.activations):
            z = h @ w.T.astype(np.float64) + b
            h = _act(a, z)
            zs.append(z)
            hs.append(h)
        cache = (hs, zs, single)
        return (h[0] if single else h), cache

    def backward(self, cache, output_grad) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(output * output_grad)``.

        Returns ``(param_grads, input_grad)`` where ``param_grads`` follows the
        order of :meth:`params`.
        """
        hs, zs, single = cache
        g = np.asarray(output_grad, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != hs[-1].shape:
            raise ValueError(f"output_grad shape {g.shape} != output shape {hs[-1].shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        for i in reversed(range(len(self.weights))):
            g = _act_grad(self.activations[i], zs[i], hs[i + 1], g)
            grads[2 * i] = g.T @ hs[i]
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].astype(np.float64)
        return grads, (g[0] if single else g)


def mlp_forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def mlp_backward(net: Mlp, x, output_grad):
    _, cache = net.forward_cache(x)
    return net.backward(cache, output_grad)


# ---------------------------------------------------------------- optimisation


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float | None):
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return [np.asarray(g, dtype=np.float64) for g in grads], norm
    scale = max_norm / norm
    return [np.asarray(g, dtype=np.float64) * scale for g in grads], norm


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    # norm of the gradient actually applied on the last step (after clipping)
    last_applied_norm: float = field(default=0.0, compare=False)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls(
            first_moment=[np.zeros(p.shape) for p in params],
            second_moment=[np.zeros(p.shape) for p in params],
            learning_rate=learning_rate,
            **kw,
        )


def adam_step(params, grads, state: AdamState, max_grad_norm: float | None = None):
    """One clipped Adam update. Returns ``(new_params, new_state)``; inputs untouched."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("params, grads and moments must have the same length")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"param/grad shape mismatch {np.shape(p)} vs {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to adam_step")
    clipped, _ = clip_by_global_norm(grads, max_grad_norm)
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, clipped, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p = np.asarray(p)
        upd = p.astype(np.float64) - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_p.append(upd.astype(p.dtype))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(
        first_moment=new_m,
        second_moment=new_v,
        learning_rate=state.learning_rate,
        beta1=b1,
        beta2=b2,
        epsilon=state.epsilon,
        step_count=t,
        last_applied_norm=global_norm(clipped),
    )
    return new_p, new_state


class Adam:
    """In-place Adam over a fixed list of parameter arrays."""

    def __init__(self, params: Sequence[np.ndarray], lr: float, max_grad_norm: float | None = None, **kw):
        self.params = list(params)
        self.max_grad_norm = max_grad_norm
        self.state = AdamState.zeros_like(self.params, learning_rate=lr, **kw)

    def step(self, grads: Sequence[np.ndarray]) -> float:
        """Apply ``grads``; returns the pre-clipping global norm."""
        pre = global_norm(grads)
        new_p, self.state = adam_step(self.params, grads, self.state, self.max_grad_norm)
        for p, q in zip(self.params, new_p):
            p[...] = q
        return pre


# ---------------------------------------------------------- gradient checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))))


def numeric_grad(f: Callable[[], float], arrays: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``f()`` w.r.t. every entry of ``arrays`` (perturbed in place)."""
    out = []
    for arr in arrays:
        g = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def grad_check(net: Mlp, loss: Callable[[np.ndarray], tuple[float, np.ndarray]], x, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``loss(y)`` returns ``(value, dvalue/dy)``. The check runs on a float64
    copy of ``net`` and also covers the input gradient.
    """
    net64 = net.astype(np.float64)
    x64 = np.array(x, dtype=np.float64)
    y, cache = net64.forward_cache(x64)
    _, dy = loss(y)
    grads, gx = net64.backward(cache, dy)

    def f():
        return float(loss(net64.forward(x64))[0])

    num = numeric_grad(f, net64.params(), h)
    num_x = numeric_grad(f, [x64], h)
    return max(max_relative_error(grads, num), relative_error(gx, num_x[0]))


def nudge_from_kinks(net: Mlp, x, margin: float = 1e-3) -> Mlp:
    """Shift biases so no ReLU pre-activation for ``x`` lies within ``margin`` of 0."""
    net = net.copy()
    h, _ = net._check_input(x)
    for i, (w, b, a) in enumerate(zip(net.weights, net.biases, net.activations)):
        z = h @ w.T.astype(np.float64) + b
        if a == "relu":
            close = np.abs(z) < margin
            if close.any():
                shift = np.where(close.any(axis=0), 2 * margin, 0.0)
                net.biases[i] = (b + shift).astype(b.dtype)
                z = h @ w.T.astype(np.float64) + net.biases[i]
        h = _act(a, z)
    return net
