"""Small dense neural-network engine in float64 numpy.

Layers cache what they need during a train-mode forward pass and consume
the cache in ``backward``. Parameters are plain numpy arrays that the
optimizer updates in place, so a network is just a list of layers.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidArgumentError, InvalidBatchError, ShapeError, StateError

ACTIVATIONS = ("relu", "sigmoid", "linear")
PROB_EPS = 1e-7

# (layer index, parameter name) -> array
GradientSet = Dict[Tuple[int, str], np.ndarray]


def he_init(fan_in: int, rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a (rows, cols) matrix from N(0, 2 / fan_in)."""
    if fan_in < 1:
        raise InvalidArgumentError(f"fan_in must be >= 1, got {fan_in}")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(rows, cols))


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class DenseLayer:
    """Affine map, optional batch norm, then an activation.

    ``weight`` has shape (out, in) so the forward pass is ``x @ weight.T``.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        activation: str = "relu",
        batchnorm: bool = False,
        rng: Optional[np.random.Generator] = None,
        bn_momentum: float = 0.1,
        bn_epsilon: float = 1e-5,
    ):
        if activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {activation!r}")
        if in_features < 1 or out_features < 1:
            raise InvalidArgumentError("layer widths must be >= 1")
        rng = rng if rng is not None else np.random.default_rng()
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation
        self.has_batchnorm = batchnorm
        self.bn_momentum = bn_momentum
        self.bn_epsilon = bn_epsilon

        self.weight = he_init(in_features, out_features, in_features, rng)
        self.bias = np.zeros(out_features)
        if batchnorm:
            self.bn_gamma = np.ones(out_features)
            self.bn_beta = np.zeros(out_features)
            self.bn_running_mean = np.zeros(out_features)
            self.bn_running_var = np.ones(out_features)

        self.grads: Dict[str, np.ndarray] = {}
        self._cache: Optional[dict] = None

    # parameters -----------------------------------------------------------

    def param_names(self) -> Tuple[str, ...]:
        if self.has_batchnorm:
            return ("weight", "bias", "bn_gamma", "bn_beta")
        return ("weight", "bias")

    def buffer_names(self) -> Tuple[str, ...]:
        return ("bn_running_mean", "bn_running_var") if self.has_batchnorm else ()

    def parameters(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.param_names()}

    # forward --------------------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"layer expects input width {self.in_features}, got shape {x.shape}"
            )
        z = x @ self.weight.T + self.bias
        cache = {"x": x}
        if self.has_batchnorm:
            z = self._batchnorm_forward(z, train, cache)
        out = self._activate(z)
        if self.activation != "linear":
            cache["out"] = out
        self._cache = cache if train else None
        return out

    def _batchnorm_forward(self, z: np.ndarray, train: bool, cache: dict) -> np.ndarray:
        if not train:
            inv_std = 1.0 / np.sqrt(self.bn_running_var + self.bn_epsilon)
            return (z - self.bn_running_mean) * inv_std * self.bn_gamma + self.bn_beta
        n = z.shape[0]
        if n < 2:
            raise InvalidBatchError("batch norm in train mode needs at least 2 rows")
        mean = z.sum(axis=0) / n
        centered = z - mean
        var = (centered * centered).sum(axis=0) / n
        inv_std = 1.0 / np.sqrt(var + self.bn_epsilon)
        z_hat = centered * inv_std
        m = self.bn_momentum
        self.bn_running_mean = (1.0 - m) * self.bn_running_mean + m * mean
        # running variance tracks the unbiased estimate
        self.bn_running_var = (1.0 - m) * self.bn_running_var + m * var * (n / (n - 1))
        cache["z_hat"] = z_hat
        cache["inv_std"] = inv_std
        return z_hat * self.bn_gamma + self.bn_beta

    def _activate(self, z: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        if self.activation == "sigmoid":
            return sigmoid(z)
        return z

    # backward -------------------------------------------------------------

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Consume the forward cache, fill ``self.grads`` and return dL/dx."""
        cache = self._cache
        if cache is None:
            raise StateError("backward called without a train-mode forward pass")
        self._cache = None
        if self.activation == "relu":
            g = grad_out * (cache["out"] > 0)
        elif self.activation == "sigmoid":
            s = cache["out"]
            g = grad_out * s * (1.0 - s)
        else:
            g = grad_out

        if self.has_batchnorm:
            z_hat = cache["z_hat"]
            self.grads["bn_gamma"] = (g * z_hat).sum(axis=0)
            self.grads["bn_beta"] = g.sum(axis=0)
            n = g.shape[0]
            g_hat = g * self.bn_gamma
            g = cache["inv_std"] * (
                g_hat - g_hat.sum(axis=0) / n - z_hat * ((g_hat * z_hat).sum(axis=0) / n)
            )

        self.grads["weight"] = g.T @ cache["x"]
        self.grads["bias"] = g.sum(axis=0)
        return g @ self.weight


class MLP:
    """An ordered stack of dense layers.

    All trainable parameters live in one contiguous vector ``flat_params``;
    each layer attribute is a reshaped view into it.
    """

    def __init__(self, layers: Sequence[DenseLayer]):
        if not layers:
            raise InvalidArgumentError("an MLP needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_features != nxt.in_features:
                raise ShapeError(
                    f"layer widths do not chain: {prev.out_features} -> {nxt.in_features}"
                )
        self.layers: List[DenseLayer] = list(layers)
        self._flatten()

    def _flatten(self) -> None:
        slots = [(layer, name) for layer in self.layers for name in layer.param_names()]
        self.flat_params = np.empty(sum(getattr(l, n).size for l, n in slots))
        offset = 0
        for layer, name in slots:
            arr = getattr(layer, name)
            view = self.flat_params[offset : offset + arr.size].reshape(arr.shape)
            view[...] = arr
            setattr(layer, name, view)
            offset += arr.size

    @classmethod
    def build(
        cls,
        widths: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "linear",
        hidden_batchnorm: bool = True,
    ) -> "MLP":
        """Stack layers ``widths[0] -> ... -> widths[-1]``; the last one gets no BN."""
        if len(widths) < 2:
            raise InvalidArgumentError("need at least input and output widths")
        layers = []
        for i, (w_in, w_out) in enumerate(zip(widths, widths[1:])):
            last = i == len(widths) - 2
            layers.append(
                DenseLayer(
                    w_in,
                    w_out,
                    activation=output_activation if last else hidden_activation,
                    batchnorm=False if last else hidden_batchnorm,
                    rng=rng,
                )
            )
        return cls(layers)

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    @property
    def out_features(self) -> int:
        return self.layers[-1].out_features

    @property
    def widths(self) -> List[int]:
        return [self.layers[0].in_features] + [l.out_features for l in self.layers]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    __call__ = forward

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def parameters(self) -> Dict[Tuple[int, str], np.ndarray]:
        return {
            (i, name): arr
            for i, layer in enumerate(self.layers)
            for name, arr in layer.parameters().items()
        }

    def flat_gradients(self) -> np.ndarray:
        """Gradients concatenated in ``flat_params`` order."""
        return np.concatenate(
            [layer.grads[name].reshape(-1) for layer in self.layers for name in layer.param_names()]
        )

    def gradients(self) -> GradientSet:
        return {
            (i, name): layer.grads[name]
            for i, layer in enumerate(self.layers)
            for name in layer.param_names()
        }

    def named_arrays(self) -> Iterator[Tuple[int, str, np.ndarray]]:
        """Parameters and batch-norm buffers, in a stable order."""
        for i, layer in enumerate(self.layers):
            for name in layer.param_names() + layer.buffer_names():
                yield i, name, getattr(layer, name)

    def state(self) -> Dict[Tuple[int, str], np.ndarray]:
        return {(i, name): arr.copy() for i, name, arr in self.named_arrays()}

    def load_state(self, state: Dict[Tuple[int, str], np.ndarray]) -> None:
        for (i, name), arr in state.items():
            current = getattr(self.layers[i], name)
            if current.shape != arr.shape:
                raise ShapeError(f"state shape mismatch at layer {i} {name}")
            if name in self.layers[i].param_names():
                current[...] = arr
            else:
                setattr(self.layers[i], name, arr.copy())

    def copy(self) -> "MLP":
        clone = copy.deepcopy(self)
        for layer in clone.layers:
            layer._cache = None
        # deepcopy detaches the views from the flat vector
        clone._flatten()
        return clone


class GradientReversal:
    """Identity forward; backward multiplies the upstream gradient by ``-coeff``."""

    def __init__(self, coeff: float):
        if coeff < 0:
            raise InvalidArgumentError("reversal coefficient must be nonnegative")
        self.coeff = coeff

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return -self.coeff * grad_out


def gradient_reversal(x: np.ndarray, coeff: float) -> np.ndarray:
    return GradientReversal(coeff).forward(x)


# losses -------------------------------------------------------------------


def _check_prob_pair(y_hat: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    y_hat = np.asarray(y_hat, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if y_hat.shape != y.shape:
        raise ShapeError(f"prediction/label length mismatch: {y_hat.size} vs {y.size}")
    if y.size == 0:
        raise InvalidArgumentError("empty batch")
    return y_hat, y


def bce_loss(y_hat, y) -> float:
    """Mean binary cross-entropy with predictions clamped to [eps, 1 - eps]."""
    y_hat, y = _check_prob_pair(y_hat, y)
    p = np.clip(y_hat, PROB_EPS, 1.0 - PROB_EPS)
    return float(np.mean(-y * np.log(p) - (1.0 - y) * np.log1p(-p)))


def bce_grad(y_hat, y) -> np.ndarray:
    """Gradient of :func:`bce_loss` w.r.t. ``y_hat`` (zero inside the clamp)."""
    y_hat, y = _check_prob_pair(y_hat, y)
    inside = (y_hat > PROB_EPS) & (y_hat < 1.0 - PROB_EPS)
    p = np.where(inside, y_hat, 0.5)
    g = (p - y) / (p * (1.0 - p)) / y.size
    return np.where(inside, g, 0.0)


def mse_recon_loss(x_hat: np.ndarray, x: np.ndarray) -> float:
    """Per-row squared Euclidean error, averaged over rows."""
    if x_hat.shape != x.shape:
        raise ShapeError(f"reconstruction shape {x_hat.shape} != input shape {x.shape}")
    if x.shape[0] == 0:
        raise InvalidArgumentError("empty batch")
    diff = x_hat - x
    return float(np.sum(diff * diff) / x.shape[0])


def mse_recon_grad(x_hat: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x_hat.shape != x.shape:
        raise ShapeError(f"reconstruction shape {x_hat.shape} != input shape {x.shape}")
    return 2.0 * (x_hat - x) / x.shape[0]


LOSSES = {
    "bce": (bce_loss, bce_grad),
    "mse": (mse_recon_loss, mse_recon_grad),
}


def backward(network: MLP, x: np.ndarray, target: np.ndarray, loss: str = "bce") -> Tuple[float, GradientSet]:
    """Train-mode forward, scalar loss, full reverse pass. Returns (loss, grads)."""
    loss_fn, grad_fn = LOSSES[loss]
    out = network.forward(x, train=True)
    if loss == "bce":
        out = out.reshape(-1)
    value = loss_fn(out, target)
    g = grad_fn(out, target)
    network.backward(g.reshape(-1, network.out_features))
    return value, network.gradients()


# optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Dict = field(default_factory=dict)
    second_moment: Dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return copy.deepcopy(self)


def adam_step(params: Dict, grads: Dict, state: AdamState) -> Tuple[Dict, AdamState]:
    """Bias-corrected Adam update; returns new arrays and a new state.

    An all-zero gradient set is a no-op: parameters, moments and step count
    are returned unchanged.
    """
    if set(params) != set(grads):
        raise ShapeError("parameter and gradient keys differ")
    for key, p in params.items():
        if grads[key].shape != p.shape:
            raise ShapeError(f"gradient shape {grads[key].shape} != parameter shape {p.shape} at {key}")
        m = state.first_moment.get(key)
        if m is not None and m.shape != p.shape:
            raise ShapeError(f"optimizer state shape mismatch at {key}")
    if not any(g.any() for g in grads.values()):
        return {k: p.copy() for k, p in params.items()}, state.copy()

    t = state.step_count + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out, m_all, v_all = {}, {}, {}
    for key, p in params.items():
        g = grads[key]
        m = state.first_moment.get(key, np.zeros_like(p))
        v = state.second_moment.get(key, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        out[key] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        m_all[key], v_all[key] = m, v
    new_state = AdamState(
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        epsilon=state.epsilon,
        step_count=t,
        first_moment=m_all,
        second_moment=v_all,
    )
    return out, new_state


class Adam:
    """Adam bound to one network, updating its flat parameter vector in place.

    The per-parameter moments in ``state`` are views into two flat
    accumulators laid out like ``network.flat_params``.
    """

    def __init__(self, network: MLP, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if lr <= 0:
            raise InvalidArgumentError("learning rate must be positive")
        self.network = network
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
        self._m = np.zeros_like(network.flat_params)
        self._v = np.zeros_like(network.flat_params)
        offset = 0
        for key, p in network.parameters().items():
            self.state.first_moment[key] = self._m[offset : offset + p.size].reshape(p.shape)
            self.state.second_moment[key] = self._v[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    def step(self) -> None:
        """Apply one update from the gradients of the last backward pass."""
        g = self.network.flat_gradients()
        if not g.any():
            return
        st = self.state
        st.step_count += 1
        t = st.step_count
        m, v = self._m, self._v
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * (g * g)
        self.network.flat_params -= st.lr * (m / (1.0 - st.beta1**t)) / (
            np.sqrt(v / (1.0 - st.beta2**t)) + st.epsilon
        )
