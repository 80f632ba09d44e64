"""Small dense numerical kernel: residual ReLU MLPs with hand-written
backpropagation and an Adam optimizer.

Matrices are plain numpy arrays.  Weights are stored as ``(fan_in, fan_out)``
so a batch of row vectors is pushed through a layer as ``x @ W + b``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError


class ResidualMlp:
    """Feed-forward network with ReLU hidden layers and a linear output.

    ``skips`` maps a layer index ``j`` to a source index ``i <= j``; the
    output of layer ``j`` then becomes ``relu(a_j @ W_j + b_j) + a_i`` where
    ``a_i`` is the activation entering layer ``i`` (``a_0`` is the input).
    """

    def __init__(self, weights, biases, skips=None):
        if len(weights) != len(biases) or not weights:
            raise ConfigError("need one bias per weight matrix and at least one layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.skips = dict(skips or {})
        widths = self.widths
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigError(f"layer {j}: weight {w.shape} and bias {b.shape} disagree")
            if j > 0 and w.shape[0] != self.weights[j - 1].shape[1]:
                raise ConfigError(
                    f"layer {j} expects width {w.shape[0]}, previous layer gives "
                    f"{self.weights[j - 1].shape[1]}"
                )
        for j, i in self.skips.items():
            if not 0 <= i <= j < len(self.weights):
                raise ConfigError(f"skip {i}->{j} does not point backwards")
            if widths[i] != widths[j + 1]:
                raise ConfigError(f"skip {i}->{j} joins widths {widths[i]} and {widths[j + 1]}")

    @classmethod
    def build(cls, widths, skips=None, rng=None):
        """He-uniform weights, zero biases."""
        rng = np.random.default_rng(rng)
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, skips)

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    @property
    def params(self):
        """Parameter arrays in the order W0, b0, W1, b1, ...  (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def flat_params(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ConfigError(f"expected {self.n_params} parameters, got {flat.size}")
        pos = 0
        for p in self.params:
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    def copy(self):
        return ResidualMlp(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.skips
        )

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ConfigError(f"input width {x.shape[-1]} != network input width {self.in_dim}")
        return x

    def forward(self, x):
        return self.forward_cache(x)[0]

    def forward_cache(self, x):
        """Run the network and keep what ``backward`` needs.

        Accepts a single vector or a batch of row vectors.
        """
        x = self._check_input(x)
        acts = [x]
        pre = []
        last = len(self.weights) - 1
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[j] @ w + b
            pre.append(z)
            a = z if j == last else np.maximum(z, 0.0)
            if j in self.skips:
                a = a + acts[self.skips[j]]
            acts.append(a)
        return acts[-1], (acts, pre)

    def backward(self, cache, grad_out):
        """Vector-Jacobian product.

        Returns ``(grad_input, grads)`` with ``grads`` aligned to ``params``.
        """
        acts, pre = cache
        n = len(self.weights)
        ga = [None] * (n + 1)
        ga[n] = np.asarray(grad_out, dtype=np.float64)
        grads = [None] * (2 * n)
        for j in range(n - 1, -1, -1):
            g = ga[j + 1]
            if j in self.skips:
                i = self.skips[j]
                ga[i] = g if ga[i] is None else ga[i] + g
            gz = g if j == n - 1 else g * (pre[j] > 0)
            a = acts[j]
            if a.ndim == 1:
                grads[2 * j] = np.outer(a, gz)
                grads[2 * j + 1] = gz.copy()
            else:
                grads[2 * j] = a.T @ gz
                grads[2 * j + 1] = gz.sum(axis=0)
            gin = gz @ self.weights[j].T
            ga[j] = gin if ga[j] is None else ga[j] + gin
        return ga[0], grads


def mse(pred, target):
    diff = np.asarray(pred, dtype=np.float64) - target
    return float(np.mean(diff * diff))


def mse_grad(pred, target):
    """d mean((pred - target)^2) / d pred."""
    diff = np.asarray(pred, dtype=np.float64) - target
    return 2.0 * diff / diff.size


def backward_mse(net, x, target):
    """Mean-squared-error loss (averaged over every output element) and its
    parameter gradients."""
    out, cache = net.forward_cache(x)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != out.shape:
        raise ConfigError(f"target shape {target.shape} != output shape {out.shape}")
    _, grads = net.backward(cache, mse_grad(out, target))
    return mse(out, target), grads


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    learning_rate: float = 1e-3

    @classmethod
    def for_params(cls, params, **hyper):
        return cls(
            [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper
        )


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ConfigError("params, gradients and moments must have equal length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient passed to adam_step")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state
