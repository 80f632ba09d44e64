"""Learning tasks over flat parameter vectors."""

import numpy as np

from .data import ClientDataset


class LinearClassifier:
    """Multinomial logistic regression; parameters are ``W`` (features x
    classes, row-major) followed by the class biases."""

    kind = "linear_classifier"

    def __init__(self, n_features=784, n_classes=10):
        self.n_features = n_features
        self.n_classes = n_classes

    @property
    def dim(self):
        return (self.n_features + 1) * self.n_classes

    def init_params(self, rng=None):
        return np.zeros(self.dim)

    def _unpack(self, w):
        cut = self.n_features * self.n_classes
        return w[:cut].reshape(self.n_features, self.n_classes), w[cut:]

    def _probs(self, w, x):
        weights, bias = self._unpack(w)
        logits = x @ weights + bias
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def loss(self, w, x, y):
        p = self._probs(w, x)
        return float(-np.mean(np.log(p[np.arange(len(y)), y] + 1e-300)))

    def grad(self, w, x, y):
        p = self._probs(w, x)
        p[np.arange(len(y)), y] -= 1.0
        p /= len(y)
        return np.concatenate([(x.T @ p).ravel(), p.sum(axis=0)])

    def accuracy(self, w, x, y):
        weights, bias = self._unpack(w)
        return float(np.mean(np.argmax(x @ weights + bias, axis=1) == y))


class SyntheticQuadratic:
    """Least squares ``f_i(w) = ||A_i w - b_i||^2 / (2 r)`` over a client's
    ``r`` rows; strongly convex when the stacked ``A`` has full column rank."""

    kind = "synthetic_quadratic"

    def __init__(self, dim):
        self._dim = dim

    @property
    def dim(self):
        return self._dim

    def init_params(self, rng=None):
        return np.zeros(self._dim)

    def loss(self, w, x, y):
        r = x @ w - y
        return float(0.5 * np.mean(r * r))

    def grad(self, w, x, y):
        return x.T @ (x @ w - y) / len(y)

    def accuracy(self, w, x, y):
        return float("nan")


def make_quadratic_clients(num_clients, dim, rows_per_client, rng, noise=0.1, drift=0.3):
    """Heterogeneous least-squares clients sharing a planted solution plus
    per-client drift.  Returns ``(task, clients)``."""
    w_true = rng.normal(size=dim)
    clients = []
    for cid in range(num_clients):
        a = rng.normal(size=(rows_per_client, dim)) * rng.uniform(0.5, 1.5, size=dim)
        shift = drift * rng.normal(size=dim)
        b = a @ (w_true + shift) + noise * rng.normal(size=rows_per_client)
        clients.append(ClientDataset(cid, a, b))
    return SyntheticQuadratic(dim), clients


def quadratic_optimum(clients):
    """Minimizer, optimal value and curvature range (mu, L) of the mean of
    client objectives, assuming equal row counts."""
    a = np.concatenate([c.x for c in clients])
    b = np.concatenate([c.y for c in clients])
    w_star = np.linalg.lstsq(a, b, rcond=None)[0]
    r = a @ w_star - b
    hess = a.T @ a / len(b)
    eig = np.linalg.eigvalsh(hess)
    return w_star, float(0.5 * np.mean(r * r)), float(eig[0]), float(eig[-1])


def global_loss(task, w, clients):
    return float(np.mean([task.loss(w, c.x, c.y) for c in clients]))
