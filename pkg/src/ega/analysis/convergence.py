"""Convergence probes on a strongly convex least-squares federation.

Every configuration runs full participation with one full-batch local step,
so the noiseless run is exactly gradient descent on the mean objective and
any gap that remains is due to quantization and decode error.
"""

from dataclasses import dataclass, replace

import numpy as np

from ..codec import GaussianNoiseCodec, IdentityCodec
from ..fedsim.loop import FlConfig, run_federated
from ..fedsim.tasks import make_quadratic_clients, quadratic_optimum
from ..seeding import make_rng


@dataclass
class ProbeConfig:
    label: str
    ega: bool = True
    s: int = 64
    n_policy: str = "fixed"
    n0: float | None = None  # None: safety_factor x largest first-round client update
    sigma: float = 0.0  # decode error std in quantized units
    quantize: bool = True
    n_decay: float = 0.97
    safety_factor: float = 2.0

    @property
    def noise_scale(self):
        """``n0^2 / s^2``; zero for the noiseless plaintext run."""
        if not self.ega:
            return 0.0
        return (self.n0 or 1.0) ** 2 / self.s**2


@dataclass
class ProbeResult:
    config: ProbeConfig
    initial_gap: float
    final_gaps: list
    steady_gaps: list
    n0: float

    @property
    def final_gap(self):
        return float(np.mean(self.final_gaps))

    @property
    def steady_gap(self):
        return float(np.mean(self.steady_gaps))

    @property
    def relative_final_gap(self):
        return self.final_gap / self.initial_gap

    def row(self):
        c = self.config
        return {
            "label": c.label, "ega": int(c.ega), "s": c.s, "n_policy": c.n_policy,
            "n0": self.n0, "sigma": c.sigma, "noise_scale": self.n0**2 / c.s**2 if c.ega else 0.0,
            "initial_gap": self.initial_gap, "final_gap": self.final_gap,
            "steady_gap": self.steady_gap,
        }


@dataclass
class QuadraticProblem:
    task: object
    clients: list
    w_star: np.ndarray
    f_star: float
    mu: float
    lipschitz: float

    @property
    def stacked(self):
        return (
            np.concatenate([c.x for c in self.clients]),
            np.concatenate([c.y for c in self.clients]),
        )


def make_problem(num_clients=10, dim=10, rows_per_client=50, seed=0, drift=0.3):
    rng = make_rng(seed, "quadratic")
    task, clients = make_quadratic_clients(num_clients, dim, rows_per_client, rng, drift=drift)
    w_star, f_star, mu, lip = quadratic_optimum(clients)
    return QuadraticProblem(task, clients, w_star, f_star, mu, lip)


def first_round_max_update(problem, lr):
    w0 = problem.task.init_params()
    return max(
        float(np.max(np.abs(lr * problem.task.grad(w0, c.x, c.y)))) for c in problem.clients
    )


def run_probe(problem, probe, rounds, seeds, lr=None, steady_fraction=0.2):
    """Run one probe configuration over ``seeds``."""
    lr = lr or 1.0 / problem.lipschitz
    m = len(problem.clients)
    dim = problem.task.dim
    n0 = probe.n0 or probe.safety_factor * first_round_max_update(problem, lr)
    w0 = problem.task.init_params()
    initial_gap = problem.task.loss(w0, *problem.stacked) - problem.f_star
    finals, steadies = [], []
    tail = max(1, int(rounds * steady_fraction))
    for seed in seeds:
        cfg = FlConfig(
            rounds=rounds, clients_per_round=m, local_epochs=1, learning_rate=lr,
            local_batch_size=None, s=probe.s, n_policy=probe.n_policy, n0=n0,
            n_decay=probe.n_decay, safety_factor=probe.safety_factor, seed=seed,
            ega_enabled=probe.ega, quantize_enabled=probe.quantize,
        )
        if probe.sigma > 0:
            codec = GaussianNoiseCodec(dim, probe.s, m, probe.sigma, make_rng(seed, "decode-noise"))
        else:
            codec = IdentityCodec(dim, probe.s, m)
        _, metrics = run_federated(cfg, problem.task, problem.clients, problem.stacked, codec)
        gaps = np.array([r.loss for r in metrics]) - problem.f_star
        finals.append(float(gaps[-1]))
        steadies.append(float(np.mean(gaps[-tail:])))
    return ProbeResult(probe, float(initial_gap), finals, steadies, n0)


def convergence_probe(problem, probes, rounds=500, seeds=(0, 1, 2), lr=None):
    """Gap table, one row per probe, ordered by the noise scale ``n^2/s^2``."""
    results = [run_probe(problem, p, rounds, seeds, lr) for p in probes]
    return sorted(results, key=lambda r: (r.config.ega, r.n0**2 / r.config.s**2))


def default_probes(sigma=1.0):
    base = ProbeConfig("fixed-n s=32", s=32, sigma=sigma)
    return [
        ProbeConfig("plaintext", ega=False),
        base,
        replace(base, label="fixed-n s=64", s=64),
        replace(base, label="adaptive-n s=32", n_policy="adaptive"),
        replace(base, label="decay-n s=32", n_policy="decay"),
    ]
