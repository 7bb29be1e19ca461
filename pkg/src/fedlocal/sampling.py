"""Keyed randomness: device sampling, minibatches and the stochastic gradient oracle.

All draws come from a counter-based Philox generator keyed by the run seed, with the
counter set from ``(iteration, purpose)``.  Per-device draws at one iteration are the
rows of a single block, so device ``j`` always receives row ``j`` regardless of the
order (or process) in which devices are evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .problem import FederatedProblem, as_model

PURPOSES = {"devices": 0, "minibatch": 1, "noise": 2, "fit": 3, "resample": 4}


def keyed_generator(seed: int, iteration: int, purpose: str) -> np.random.Generator:
    if seed < 0 or iteration < 0:
        raise InvalidArgument("seed and iteration must be non-negative")
    counter = np.array([0, iteration, PURPOSES[purpose], 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=int(seed), counter=counter))


@dataclass(frozen=True)
class RngStream:
    """Identifies one stream of draws: ``(seed, device, iteration, purpose)``.

    ``device`` is ``None`` for server-side draws such as device sampling.
    """

    seed: int
    device: int | None = None
    iteration: int = 0
    purpose: str = "minibatch"

    def generator(self) -> np.random.Generator:
        return keyed_generator(self.seed, self.iteration, self.purpose)


@dataclass(frozen=True)
class DeviceSample:
    """Multiset of sampled device indices (duplicates kept, order as drawn)."""

    members: tuple

    @property
    def K(self) -> int:
        return len(self.members)

    def counts(self, p: int) -> np.ndarray:
        return np.bincount(np.asarray(self.members, dtype=np.int64), minlength=p)


def _cdf(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or np.any(q < 0) or abs(q.sum() - 1.0) > 1e-12:
        raise InvalidArgument("q must be a simplex vector")
    c = np.cumsum(q)
    c[-1] = 1.0
    return c


def _categorical(c: np.ndarray, u: np.ndarray) -> np.ndarray:
    # first index with cdf > u, which never selects a zero-weight device
    return np.searchsorted(c, u, side="right")


def sample_devices(rng: RngStream, q, K: int) -> DeviceSample:
    """Draw ``K`` devices i.i.d. from ``q`` with replacement."""
    if K < 1:
        raise InvalidArgument(f"need K >= 1, got {K}")
    c = _cdf(q)
    u = keyed_generator(rng.seed, rng.iteration, "devices").random(K)
    return DeviceSample(tuple(int(i) for i in _categorical(c, u)))


def sample_devices_batch(seed: int, q, K: int, trials: int) -> np.ndarray:
    """``trials`` independent device samples as a ``(trials, K)`` index array."""
    if K < 1 or trials < 1:
        raise InvalidArgument("need K >= 1 and trials >= 1")
    c = _cdf(q)
    return _categorical(c, keyed_generator(seed, 0, "resample").random((trials, K)))


def _check_batch(problem: FederatedProblem, B: int):
    if B < 1:
        raise InvalidArgument(f"batch size must be >= 1, got {B}")
    for j, o in enumerate(problem.objectives):
        if o.finite_sum and B > o.n:
            raise InvalidArgument(f"batch size {B} exceeds shard size {o.n} of device {j}")


def stochastic_gradients(problem: FederatedProblem, models, B: int, seed: int, t: int) -> np.ndarray:
    """Stochastic gradients of every device at iteration ``t``; row ``j`` uses ``models[j]``.

    Finite-sum shards average ``B`` per-sample gradients drawn with replacement, except
    that ``B == n_j`` is treated as the full batch.  Quadratic shards add Gaussian noise
    with ``E||g~ - g||^2 = noise**2 / B``.
    """
    _check_batch(problem, B)
    W = np.asarray(models, dtype=np.float64)
    p, d = problem.p, problem.d
    objs = problem.objectives
    need_idx = any(o.finite_sum and o.n != B for o in objs)
    need_noise = any((not o.finite_sum) and o.noise > 0 for o in objs)
    U = keyed_generator(seed, t, "minibatch").random((p, B)) if need_idx else None
    Z = keyed_generator(seed, t, "noise").standard_normal((p, d)) if need_noise else None

    stack = problem._stack
    if stack is not None and stack.kind != "quadratic" and need_idx:
        idx = np.minimum((U * stack.n).astype(np.int64), stack.n - 1)
        return stack.minibatch_gradients(W, idx)
    G = problem.local_gradients(W)
    if stack is not None and stack.kind == "quadratic":
        if need_noise:
            scale = np.array([o.noise for o in objs]) / np.sqrt(B * d)
            G = G + scale[:, None] * Z
        return G
    for j, o in enumerate(objs):
        if o.finite_sum and o.n != B:
            idx = np.minimum((U[j] * o.n).astype(np.int64), o.n - 1)
            G[j] = o.batch_gradients(W[j], idx[None, :])[0]
        elif not o.finite_sum and o.noise > 0:
            G[j] = G[j] + o.noise / np.sqrt(B * d) * Z[j]
    return G


def stochastic_gradient(problem: FederatedProblem, j: int, w, B: int, rng: RngStream) -> np.ndarray:
    """Stochastic gradient of device ``j`` at ``w``, drawn from stream ``rng``.

    Returns exactly what the engine's batched oracle gives for device ``j`` at
    iteration ``rng.iteration`` under seed ``rng.seed``.
    """
    problem._check_index(j)
    w = as_model(w, problem.d)
    models = np.broadcast_to(w, (problem.p, problem.d))
    return stochastic_gradients(problem, models, B, rng.seed, rng.iteration)[j]


C1_GRID = np.round(np.arange(0, 101) * 0.1, 10)


def _empirical_variance(problem, j, w, B, trials, gen) -> tuple[float, float]:
    o = problem.objectives[j]
    g = o.gradient(w)
    if o.finite_sum:
        if B == o.n:
            return 0.0, float(g @ g)
        idx = np.minimum((gen.random((trials, B)) * o.n).astype(np.int64), o.n - 1)
        dev = o.batch_gradients(w, idx) - g
        return float(np.mean(np.einsum("ik,ik->i", dev, dev))), float(g @ g)
    if o.noise == 0:
        return 0.0, float(g @ g)
    z = gen.standard_normal((trials, o.d)) * (o.noise / np.sqrt(B * o.d))
    return float(np.mean(np.einsum("ik,ik->i", z, z))), float(g @ g)


def fit_constants(V, G2, B: int, slack: float = 0.1) -> tuple[float, float]:
    """Fit ``(C1, sigma2)`` so that ``(1+slack) V_k <= C1 G2_k + sigma2/B`` for every probe.

    For each ``C1`` on the grid the smallest admissible ``sigma2`` is exact; the pair
    with the smallest summed bound over the probes is returned.
    """
    V = np.asarray(V, dtype=np.float64)
    G2 = np.asarray(G2, dtype=np.float64)
    need = (1 + slack) * V
    sig = B * np.max(np.maximum(0.0, need[None, :] - C1_GRID[:, None] * G2[None, :]), axis=1)
    total = C1_GRID * G2.sum() + sig * V.size / B
    best = int(np.argmin(total))
    return float(C1_GRID[best]), float(sig[best])


def fit_variance_constants(
    problem: FederatedProblem, j, probe_points, B: int, trials: int, seed: int = 0
) -> tuple[float, float]:
    """Fit the variance constants of device ``j`` (or all devices jointly when ``j`` is None)."""
    if trials < 100:
        raise InvalidArgument(f"need at least 100 trials, got {trials}")
    _check_batch(problem, B)
    probes = [as_model(w, problem.d) for w in probe_points]
    if not probes:
        raise InvalidArgument("need at least one probe point")
    devices = range(problem.p) if j is None else [j]
    V, G2 = [], []
    for dev in devices:
        problem._check_index(dev)
        for k, w in enumerate(probes):
            gen = keyed_generator(seed, k * problem.p + dev, "fit")
            v, g2 = _empirical_variance(problem, dev, w, B, trials, gen)
            V.append(v)
            G2.append(g2)
    return fit_constants(V, G2, B)
