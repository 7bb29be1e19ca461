"""Local descent with periodic averaging (server) and with neighbour mixing (network).

Iteration convention: round ``r`` covers iterations ``[rE, (r+1)E)`` and the
communication step happens on the last iteration of the round, so every model is
identical at each ``t = rE``.  With ``E = 1`` this is synchronous (S)GD.

Every device computes its local update each iteration; the server then averages
only the sampled devices and broadcasts, so local update code never reads the
device sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericalDivergence
from .metrics import Recorder, Trajectory, check_finite
from .problem import FederatedProblem, as_model
from .sampling import DeviceSample, RngStream, sample_devices, stochastic_gradients
from .topology import MixingMatrix

ALGORITHMS = ("LFGD", "LFSGD", "NFSGD")
CONTROLLED = ("none", "frozen", "previous_round")


@dataclass(frozen=True)
class LearningRateSchedule:
    """``constant`` uses ``eta``; ``pl_decay`` uses ``eta_t = 4 / (mu (t + a))`` with ``a = alpha E + 4``."""

    kind: str = "constant"
    eta: float | None = None
    mu: float | None = None
    alpha: float | None = None
    E: int | None = None

    def __post_init__(self):
        if self.kind == "constant":
            if self.eta is None or not (self.eta > 0 and np.isfinite(self.eta)):
                raise InvalidArgument("constant schedule needs a finite eta > 0")
        elif self.kind == "pl_decay":
            if not (self.mu and self.mu > 0 and self.alpha and self.alpha > 0 and self.E and self.E >= 1):
                raise InvalidArgument("pl_decay schedule needs mu > 0, alpha > 0 and E >= 1")
        else:
            raise InvalidArgument(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def constant(cls, eta: float) -> "LearningRateSchedule":
        return cls("constant", eta=float(eta))

    @classmethod
    def pl_decay(cls, mu: float, alpha: float, E: int) -> "LearningRateSchedule":
        return cls("pl_decay", mu=float(mu), alpha=float(alpha), E=int(E))

    @property
    def a(self) -> float:
        return self.alpha * self.E + 4

    def __call__(self, t: int) -> float:
        if self.kind == "constant":
            return self.eta
        return 4.0 / (self.mu * (t + self.a))

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True, eq=False)
class RunConfig:
    """Algorithm choice and hyperparameters.

    ``participation="auto"`` aggregates all devices with weights ``q`` when ``K == p``
    and samples ``K`` devices with replacement otherwise; ``"sampled"`` forces
    sampling even when ``K == p``.  ``B=None`` means full local gradients.
    """

    algorithm: str
    E: int
    T: int
    lr: LearningRateSchedule
    K: int | None = None
    B: int | None = None
    topology: MixingMatrix | None = None
    controlled_averaging: str = "none"
    corrections: np.ndarray | None = None
    seed: int = 0
    w0: np.ndarray | None = None
    participation: str = "auto"
    log_every: int = 1
    keep_models: bool = False

    def validate(self, problem: FederatedProblem) -> None:
        p = problem.p
        if self.algorithm not in ALGORITHMS:
            raise InvalidArgument(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.E < 1:
            raise InvalidArgument(f"E must be >= 1, got {self.E}")
        if self.T < 0:
            raise InvalidArgument(f"T must be >= 0, got {self.T}")
        if self.seed < 0:
            raise InvalidArgument("seed must be non-negative")
        if self.log_every < 1:
            raise InvalidArgument("log_every must be >= 1")
        K = self.resolved_K(p)
        if not (1 <= K <= p):
            raise InvalidArgument(f"K must satisfy 1 <= K <= p (got K={K}, p={p})")
        if self.participation not in ("auto", "sampled", "full"):
            raise InvalidArgument(f"unknown participation mode {self.participation!r}")
        if self.participation == "full" and K != p:
            raise InvalidArgument("full participation requires K == p")
        if self.algorithm == "LFGD" and self.lr.kind != "constant":
            raise InvalidArgument("LFGD uses a constant learning rate")
        if self.algorithm != "LFGD" and self.B is not None:
            if self.B < 1:
                raise InvalidArgument(f"B must be >= 1, got {self.B}")
        if self.algorithm == "NFSGD":
            if self.topology is None:
                raise InvalidArgument("NFSGD requires a topology")
            if self.topology.p != p:
                raise InvalidArgument(f"topology has {self.topology.p} nodes but problem has p={p}")
            if K != p:
                raise InvalidArgument("NFSGD forbids device sampling: K must equal p")
            if self.lr.kind != "constant":
                raise InvalidArgument("NFSGD uses a constant learning rate")
            if np.any(problem.q <= 0):
                raise InvalidArgument("NFSGD mixing needs every weight q_j > 0")
        if self.controlled_averaging not in CONTROLLED:
            raise InvalidArgument(f"controlled_averaging must be one of {CONTROLLED}")
        if self.controlled_averaging == "frozen":
            c = self.corrections
            if c is None or np.shape(c) != (p, problem.d):
                raise InvalidArgument("frozen controlled averaging needs corrections of shape (p, d)")
        if self.w0 is not None:
            as_model(self.w0, problem.d)

    def resolved_K(self, p: int) -> int:
        return p if self.K is None else int(self.K)

    def sampled(self, p: int) -> bool:
        if self.algorithm == "NFSGD":
            return False
        if self.participation == "sampled":
            return True
        return self.resolved_K(p) != p

    def to_dict(self) -> dict:
        out = {
            "algorithm": self.algorithm,
            "E": self.E,
            "T": self.T,
            "lr": self.lr.to_dict(),
            "K": self.K,
            "B": self.B,
            "controlled_averaging": self.controlled_averaging,
            "seed": self.seed,
            "participation": self.participation,
            "log_every": self.log_every,
        }
        if self.w0 is not None:
            out["w0"] = [float(v) for v in self.w0]
        if self.corrections is not None:
            out["corrections"] = np.asarray(self.corrections).tolist()
        if self.topology is not None:
            out["zeta"] = self.topology.zeta
        return out


@dataclass
class WorkerState:
    models: np.ndarray
    corrections: np.ndarray | None = None
    t: int = 0
    sample: DeviceSample | None = None
    history: list = field(default_factory=list)


def local_step(state: WorkerState, j: int, direction, eta: float) -> np.ndarray:
    """``w_j <- w_j - eta d_j`` on device ``j`` only."""
    if not eta > 0:
        raise InvalidArgument("eta must be positive")
    d = np.asarray(direction, dtype=np.float64)
    if d.shape != state.models[j].shape:
        raise InvalidArgument("direction dimension mismatch")
    if not np.isfinite(d).all():
        raise NumericalDivergence(state.t, j, "non-finite direction")
    new = state.models[j] - eta * d
    check_finite(new[None, :], state.t + 1)
    state.models[j] = new
    return new


def aggregate_and_broadcast(state: WorkerState, sample: DeviceSample, directions, eta: float) -> np.ndarray:
    """Average ``w_j - eta d_j`` over the sample multiset and broadcast to every device.

    ``directions`` maps each sampled device index to its direction (a dict or a
    ``(p, d)`` array indexed by device).
    """
    if sample is None or sample.K == 0:
        raise InvalidArgument("empty device sample")
    members = list(sample.members)
    updated = [state.models[j] - eta * np.asarray(directions[j], dtype=np.float64) for j in members]
    shared = np.sum(updated, axis=0) / len(members)
    check_finite(shared[None, :], state.t + 1)
    state.models[:] = shared
    return shared


def apply_controlled_averaging(directions, corrections) -> np.ndarray:
    """``g^_j = g~_j - c_j + mean(c)``."""
    G = np.asarray(directions, dtype=np.float64)
    C = np.asarray(corrections, dtype=np.float64)
    if G.shape != C.shape:
        raise InvalidArgument("directions and corrections must have the same shape")
    return G - C + C.mean(axis=0)


def _initial_models(problem, config):
    w0 = np.zeros(problem.d) if config.w0 is None else as_model(config.w0, problem.d)
    return np.tile(w0, (problem.p, 1))


def _directions(problem, config, W, t):
    if config.algorithm == "LFGD" or config.B is None:
        return problem.local_gradients(W)
    return stochastic_gradients(problem, W, config.B, config.seed, t)


def _run_periodic(problem: FederatedProblem, config: RunConfig) -> Trajectory:
    p, q, E, T = problem.p, problem.q, config.E, config.T
    K = config.resolved_K(p)
    sampled = config.sampled(p)
    W = _initial_models(problem, config)
    rec = Recorder(problem, config.keep_models)
    C = _initial_corrections(problem, config)
    round_dirs = np.zeros_like(W)
    sample = None
    weights = q
    status, diverged_at = "completed", None
    for t in range(T):
        if t % E == 0:
            if sampled:
                sample = sample_devices(RngStream(config.seed, None, t // E, "devices"), q, K)
                weights = sample.counts(p) / K
            if config.controlled_averaging == "previous_round" and t > 0:
                C = round_dirs / E
            round_dirs = np.zeros_like(W)
        eta = config.lr(t)
        logged = t % config.log_every == 0
        if logged:
            rec.record(t, weights @ W, W, eta)
        try:
            D = _directions(problem, config, W, t)
            if config.controlled_averaging != "none":
                round_dirs += D
                D = apply_controlled_averaging(D, C)
            if logged:
                rec.set_last_direction(float(q @ np.einsum("jk,jk->j", D, D)))
            check_finite(D, t)
            X = W - eta * D
            check_finite(X, t + 1)
        except NumericalDivergence as exc:
            status, diverged_at = "diverged", exc.t
            break
        if (t + 1) % E == 0:
            W = np.tile(weights @ X, (p, 1))
        else:
            W = X
    else:
        rec.record(T, weights @ W, W, config.lr(T))
    return rec.finish(status, diverged_at, config.to_dict())


def _initial_corrections(problem, config):
    if config.controlled_averaging == "frozen":
        return np.asarray(config.corrections, dtype=np.float64)
    return np.zeros((problem.p, problem.d))


def run_lfgd(problem: FederatedProblem, config: RunConfig) -> Trajectory:
    """Local full-gradient descent with periodic averaging."""
    if config.algorithm != "LFGD":
        raise InvalidArgument("run_lfgd needs algorithm LFGD")
    config.validate(problem)
    return _run_periodic(problem, config)


def run_lfsgd(problem: FederatedProblem, config: RunConfig) -> Trajectory:
    """Local minibatch SGD with periodic averaging."""
    if config.algorithm != "LFSGD":
        raise InvalidArgument("run_lfsgd needs algorithm LFSGD")
    config.validate(problem)
    return _run_periodic(problem, config)


def mix(W_mix: np.ndarray, q: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Weighted mixing ``w_j = (1/q_j) sum_i q_i W_ij x_i``; preserves ``sum_j q_j w_j``."""
    return (W_mix.T @ (q[:, None] * X)) / q[:, None]


def run_nfsgd(problem: FederatedProblem, config: RunConfig) -> Trajectory:
    """Networked local SGD: ``E - 1`` local steps, then one mixing step, per round."""
    if config.algorithm != "NFSGD":
        raise InvalidArgument("run_nfsgd needs algorithm NFSGD")
    config.validate(problem)
    q, E, T = problem.q, config.E, config.T
    Wm = config.topology.entries
    W = _initial_models(problem, config)
    rec = Recorder(problem, config.keep_models)
    C = _initial_corrections(problem, config)
    round_dirs = np.zeros_like(W)
    status, diverged_at = "completed", None
    for t in range(T):
        if t % E == 0:
            if config.controlled_averaging == "previous_round" and t > 0:
                C = round_dirs / E
            round_dirs = np.zeros_like(W)
        eta = config.lr(t)
        logged = t % config.log_every == 0
        if logged:
            rec.record(t, q @ W, W, eta)
        try:
            D = _directions(problem, config, W, t)
            if config.controlled_averaging != "none":
                round_dirs += D
                D = apply_controlled_averaging(D, C)
            if logged:
                rec.set_last_direction(float(q @ np.einsum("jk,jk->j", D, D)))
            check_finite(D, t)
            X = W - eta * D
            if (t + 1) % E == 0:
                X = mix(Wm, q, X)
            check_finite(X, t + 1)
        except NumericalDivergence as exc:
            status, diverged_at = "diverged", exc.t
            break
        W = X
    else:
        rec.record(T, q @ W, W, config.lr(T))
    return rec.finish(status, diverged_at, config.to_dict())


def run(problem: FederatedProblem, config: RunConfig) -> Trajectory:
    runner = {"LFGD": run_lfgd, "LFSGD": run_lfsgd, "NFSGD": run_nfsgd}.get(config.algorithm)
    if runner is None:
        raise InvalidArgument(f"algorithm must be one of {ALGORITHMS}, got {config.algorithm!r}")
    return runner(problem, config)
