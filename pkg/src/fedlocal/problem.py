"""Local objectives, the weighted global objective, and synthetic heterogeneous problems.

Every local objective exposes ``value``, ``gradient`` and ``smoothness``.  Finite-sum
objectives (least squares, logistic) additionally expose per-sample minibatch
gradients; the quadratic objective instead carries an optional injected-noise scale
used by the stochastic oracle in :mod:`fedlocal.sampling`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import ClassVar, Sequence

import numpy as np
from scipy.special import expit

from .errors import DegenerateDiversity, InvalidArgument

DIVERSITY_FLOOR = 1e-24


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def as_model(w, d: int | None = None) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise InvalidArgument(f"model vector must be 1-D, got shape {w.shape}")
    if d is not None and w.shape[0] != d:
        raise InvalidArgument(f"model vector has dimension {w.shape[0]}, expected {d}")
    return w


@dataclass(frozen=True, eq=False)
class QuadraticObjective:
    """``f(w) = 1/2 (w - b)^T A (w - b)`` with optional additive gradient noise.

    ``noise`` is the standard deviation scale of the injected noise: a stochastic
    gradient with batch size ``B`` has ``E||g~ - g||^2 = noise**2 / B``.
    """

    A: np.ndarray
    b: np.ndarray
    noise: float = 0.0

    kind: ClassVar[str] = "quadratic"
    finite_sum: ClassVar[bool] = False

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
            raise InvalidArgument("quadratic objective needs square A and matching b")
        if not np.allclose(A, A.T, atol=1e-12, rtol=0):
            raise InvalidArgument("quadratic objective matrix must be symmetric")
        if np.linalg.eigvalsh(A)[0] < -1e-10:
            raise InvalidArgument("quadratic objective matrix must be positive semidefinite")
        if not (self.noise >= 0 and np.isfinite(self.noise)):
            raise InvalidArgument("noise must be a finite non-negative number")
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "b", _frozen(b))

    @property
    def d(self) -> int:
        return self.b.shape[0]

    @property
    def n(self) -> int:
        return 1

    def value(self, w):
        r = w - self.b
        return 0.5 * float(r @ self.A @ r)

    def gradient(self, w):
        return self.A @ (w - self.b)

    def smoothness(self) -> float:
        return float(np.linalg.eigvalsh(self.A)[-1])

    def minimizer(self):
        return self.b


@dataclass(frozen=True, eq=False)
class _FiniteSum:
    X: np.ndarray
    y: np.ndarray

    finite_sum: ClassVar[bool] = True

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if X.ndim != 2 or y.shape != (X.shape[0],) or X.shape[0] < 1:
            raise InvalidArgument("finite-sum objective needs X of shape (n, d) and y of shape (n,)")
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "y", _frozen(y))

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def _gram_max(self) -> float:
        return float(np.linalg.eigvalsh(self.X.T @ self.X)[-1])

    def batch_gradients(self, w, idx) -> np.ndarray:
        """Mean per-sample gradients over each row of the index matrix ``idx`` (m, B)."""
        idx = np.atleast_2d(idx)
        return self._sample_grads(w, self.X[idx], self.y[idx]).mean(axis=1) + self._reg_grad(w)

    def _reg_grad(self, w):
        return 0.0


@dataclass(frozen=True, eq=False)
class LeastSquaresObjective(_FiniteSum):
    """``f(w) = 1/(2n) ||X w - y||^2``."""

    kind: ClassVar[str] = "least_squares"

    def value(self, w):
        r = self.X @ w - self.y
        return 0.5 * float(r @ r) / self.n

    def gradient(self, w):
        return self.X.T @ (self.X @ w - self.y) / self.n

    def smoothness(self) -> float:
        return self._gram_max() / self.n

    def _sample_grads(self, w, Xb, yb):
        r = Xb @ w - yb
        return r[..., None] * Xb


@dataclass(frozen=True, eq=False)
class LogisticObjective(_FiniteSum):
    """Mean logistic loss with labels in {-1, +1}, plus ``reg * sum(w^2 / (1 + w^2))``.

    The regulariser is nonconvex and 2*reg-smooth; with ``reg=0`` this is plain
    logistic regression.
    """

    reg: float = 0.0

    kind: ClassVar[str] = "logistic"

    def __post_init__(self):
        super().__post_init__()
        if not np.all(np.isin(self.y, (-1.0, 1.0))):
            raise InvalidArgument("logistic labels must be -1 or +1")
        if not (self.reg >= 0 and np.isfinite(self.reg)):
            raise InvalidArgument("reg must be a finite non-negative number")

    def value(self, w):
        m = self.y * (self.X @ w)
        return float(np.mean(np.logaddexp(0.0, -m))) + self.reg * float(np.sum(w**2 / (1 + w**2)))

    def gradient(self, w):
        m = self.y * (self.X @ w)
        return -(self.X.T @ (self.y * expit(-m))) / self.n + self._reg_grad(w)

    def smoothness(self) -> float:
        return self._gram_max() / (4 * self.n) + 2 * self.reg

    def _reg_grad(self, w):
        return self.reg * 2 * w / (1 + w**2) ** 2

    def _sample_grads(self, w, Xb, yb):
        m = yb * (Xb @ w)
        return (-yb * expit(-m))[..., None] * Xb


LocalObjective = QuadraticObjective | LeastSquaresObjective | LogisticObjective


class _Stack:
    """Batched evaluation when all shards share kind and shape."""

    def __init__(self, objectives):
        first = objectives[0]
        self.kind = first.kind
        if self.kind == "quadratic":
            self.A = np.stack([o.A for o in objectives])
            self.b = np.stack([o.b for o in objectives])
        else:
            self.X = np.stack([o.X for o in objectives])
            self.y = np.stack([o.y for o in objectives])
            self.n = first.n
            if self.kind == "logistic":
                self.reg = np.array([o.reg for o in objectives])[:, None]

    @staticmethod
    def possible(objectives) -> bool:
        kinds = {type(o) for o in objectives}
        if len(kinds) != 1:
            return False
        if objectives[0].kind == "quadratic":
            return True
        return len({o.n for o in objectives}) == 1

    def values_and_gradients(self, W):
        if self.kind == "quadratic":
            R = W - self.b
            G = np.matmul(self.A, R[:, :, None])[:, :, 0]
            return 0.5 * np.einsum("jk,jk->j", R, G), G
        margins = np.matmul(self.X, W[:, :, None])[:, :, 0]
        if self.kind == "least_squares":
            r = margins - self.y
            vals = 0.5 * np.einsum("jn,jn->j", r, r) / self.n
            G = np.matmul(r[:, None, :], self.X)[:, 0, :] / self.n
            return vals, G
        m = self.y * margins
        vals = np.logaddexp(0.0, -m).mean(axis=1)
        coef = -self.y * expit(-m)
        G = np.matmul(coef[:, None, :], self.X)[:, 0, :] / self.n
        W2 = W**2
        vals = vals + self.reg[:, 0] * np.sum(W2 / (1 + W2), axis=1)
        G = G + self.reg * 2 * W / (1 + W2) ** 2
        return vals, G

    def minibatch_gradients(self, W, idx):
        """Per-device minibatch gradients; ``idx`` has shape (p, B)."""
        rows = np.arange(idx.shape[0])[:, None]
        Xb = self.X[rows, idx]
        yb = self.y[rows, idx]
        margins = np.matmul(Xb, W[:, :, None])[:, :, 0]
        if self.kind == "least_squares":
            coef = margins - yb
            return np.matmul(coef[:, None, :], Xb)[:, 0, :] / idx.shape[1]
        coef = -yb * expit(-yb * margins)
        G = np.matmul(coef[:, None, :], Xb)[:, 0, :] / idx.shape[1]
        return G + self.reg * 2 * W / (1 + W**2) ** 2


@dataclass(frozen=True, eq=False)
class FederatedProblem:
    """``p`` local objectives, weights ``q`` on the simplex and known constants."""

    objectives: tuple
    q: np.ndarray
    L: float | None = None
    mu: float | None = None
    f_star: float | None = None
    w_star: np.ndarray | None = None
    spec: "ProblemSpec | None" = None
    _stack: _Stack | None = field(default=None, repr=False)

    def __post_init__(self):
        objs = tuple(self.objectives)
        if not objs:
            raise InvalidArgument("a federated problem needs at least one objective")
        d = objs[0].d
        if any(o.d != d for o in objs):
            raise InvalidArgument("all local objectives must share the model dimension")
        q = np.asarray(self.q, dtype=np.float64)
        if q.shape != (len(objs),):
            raise InvalidArgument(f"weights must have length p={len(objs)}")
        if np.any(q < 0) or not np.isfinite(q).all() or abs(q.sum() - 1.0) > 1e-12:
            raise InvalidArgument("weights must be non-negative and sum to 1")
        object.__setattr__(self, "objectives", objs)
        object.__setattr__(self, "q", _frozen(q))
        L_max = max(o.smoothness() for o in objs)
        object.__setattr__(self, "L", float(L_max if self.L is None else self.L))
        if self.w_star is not None:
            object.__setattr__(self, "w_star", _frozen(self.w_star))
        if _Stack.possible(objs):
            object.__setattr__(self, "_stack", _Stack(objs))

    @property
    def p(self) -> int:
        return len(self.objectives)

    @property
    def d(self) -> int:
        return self.objectives[0].d

    @property
    def kappa(self) -> float | None:
        return None if self.mu is None else self.L / self.mu

    def _check_index(self, j):
        if not (0 <= j < self.p):
            raise InvalidArgument(f"device index {j} outside [0, {self.p})")

    def local_values_and_gradients(self, models) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate device ``j`` at ``models[j]`` for every ``j``."""
        W = np.asarray(models, dtype=np.float64)
        if W.shape != (self.p, self.d):
            raise InvalidArgument(f"models must have shape {(self.p, self.d)}, got {W.shape}")
        if self._stack is not None:
            return self._stack.values_and_gradients(W)
        vals = np.array([o.value(w) for o, w in zip(self.objectives, W)])
        grads = np.stack([o.gradient(w) for o, w in zip(self.objectives, W)])
        return vals, grads

    def local_gradients(self, models) -> np.ndarray:
        return self.local_values_and_gradients(models)[1]

    def at_point(self, w) -> tuple[np.ndarray, np.ndarray]:
        """Local values and gradients of every device at the common point ``w``."""
        w = as_model(w, self.d)
        return self.local_values_and_gradients(np.broadcast_to(w, (self.p, self.d)))


def local_gradient(problem: FederatedProblem, j: int, w) -> np.ndarray:
    problem._check_index(j)
    return problem.objectives[j].gradient(as_model(w, problem.d))


def global_value_and_gradient(problem: FederatedProblem, w) -> tuple[float, np.ndarray]:
    vals, grads = problem.at_point(w)
    return float(problem.q @ vals), problem.q @ grads


def direction_diversity(vectors, q) -> float:
    """Weighted diversity ``sum q_j ||v_j||^2 / ||sum q_j v_j||^2`` of arbitrary vectors."""
    V = np.asarray(vectors, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    num = float(q @ np.einsum("jk,jk->j", V, V))
    mean = q @ V
    den = float(mean @ mean)
    if den < DIVERSITY_FLOOR:
        raise DegenerateDiversity(num, den)
    return num / den


def gradient_diversity(problem: FederatedProblem, w) -> float:
    _, grads = problem.at_point(w)
    return direction_diversity(grads, problem.q)


def diversity_upper_bound(problem: FederatedProblem, probe_points) -> float:
    probes = list(probe_points)
    if not probes:
        raise InvalidArgument("diversity_upper_bound needs at least one probe point")
    return max(gradient_diversity(problem, w) for w in probes)


# ---------------------------------------------------------------------------
# Construction helpers


def _resolve_weights(rule, sizes: Sequence[int]) -> np.ndarray:
    p = len(sizes)
    if isinstance(rule, str):
        if rule == "uniform":
            return np.full(p, 1.0 / p)
        if rule == "proportional":
            n = np.asarray(sizes, dtype=np.float64)
            return n / n.sum()
        raise InvalidArgument(f"unknown weights rule {rule!r}")
    q = np.asarray(rule, dtype=np.float64)
    if q.shape != (p,):
        raise InvalidArgument(f"explicit weights must have length {p}")
    return q


def quadratic_problem(b, A=None, q=None, noise: float = 0.0) -> FederatedProblem:
    """Build a quadratic problem from explicit local minimisers and curvatures.

    ``A`` defaults to the identity for every device; ``q`` defaults to uniform.
    The minimiser, optimum and PL constant are computed in closed form.
    """
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    p, d = b.shape
    if A is None:
        A = np.broadcast_to(np.eye(d), (p, d, d))
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 2:
        A = np.broadcast_to(A, (p, d, d))
    q = np.full(p, 1.0 / p) if q is None else np.asarray(q, dtype=np.float64)
    objs = tuple(QuadraticObjective(A[j], b[j], noise) for j in range(p))
    H = np.einsum("j,jkl->kl", q, A)
    rhs = np.einsum("j,jkl,jl->k", q, A, b)
    return _with_quadratic_constants(objs, q, H, rhs)


def _with_quadratic_constants(objs, q, H, rhs, spec=None) -> FederatedProblem:
    mu = float(np.linalg.eigvalsh(H)[0])
    w_star = np.linalg.lstsq(H, rhs, rcond=None)[0]
    # one refinement step keeps the stationarity residual at roundoff level
    w_star = w_star + np.linalg.lstsq(H, rhs - H @ w_star, rcond=None)[0]
    prob = FederatedProblem(objs, q, spec=spec, w_star=w_star)
    f_star, _ = global_value_and_gradient(prob, w_star)
    return FederatedProblem(
        objs, q, mu=mu if mu > 1e-12 else None, f_star=f_star, w_star=w_star, spec=spec
    )


@dataclass(frozen=True)
class ProblemSpec:
    """Serializable recipe for :func:`make_synthetic_problem`.

    ``knob`` is the heterogeneity level: quadratic minimisers lie on a sphere of
    radius ``knob`` around a shared centre; least-squares and logistic shards get
    their features mean-shifted by ``knob`` along a per-device unit direction.
    ``knob = 0`` gives identical shards (given equal shard sizes).
    """

    kind: str = "quadratic"
    p: int = 4
    d: int = 2
    knob: float = 1.0
    weights: str | tuple = "uniform"
    seed: int = 0
    n: int | tuple = 50
    noise: float = 0.0
    reg: float = 0.0
    eig_range: tuple = (1.0, 1.0)

    def __post_init__(self):
        if isinstance(self.weights, list):
            object.__setattr__(self, "weights", tuple(self.weights))
        if isinstance(self.n, list):
            object.__setattr__(self, "n", tuple(self.n))
        object.__setattr__(self, "eig_range", tuple(self.eig_range))

    def to_dict(self) -> dict:
        out = asdict(self)
        for k in ("weights", "n", "eig_range"):
            if isinstance(out[k], tuple):
                out[k] = list(out[k])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"unknown problem fields: {sorted(unknown)}")
        return cls(**data)


def _unit_vectors(rng, p, d):
    U = rng.standard_normal((p, d))
    return U / np.linalg.norm(U, axis=1, keepdims=True)


def make_synthetic_problem(spec: ProblemSpec | dict) -> FederatedProblem:
    if isinstance(spec, dict):
        spec = ProblemSpec.from_dict(spec)
    if spec.p < 1 or spec.d < 1:
        raise InvalidArgument("need p >= 1 and d >= 1")
    if not (np.isfinite(spec.knob) and spec.knob >= 0):
        raise InvalidArgument(f"heterogeneity knob must be finite and >= 0, got {spec.knob}")
    if spec.seed < 0:
        raise InvalidArgument("seed must be non-negative")
    sizes = [int(spec.n)] * spec.p if np.isscalar(spec.n) else [int(v) for v in spec.n]
    if len(sizes) != spec.p or min(sizes) < 1:
        raise InvalidArgument("shard sizes must be p positive integers")
    q = _resolve_weights(spec.weights, sizes)
    rng = np.random.default_rng(spec.seed)
    p, d = spec.p, spec.d

    if spec.kind == "quadratic":
        lo, hi = spec.eig_range
        if not (0 <= lo <= hi) or hi <= 0:
            raise InvalidArgument("eig_range must satisfy 0 <= lo <= hi, hi > 0")
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        A = (Q * np.linspace(lo, hi, d)) @ Q.T
        A = 0.5 * (A + A.T)
        center = rng.standard_normal(d)
        b = center + spec.knob * _unit_vectors(rng, p, d)
        objs = tuple(QuadraticObjective(A, b[j], spec.noise) for j in range(p))
        H = A * q.sum()
        rhs = A @ (q @ b)
        return _with_quadratic_constants(objs, q, H, rhs, spec=spec)

    n_max = max(sizes)
    X0 = rng.standard_normal((n_max, d))
    w_c = rng.standard_normal(d)
    shifts = _unit_vectors(rng, p, d)
    if spec.kind == "least_squares":
        y0 = X0 @ w_c + 0.1 * rng.standard_normal(n_max)
        objs = tuple(
            LeastSquaresObjective(X0[: sizes[j]] + spec.knob * shifts[j], y0[: sizes[j]])
            for j in range(p)
        )
        H = sum(q[j] * o.X.T @ o.X / o.n for j, o in enumerate(objs))
        rhs = sum(q[j] * o.X.T @ o.y / o.n for j, o in enumerate(objs))
        return _with_quadratic_constants(objs, q, H, rhs, spec=spec)
    if spec.kind == "logistic":
        y0 = np.sign(X0 @ w_c + 0.5 * rng.standard_normal(n_max))
        y0[y0 == 0] = 1.0
        objs = tuple(
            LogisticObjective(X0[: sizes[j]] + spec.knob * shifts[j], y0[: sizes[j]], spec.reg)
            for j in range(p)
        )
        return FederatedProblem(objs, q, spec=spec)
    raise InvalidArgument(f"unknown problem kind {spec.kind!r}")
