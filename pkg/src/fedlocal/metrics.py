"""Trajectories, rate fitting, ensembles, oracle baselines and instance checks."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateDiversity, InvalidArgument, NumericalDivergence, RateFitUnavailable
from .problem import FederatedProblem, as_model, direction_diversity, global_value_and_gradient

COLUMNS = ("t", "f_bar", "subopt", "grad_norm_sq", "consensus", "diversity", "eta")
DIVERGENCE_NORM = 1e12
CLIP = 1e-300


@dataclass
class Trajectory:
    """Per-iteration records at the virtual average plus a terminal status.

    ``diversity`` is NaN where the mean gradient fell below the diversity floor.
    ``spread`` is ``sum_j q_j ||w_j - sum_i q_i w_i||^2``; ``direction_sq`` is
    ``sum_j q_j ||d_j||^2`` for the directions applied at that iteration.  Ensemble
    trajectories carry per-column standard errors in ``se``.
    """

    t: np.ndarray
    f_bar: np.ndarray
    subopt: np.ndarray
    grad_norm_sq: np.ndarray
    consensus: np.ndarray
    diversity: np.ndarray
    eta: np.ndarray
    w_bar: np.ndarray | None = None
    spread: np.ndarray | None = None
    direction_sq: np.ndarray | None = None
    models: np.ndarray | None = None
    status: str = "completed"
    diverged_at: int | None = None
    se: dict | None = None
    config: dict | None = None

    def __len__(self) -> int:
        return len(self.t)

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    def column(self, name: str) -> np.ndarray:
        if name not in COLUMNS:
            raise InvalidArgument(f"unknown trajectory column {name!r}")
        return getattr(self, name)

    def at(self, t: int) -> int:
        """Row index of iteration ``t``."""
        hits = np.flatnonzero(self.t == t)
        if hits.size == 0:
            raise InvalidArgument(f"iteration {t} was not recorded")
        return int(hits[0])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(COLUMNS) + "\n")
        for i in range(len(self.t)):
            row = [str(int(self.t[i]))] + [repr(float(getattr(self, c)[i])) for c in COLUMNS[1:]]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def summary(self, config_hash: str | None = None, rates: dict | None = None) -> dict:
        last = len(self.t) - 1
        return {
            "config_hash": config_hash,
            "status": self.status,
            "diverged_at": self.diverged_at,
            "records": len(self.t),
            "final": {c: _json_float(getattr(self, c)[last]) for c in COLUMNS} if last >= 0 else {},
            "rates": rates or {},
        }


def _json_float(x):
    x = float(x)
    return x if np.isfinite(x) else None


class Recorder:
    """Accumulates trajectory rows during a run."""

    def __init__(self, problem: FederatedProblem, keep_models: bool = False):
        self.problem = problem
        self.keep_models = keep_models
        self.rows = {c: [] for c in COLUMNS}
        self.w_bar, self.spread, self.direction_sq, self.models = [], [], [], []

    def record(self, t: int, w_bar, models, eta: float, direction_sq: float = np.nan):
        prob = self.problem
        vals, grads = prob.at_point(w_bar)
        f = float(prob.q @ vals)
        g = prob.q @ grads
        gn = float(g @ g)
        try:
            div = direction_diversity(grads, prob.q)
        except DegenerateDiversity:
            div = np.nan
        dev = models - w_bar
        m = prob.q @ models
        dm = models - m
        self.rows["t"].append(t)
        self.rows["f_bar"].append(f)
        self.rows["subopt"].append(f - prob.f_star if prob.f_star is not None else np.nan)
        self.rows["grad_norm_sq"].append(gn)
        self.rows["consensus"].append(float(prob.q @ np.einsum("jk,jk->j", dev, dev)))
        self.rows["diversity"].append(div)
        self.rows["eta"].append(eta)
        self.w_bar.append(np.array(w_bar, dtype=np.float64))
        self.spread.append(float(prob.q @ np.einsum("jk,jk->j", dm, dm)))
        self.direction_sq.append(direction_sq)
        if self.keep_models:
            self.models.append(np.array(models, dtype=np.float64))

    def set_last_direction(self, value: float):
        if self.direction_sq:
            self.direction_sq[-1] = value

    def finish(self, status="completed", diverged_at=None, config=None) -> Trajectory:
        cols = {c: np.asarray(v, dtype=np.float64) for c, v in self.rows.items()}
        cols["t"] = np.asarray(self.rows["t"], dtype=np.int64)
        d = self.problem.d
        return Trajectory(
            **cols,
            w_bar=np.asarray(self.w_bar).reshape(-1, d),
            spread=np.asarray(self.spread, dtype=np.float64),
            direction_sq=np.asarray(self.direction_sq, dtype=np.float64),
            models=np.asarray(self.models) if self.keep_models else None,
            status=status,
            diverged_at=diverged_at,
            config=config,
        )


def check_finite(X: np.ndarray, t: int):
    """Divergence guard: raise when any row is non-finite or exceeds the norm cap."""
    norms = np.sqrt(np.einsum("jk,jk->j", X, X)) if X.ndim == 2 else np.array([np.linalg.norm(X)])
    bad = ~np.isfinite(norms) | (norms > DIVERGENCE_NORM)
    if bad.any():
        j = int(np.flatnonzero(bad)[0])
        reason = "non-finite value" if not np.isfinite(norms[j]) else "model norm above 1e12"
        raise NumericalDivergence(t, j if X.ndim == 2 else None, reason)


# ---------------------------------------------------------------------------
# Oracles


def _sync_oracle(problem, eta, T, w0, direction):
    if not eta > 0:
        raise InvalidArgument("eta must be positive")
    w = as_model(w0, problem.d).copy()
    rec = Recorder(problem)
    shared = lambda v: np.broadcast_to(v, (problem.p, problem.d))
    for t in range(T):
        rec.record(t, w, shared(w), eta)
        try:
            w = w - eta * direction(t, w)
            check_finite(w, t + 1)
        except NumericalDivergence as exc:
            return rec.finish("diverged", exc.t)
    rec.record(T, w, shared(w), eta)
    return rec.finish()


def oracle_sync_gd(problem: FederatedProblem, eta: float, T: int, w0) -> Trajectory:
    """Fully synchronous GD on the weighted global objective."""
    return _sync_oracle(problem, eta, T, w0, lambda t, w: global_value_and_gradient(problem, w)[1])


def oracle_sync_sgd(problem: FederatedProblem, eta: float, T: int, w0, B: int, seed: int) -> Trajectory:
    """Synchronous SGD: every device draws its stochastic gradient at the shared model."""
    from .sampling import stochastic_gradients

    def direction(t, w):
        G = stochastic_gradients(problem, np.broadcast_to(w, (problem.p, problem.d)), B, seed, t)
        return problem.q @ G

    return _sync_oracle(problem, eta, T, w0, direction)


# ---------------------------------------------------------------------------
# Rate fitting and ensembles


def _final_decade(t: np.ndarray) -> np.ndarray:
    T = t.max()
    return t >= T / 10


def fit_series(t, values, model: str) -> tuple[float, float]:
    """Least-squares slope of ``log(values)`` against ``t`` or ``log(t)`` over the final decade."""
    t = np.asarray(t, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if model not in ("exp_decay", "power_law"):
        raise InvalidArgument(f"unknown rate model {model!r}")
    mask = _final_decade(t) if t.size else np.zeros(0, bool)
    if model == "power_law":
        mask &= t > 0
    mask &= np.isfinite(v)
    usable = mask & (v > 0)
    if usable.sum() < 10:
        raise RateFitUnavailable(f"only {int(usable.sum())} positive records in the final decade")
    x = t[mask] if model == "exp_decay" else np.log(t[mask])
    y = np.log(np.maximum(v[mask], CLIP))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot <= 1e-30 * max(1.0, float(y @ y)) else 1.0 - float(resid @ resid) / ss_tot
    return float(slope), float(r2)


def fit_rate(trajs, model: str, metric: str | None = None) -> tuple[float, float]:
    """Fit a rate to one trajectory or to the ensemble mean of several.

    ``metric`` defaults to ``subopt`` when it is known and ``grad_norm_sq`` otherwise.
    """
    traj = trajs if isinstance(trajs, Trajectory) else ensemble_mean(list(trajs))
    if metric is None:
        metric = "subopt" if np.isfinite(traj.subopt).any() else "grad_norm_sq"
    return fit_series(traj.t, traj.column(metric), model)


def ensemble_mean(trajectories) -> Trajectory:
    trajs = list(trajectories)
    if len(trajs) < 2:
        raise InvalidArgument("ensemble_mean needs at least two trajectories")
    n = len(trajs[0].t)
    if any(len(tr.t) != n or not np.array_equal(tr.t, trajs[0].t) for tr in trajs):
        raise InvalidArgument("trajectories have mismatched lengths or iteration grids")
    means, ses = {}, {}
    k = len(trajs)
    for c in COLUMNS[1:]:
        stack = np.stack([getattr(tr, c) for tr in trajs])
        means[c] = stack.mean(axis=0)
        ses[c] = stack.std(axis=0, ddof=1) / np.sqrt(k)
    diverged = [tr.diverged_at for tr in trajs if tr.diverged]
    return Trajectory(
        t=trajs[0].t.copy(),
        **means,
        status="diverged" if diverged else "completed",
        diverged_at=min(diverged) if diverged else None,
        se=ses,
    )


# ---------------------------------------------------------------------------
# Instance checks


@dataclass
class BoundCheck:
    lhs: np.ndarray
    rhs: np.ndarray
    slack: float
    t: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def ok(self) -> np.ndarray:
        return self.lhs <= self.rhs + self.slack

    @property
    def all_ok(self) -> bool:
        return bool(np.all(self.ok))


def consensus_bound_check(traj: Trajectory, E: int, K: int | None = None, slack: float = 1e-9) -> BoundCheck:
    """Consensus deviation bound ``consensus(t) <= 4E sum_{k=s}^{t-1} eta_k^2 direction_sq_k``.

    ``s = floor(t/E) E`` is the last synchronisation.  With ``K`` given (sampled
    participation) the left side is the exact expectation over the round's device
    sample, ``(1 + 1/K) spread``; otherwise the recorded consensus is used.  Needs a
    trajectory recorded at every iteration.
    """
    t = traj.t
    if len(t) < 1 or not np.array_equal(t, np.arange(len(t))):
        raise InvalidArgument("consensus check needs every iteration recorded")
    lhs = traj.consensus if K is None else (1 + 1.0 / K) * traj.spread
    inc = np.nan_to_num(traj.eta**2 * traj.direction_sq)
    rhs = np.zeros(len(t))
    acc = 0.0
    for i, ti in enumerate(t):
        if ti % E == 0:
            acc = 0.0
        rhs[i] = 4 * E * acc
        acc += inc[i]
    return BoundCheck(lhs=lhs, rhs=rhs, slack=slack, t=t)


def contraction_check(traj: Trajectory, mu: float, slack_rel: float = 1e-9) -> BoundCheck:
    """Linear contraction ``subopt(t) <= (1 - mu eta)^t subopt(0) (1 + slack)`` for constant eta."""
    eta = float(traj.eta[0])
    rhs = (1 - mu * eta) ** traj.t.astype(np.float64) * traj.subopt[0] * (1 + slack_rel)
    return BoundCheck(lhs=traj.subopt, rhs=rhs, slack=0.0, t=traj.t)


def _resampled_aggregate(problem, models, B, resamples, gen, weights):
    d = problem.d
    dev_sum = np.zeros((resamples, d))
    G = problem.local_gradients(models)
    for j, o in enumerate(problem.objectives):
        if weights[j] == 0:
            continue
        if o.finite_sum and o.n != B:
            idx = np.minimum((gen.random((resamples, B)) * o.n).astype(np.int64), o.n - 1)
            dev = o.batch_gradients(models[j], idx) - G[j]
        elif not o.finite_sum and o.noise > 0:
            dev = gen.standard_normal((resamples, d)) * (o.noise / np.sqrt(B * d))
        else:
            continue
        dev_sum += weights[j] * dev
    return np.einsum("rk,rk->r", dev_sum, dev_sum), G


def aggregate_variance_check(
    problem: FederatedProblem,
    models,
    B: int,
    C1: float,
    sigma2: float,
    K: int,
    resamples: int = 10_000,
    seed: int = 0,
    point: int = 0,
) -> dict:
    """Monte-Carlo check of the averaged-gradient variance bound at one state.

    Uses full participation with weights ``q``, so the aggregate stochastic gradient is
    ``sum_j q_j g~_j`` over independent per-device minibatches.  The bound is
    ``(C1/K) sum_j q_j ||g_j||^2 + sigma2/(K B)``.
    """
    from .sampling import keyed_generator

    models = np.asarray(models, dtype=np.float64)
    gen = keyed_generator(seed, point, "resample")
    sq, G = _resampled_aggregate(problem, models, B, resamples, gen, problem.q)
    est = float(sq.mean())
    se = float(sq.std(ddof=1) / np.sqrt(resamples))
    bound = C1 / K * float(problem.q @ np.einsum("jk,jk->j", G, G)) + sigma2 / (K * B)
    return {"estimate": est, "se": se, "bound": bound, "ok": est <= bound + 3 * se}


def with_config(traj: Trajectory, config: dict) -> Trajectory:
    return replace(traj, config=config)


def dumps_summary(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True)
