"""Mixing matrices for networked averaging and their spectral gap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DisconnectedTopology, InvalidArgument, InvalidMixing

STRUCT_TOL = 1e-10
DISCONNECT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    """A validated symmetric doubly stochastic matrix with cached ``zeta``.

    ``zeta`` is the largest eigenvalue magnitude on the disagreement subspace, i.e.
    ``max(|lambda_2|, |lambda_p|)``.
    """

    entries: np.ndarray
    zeta: float

    @property
    def p(self) -> int:
        return self.entries.shape[0]

    def to_csv(self) -> str:
        return "\n".join(",".join(repr(float(v)) for v in row) for row in self.entries) + "\n"


def spectral_gap_zeta(W: np.ndarray) -> float:
    p = W.shape[0]
    # deflating the consensus direction makes exact averaging give exactly 0
    eig = np.linalg.eigvalsh(W - np.full((p, p), 1.0 / p))
    return float(np.max(np.abs(eig)))


def validate_mixing(entries) -> MixingMatrix:
    W = np.array(entries, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] < 1:
        raise InvalidMixing(f"mixing matrix must be square, got shape {W.shape}")
    if not np.isfinite(W).all():
        raise InvalidMixing("mixing matrix has non-finite entries")
    if np.max(np.abs(W - W.T)) > STRUCT_TOL:
        raise InvalidMixing("mixing matrix is not symmetric")
    if W.min() < -STRUCT_TOL:
        raise InvalidMixing("mixing matrix has a negative entry")
    if np.max(np.abs(W.sum(axis=1) - 1.0)) > STRUCT_TOL:
        raise InvalidMixing("mixing matrix rows do not sum to 1")
    zeta = spectral_gap_zeta(0.5 * (W + W.T))
    if zeta >= 1 - DISCONNECT_TOL:
        raise DisconnectedTopology(f"zeta = {zeta!r} >= 1: graph is disconnected or periodic")
    W.flags.writeable = False
    return MixingMatrix(W, zeta)


def _ring(p: int, self_weight: float) -> np.ndarray:
    if p < 2:
        raise InvalidArgument("ring topology needs p >= 2")
    if not (0 <= self_weight <= 1):
        raise InvalidMixing("ring self weight must lie in [0, 1]")
    W = np.zeros((p, p))
    side = (1 - self_weight) / 2
    for i in range(p):
        W[i, i] += self_weight
        W[i, (i + 1) % p] += side
        W[i, (i - 1) % p] += side
    return W


def _random_geometric(p: int, radius: float, seed: int) -> np.ndarray:
    if radius <= 0:
        raise InvalidArgument("radius must be positive")
    pts = np.random.default_rng(seed).random((p, 2))
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    adj = (dist <= radius) & ~np.eye(p, dtype=bool)
    deg = adj.sum(axis=1)
    # Metropolis weights
    W = np.where(adj, 1.0 / (1 + np.maximum(deg[:, None], deg[None, :])), 0.0)
    W[np.diag_indices(p)] = 1.0 - W.sum(axis=1)
    return W


def make_topology(
    kind: str,
    p: int,
    seed: int = 0,
    self_weight: float = 0.5,
    radius: float = 0.5,
    zeta: float | None = None,
) -> MixingMatrix:
    """Build a built-in topology.

    ``kind`` is one of ``complete``, ``ring``, ``random_geometric`` or ``lazy_complete``.
    ``lazy_complete`` is ``zeta I + (1 - zeta) J / p`` and realises any prescribed zeta.
    """
    if p < 1:
        raise InvalidArgument("need p >= 1")
    kind = kind.replace("-", "_")
    if kind == "complete":
        W = np.full((p, p), 1.0 / p)
    elif kind == "ring":
        W = _ring(p, self_weight)
    elif kind == "random_geometric":
        W = _random_geometric(p, radius, seed)
    elif kind == "lazy_complete":
        if zeta is None or not (0 <= zeta < 1):
            raise InvalidMixing("lazy_complete needs 0 <= zeta < 1")
        W = zeta * np.eye(p) + (1 - zeta) * np.full((p, p), 1.0 / p)
    else:
        raise InvalidArgument(f"unknown topology kind {kind!r}")
    return validate_mixing(W)


def topology_from_dict(data: dict) -> MixingMatrix:
    """Build from a config entry ``{kind, p, self_weight?, seed?, radius?, zeta?}``."""
    allowed = {"kind", "p", "self_weight", "seed", "radius", "zeta"}
    unknown = set(data) - allowed
    if unknown:
        raise InvalidArgument(f"unknown topology fields: {sorted(unknown)}")
    args = dict(data)
    return make_topology(args.pop("kind"), int(args.pop("p")), **args)
