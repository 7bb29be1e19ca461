"""Admissibility conditions on learning rate and local-update count, with max-eta / max-E solvers.

Each checker returns a :class:`ConditionReport`.  ``max_eta`` is the largest step
size satisfying the condition at the given ``E`` and ``max_E`` the largest integer
``E`` satisfying it at the given step size (``None`` when even ``E = 1`` fails).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgument

BISECT_RTOL = 1e-10
E_CAP = 1_000_000


@dataclass
class ConditionReport:
    satisfied: bool
    lhs: float
    rhs: float
    binding_margin: float
    max_E: int | None = None
    max_eta: float | None = None
    min_E: int | None = None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in list(out.items()):
            if isinstance(v, float) and not math.isfinite(v):
                out[k] = None if math.isnan(v) else ("inf" if v > 0 else "-inf")
        return out


def _report(lhs, rhs, **kw) -> ConditionReport:
    return ConditionReport(bool(lhs <= rhs), float(lhs), float(rhs), float(rhs - lhs), **kw)


def _bisect_max(ok, hi: float) -> float:
    """Largest ``x`` in ``(0, hi]`` with ``ok(x)``, for a predicate true near 0 and monotone."""
    if ok(hi):
        return hi
    lo = hi
    while not ok(lo):
        lo /= 2
        if lo < 1e-300:
            raise InvalidArgument("condition fails for every positive step size")
    hi_ = min(hi, 2 * lo)
    while (hi_ - lo) > BISECT_RTOL * lo * 1e-2:
        mid = 0.5 * (lo + hi_)
        if mid in (lo, hi_):
            break
        if ok(mid):
            lo = mid
        else:
            hi_ = mid
    return lo


def _max_E(lhs_of_E, rhs) -> tuple[int | None, bool]:
    """Scan ``E = 1 .. E_CAP``; return (largest satisfying E, whether the cap was hit)."""
    E = np.arange(1, E_CAP + 1, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        vals = lhs_of_E(E)
    bad = ~(vals <= rhs)
    if not bad.any():
        return E_CAP, True
    first = int(np.argmax(bad))
    return (None if first == 0 else first), False


def _positive(name, value):
    if not (value > 0 and math.isfinite(value)):
        raise InvalidArgument(f"{name} must be a finite positive number, got {value}")


def _common(E, lam):
    if int(E) != E or E < 1:
        raise InvalidArgument(f"E must be an integer >= 1, got {E}")
    if not (lam >= 1):
        raise InvalidArgument(f"diversity bound lambda must be >= 1, got {lam}")


# ---------------------------------------------------------------------------
# Local GD


def lfgd_lhs(eta, E, L, mu, variant: str = "lemma"):
    """``eta (L + c E / (mu (1 - mu eta)^(E-1)))``.

    ``variant="lemma"`` uses ``c = 4 L^2``; ``variant="theorem"`` uses the stricter
    ``c = 4 kappa L^2`` with ``kappa = L/mu``.
    """
    c = 4 * L**2 if variant == "lemma" else 4 * (L / mu) * L**2
    with np.errstate(over="ignore"):
        shrink = np.exp(-(np.asarray(E, dtype=np.float64) - 1) * np.log1p(-mu * eta))
    return eta * (L + c * E * shrink / mu)


def check_lfgd(eta, E, L, mu, lam, variant: str = "lemma") -> ConditionReport:
    """Local GD step-size condition ``eta (L + 4 E L^2 / (mu (1 - mu eta)^(E-1))) <= 1/lambda``."""
    _positive("eta", eta)
    _positive("L", L)
    _positive("mu", mu)
    _common(E, lam)
    if variant not in ("lemma", "theorem"):
        raise InvalidArgument("variant must be 'lemma' or 'theorem'")
    if mu * eta >= 1:
        raise InvalidArgument(f"mu * eta = {mu * eta} >= 1: contraction factor is non-positive")
    rhs = 1.0 / lam
    lhs = float(lfgd_lhs(eta, E, L, mu, variant))
    eta_cap = np.nextafter(1.0 / mu, 0.0)
    max_eta = _bisect_max(lambda x: lfgd_lhs(x, E, L, mu, variant) <= rhs, eta_cap)
    max_E, capped = _max_E(lambda Es: lfgd_lhs(eta, Es, L, mu, variant), rhs)
    return _report(
        lhs, rhs, max_E=max_E, max_eta=max_eta,
        details={"variant": variant, "max_E_capped": capped, "kappa": L / mu},
    )


# ---------------------------------------------------------------------------
# Local SGD under PL


def pl_alpha_denominator(alpha, K, lam, kappa) -> float:
    return lam * (K + 1) / K * 192 * kappa**2 * math.exp(4 / alpha) - alpha**2


def pl_min_E_real(alpha, K, lam, kappa) -> float:
    den = pl_alpha_denominator(alpha, K, lam, kappa)
    if den <= 0:
        return math.inf
    return 1 + (alpha**2 + 6 * alpha) / den + math.sqrt(5) / math.sqrt(den)


def _pl_technical(alpha, E, K, L, mu, C1) -> dict:
    a = alpha * E + 4
    # first inequality compared in logs; its right side vanishes at E = 1
    if E == 1:
        first = False
    else:
        log_l = math.log(4) + (E - 1) * math.log(a - 3) + math.log(L) + math.log(C1 + K)
        log_r = (
            math.log(64) + 2 * math.log(L) + math.log((K + 1) / (mu * K))
            + math.log(E - 1) + math.log(E) + (E - 2) * math.log(a + 1)
        )
        first = log_l <= log_r
    # second inequality: the common factor 32 L^2 (E-1)(a+1)^(E-2)/mu cancels
    second = E == 1 or C1 <= 2 * E
    return {"technical_1": bool(first), "technical_2": bool(second)}


def check_lfsgd_pl(
    alpha, E, K, lam, kappa, strict: bool = False, L=None, mu=None, C1=None
) -> ConditionReport:
    """PL local-SGD conditions on ``alpha`` and on the minimal number of local updates.

    The report's ``lhs``/``rhs`` describe the binding sub-condition: the
    ``alpha`` inequality when it fails, else ``min_E_real <= E``.  ``strict=True``
    additionally requires the two technical inequalities (needs ``L``, ``mu``, ``C1``).
    """
    _positive("alpha", alpha)
    _common(E, lam)
    if K < 1:
        raise InvalidArgument(f"K must be >= 1, got {K}")
    if not kappa >= 1:
        raise InvalidArgument(f"kappa must be >= 1, got {kappa}")
    a_lhs = alpha * math.exp(-2 / alpha)
    a_rhs = kappa * math.sqrt(192 * lam * (K + 1) / K)
    den = pl_alpha_denominator(alpha, K, lam, kappa)
    alpha_ok = a_lhs < a_rhs and den > 0
    details = {
        "alpha_condition": bool(alpha_ok),
        "alpha_lhs": a_lhs,
        "alpha_rhs": a_rhs,
        "denominator": den,
        "a": alpha * E + 4,
    }
    if not alpha_ok:
        details["E_condition"] = False
        return ConditionReport(False, a_lhs, a_rhs, a_rhs - a_lhs, details=details)
    e_min = pl_min_E_real(alpha, K, lam, kappa)
    min_E = math.ceil(e_min)
    details["E_condition"] = E >= e_min
    details["min_E_real"] = e_min
    satisfied = E >= e_min
    if strict:
        if L is None or mu is None or C1 is None:
            raise InvalidArgument("strict mode needs L, mu and C1")
        tech = _pl_technical(alpha, int(E), K, L, mu, C1)
        details.update(tech)
        satisfied = satisfied and tech["technical_1"] and tech["technical_2"]
    return ConditionReport(
        bool(satisfied), e_min, float(E), float(E - e_min), min_E=min_E, details=details
    )


# ---------------------------------------------------------------------------
# Local SGD, general nonconvex


def nonconvex_lhs(eta, E, K, L, lam, C1):
    E = np.asarray(E, dtype=np.float64)
    return (
        -eta / (2 * lam)
        + (K + 1) * L**2 * eta**3 * (2 * C1 + E * (E + 1)) / (2 * K)
        + L * eta**2 * (C1 / K + 1) / 2
    )


def nonconvex_max_eta(E, K, L, lam, C1) -> float:
    b = L * (C1 / K + 1)
    a2 = (K + 1) / K * L**2 * (2 * C1 + E * (E + 1))
    # rationalised root of a2 x^2 + b x - 1/lam = 0 (no cancellation)
    eta = (2 / lam) / (b + math.sqrt(b * b + 4 * a2 / lam))
    while nonconvex_lhs(eta, E, K, L, lam, C1) > 0:
        eta = float(np.nextafter(eta, 0.0))
    return eta


def check_lfsgd_nonconvex(eta, E, K, L, lam, C1) -> ConditionReport:
    """Nonconvex local-SGD condition: the cubic in ``eta`` must be ``<= 0``."""
    _positive("eta", eta)
    _positive("L", L)
    _common(E, lam)
    if K < 1:
        raise InvalidArgument(f"K must be >= 1, got {K}")
    if C1 < 0:
        raise InvalidArgument("C1 must be non-negative")
    lhs = float(nonconvex_lhs(eta, E, K, L, lam, C1))
    max_E, capped = _max_E(lambda Es: nonconvex_lhs(eta, Es, K, L, lam, C1), 0.0)
    return _report(
        lhs, 0.0, max_E=max_E, max_eta=nonconvex_max_eta(E, K, L, lam, C1),
        details={"max_E_capped": capped},
    )


def nonconvex_reduced_margin(E, K, T, lam, C1, exact: bool = True) -> float:
    """Margin of the condition at ``eta = sqrt(K/T)/L`` written as a bound on ``E``.

    Returns ``T/K (K/(lam(K+1)) - sqrt(K/T)(K+C1)/(K+1)) - 2 C1 - X`` with
    ``X = E(E+1)`` (exact) or the slightly stricter ``X = (E+1)^2``.  For the exact
    form, ``lhs = -(eta/2) ((K+1)/T) margin``.
    """
    bound = T / K * (K / (lam * (K + 1)) - math.sqrt(K / T) * (K + C1) / (K + 1)) - 2 * C1
    return bound - (E * (E + 1) if exact else (E + 1) ** 2)


# ---------------------------------------------------------------------------
# Networked local SGD


def nfsgd_lhs(eta, E, p, L, C1, zeta):
    E = np.asarray(E, dtype=np.float64)
    mid = 2 * zeta**2 / (1 + zeta) + 2 * zeta / (1 - zeta) + (E - 1) / E
    return (
        2 * L**2 * eta**2 * C1 * E / (1 - zeta**2)
        + L**2 * eta**2 * E**2 / (1 - zeta) * mid
        + eta * L * (C1 / p + 1)
    )


def nfsgd_simplified_lhs(eta, E, p, L, C1, zeta):
    return eta * L * (C1 / p + 2) + 5 * eta**2 * L**2 * E**2 / (1 - zeta) ** 2


def check_nfsgd(eta, E, p, L, lam, C1, zeta, T=None) -> ConditionReport:
    """Networked local-SGD step-size condition.

    The report also carries the simplified sufficient form and, when ``T`` is
    given, the bound ``E <= (1 - zeta) sqrt(T / (10 lam p))`` meant for the step
    size ``sqrt(p/T)/L``.  The simplified form implies the full one whenever
    ``C1 <= 1.5 E (1 + zeta)/(1 - zeta)``; for larger ``C1`` it can be weaker.
    """
    _positive("eta", eta)
    _positive("L", L)
    _common(E, lam)
    if not (0 <= zeta < 1):
        raise InvalidArgument(f"zeta must lie in [0, 1), got {zeta}")
    if p < 1:
        raise InvalidArgument("p must be >= 1")
    if C1 < 0:
        raise InvalidArgument("C1 must be non-negative")
    rhs = 1.0 / lam
    lhs = float(nfsgd_lhs(eta, E, p, L, C1, zeta))
    simp = float(nfsgd_simplified_lhs(eta, E, p, L, C1, zeta))
    details = {
        "simplified_lhs": simp,
        "simplified_satisfied": bool(simp <= rhs),
        "simplified_implies_full": bool(C1 <= 1.5 * E * (1 + zeta) / (1 - zeta)),
    }
    if T is not None:
        e_bound = (1 - zeta) * math.sqrt(T / (10 * lam * p))
        details.update(
            E_bound=e_bound,
            E_bound_satisfied=bool(E <= e_bound),
            E_bound_valid=bool(T >= 4 * lam**2 * (C1 / p + 2) ** 2),
        )
    cap = 1.0
    while nfsgd_lhs(cap, E, p, L, C1, zeta) <= rhs:
        cap *= 2
    max_eta = _bisect_max(lambda x: nfsgd_lhs(x, E, p, L, C1, zeta) <= rhs, cap)
    max_E, capped = _max_E(lambda Es: nfsgd_lhs(eta, Es, p, L, C1, zeta), rhs)
    details["max_E_capped"] = capped
    return _report(lhs, rhs, max_E=max_E, max_eta=max_eta, details=details)
