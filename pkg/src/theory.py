"""
Closed-form expected-cosine quantities for the Monte Carlo gradient
estimator and a whitebox harness that measures them on analytic victims.

Everything here evaluates phi straight from the victim. Nothing goes
through a HardLabelOracle, so no attack budget is touched.
"""
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import betaln

from src.core import RngStream, VectorLike, as_vector, derive_rng, sample_unit_directions
from src.errors import BoundVacuousError, ContractError, DimensionError, DomainError
from src.subspace import SubspaceBasis, orthonormalized, rho as subspace_rho
from src.victim import AnalyticVictim

logger = logging.getLogger(__name__)

BOUNDARY_TOLERANCE = 1e-9


@dataclass
class BoundReport:
    n: int
    B: int
    rho: float
    delta: float
    L: float
    grad_norm: float
    c_n: float
    lower: float
    upper: float
    measured: float
    stderr: float
    trials: int
    orthogonal: bool = True
    measured_span: float = float("nan")
    vacuous: bool = False

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def within_bounds(self, sigmas: float = 3.0) -> bool:
        """lower - k*stderr <= measured <= upper + k*stderr; a NaN lower bound is not checked."""
        slack = sigmas * self.stderr
        if self.measured > self.upper + slack:
            return False
        if not math.isnan(self.lower) and self.measured < self.lower - slack:
            return False
        return True


def c_coefficient(n: int) -> float:
    """c_n = 2*sqrt(n) / (Beta((n-1)/2, 1/2) * (n-1)), evaluated in log space."""
    if n < 2:
        raise DomainError(f"c_n needs n >= 2, got {n}")
    log_c = math.log(2.0) + 0.5 * math.log(n) - betaln((n - 1) / 2.0, 0.5) - math.log(n - 1)
    return math.exp(log_c)


def expected_cosine(n: int, B: int, rho: float) -> float:
    """Small-delta limit of E[cos(estimate, grad S)] = c_n * rho * sqrt(B/n)."""
    if not 0.0 <= rho <= 1.0:
        raise DomainError(f"rho must lie in [0, 1], got {rho}")
    if not 1 <= B <= n:
        raise DomainError(f"batch size must lie in [1, {n}], got {B}")
    return c_coefficient(n) * rho * math.sqrt(B / n)


def lower_bound_factor(n: int, delta: float, L: float, grad_norm: float) -> float:
    """2*(1 - w^2)^((n-1)/2) - 1 with w = L*delta / (2*||grad S||)."""
    if grad_norm <= 0:
        raise DomainError(f"gradient norm must be positive, got {grad_norm}")
    if delta < 0 or L < 0:
        raise DomainError("delta and L must be non-negative")
    w = L * delta / (2.0 * grad_norm)
    if w >= 1.0:
        raise BoundVacuousError(w)
    return 2.0 * math.exp((n - 1) / 2.0 * math.log1p(-w * w)) - 1.0


def coordinate_density(x: float, n: int) -> float:
    """Density of one coordinate of a uniform point on the unit sphere in R^n."""
    if n < 2:
        raise DomainError(f"density needs n >= 2, got {n}")
    if abs(x) >= 1.0:
        raise DomainError(f"coordinate must lie in (-1, 1), got {x}")
    log_p = (n - 3) / 2.0 * math.log1p(-x * x) - betaln((n - 1) / 2.0, 0.5)
    return math.exp(log_p)


def boundary_point(victim: AnalyticVictim, start: VectorLike) -> np.ndarray:
    """
    Moves `start` onto the decision boundary in closed form: along w for a
    linear victim, radially for a quadratic one. Other victims fall back to
    a whitebox bisection toward a point of opposite sign.
    """
    x = np.array(as_vector(start), dtype=np.float64)
    if victim.name == "linear":
        w = victim.params["w"]
        return x - victim.score(x) / float(np.dot(w, w)) * w
    if victim.name == "quadratic":
        c, r = victim.params["center"], victim.params["radius"]
        offset = x - c
        norm = np.linalg.norm(offset)
        if norm == 0.0:
            raise ContractError("start point sits at the center of the sphere")
        return c + r * offset / norm
    raise ContractError(f"no closed-form boundary for '{victim.name}' victims; use bisect_boundary")


def bisect_boundary(victim: AnalyticVictim, a: VectorLike, b: VectorLike,
                    iterations: int = 200) -> np.ndarray:
    """Whitebox bisection on the score along [a, b]; S(a) and S(b) must differ in sign."""
    a, b = as_vector(a), as_vector(b)
    sa, sb = victim.score(a), victim.score(b)
    if (sa >= 0) == (sb >= 0):
        raise ContractError("segment end points have the same decision")
    lo, hi = (a, b) if sa >= 0 else (b, a)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if np.array_equal(mid, lo) or np.array_equal(mid, hi):
            break
        if victim.score(mid) >= 0:
            lo = mid
        else:
            hi = mid
    return lo


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _one_trial(victim: AnalyticVictim, x: np.ndarray, basis: SubspaceBasis, B: int,
               delta: float, rng: RngStream, orthogonalize: bool,
               g: np.ndarray, g_span: Optional[np.ndarray]) -> Tuple[float, float]:
    v = sample_unit_directions(basis.n, B, rng, orthogonalize=orthogonalize)
    u = basis.forward(v)
    u = u / np.linalg.norm(u, axis=1, keepdims=True)
    decisions = np.array([victim.phi(x + delta * ub) for ub in u], dtype=np.float64)
    raw = decisions @ u / B
    span_cos = _cosine(raw, g_span) if g_span is not None else float("nan")
    return _cosine(raw, g), span_cos


def measure_cosine(victim: AnalyticVictim, boundary_point: VectorLike, basis: SubspaceBasis,
                   B: int, delta: float, trials: int, rng: RngStream,
                   orthogonalize: bool = True, workers: int = 1) -> BoundReport:
    """
    Runs `trials` independent estimates at a boundary point and compares
    the mean cosine to the analytic gradient with the closed-form bounds.
    Probes are not clipped to the pixel box here.
    """
    x = as_vector(boundary_point)
    if x.size != basis.m or x.size != victim.m:
        raise DimensionError(f"point has {x.size} values, basis {basis.m}, victim {victim.m}")
    if trials < 2:
        raise DomainError("need at least two trials for a standard error")
    if delta <= 0:
        raise DomainError(f"probe radius must be positive, got {delta}")
    if B < 1 or B > basis.n:
        raise DomainError(f"batch size must lie in [1, {basis.n}], got {B}")
    g = victim.gradient(x)
    grad_norm = float(np.linalg.norm(g))
    if grad_norm == 0.0:
        raise ContractError("gradient vanishes at the boundary point")
    if abs(victim.score(x)) >= BOUNDARY_TOLERANCE * grad_norm:
        raise ContractError(f"point is not on the boundary: S = {victim.score(x):.3g}")

    ortho = basis if basis.orthonormal else orthonormalized(basis)
    rho_value = subspace_rho(ortho, g)
    g_span = ortho.forward(ortho.adjoint(g))
    if np.linalg.norm(g_span) == 0.0:
        g_span = None

    root = int(rng.integers(0, 2 ** 63 - 1))
    streams = [derive_rng(root, i) for i in range(trials)]

    def run(stream: RngStream) -> Tuple[float, float]:
        return _one_trial(victim, x, basis, B, delta, stream, orthogonalize, g, g_span)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, streams))
    else:
        results = [run(s) for s in streams]
    cosines = np.array([r[0] for r in results])
    span_cosines = np.array([r[1] for r in results])

    n = basis.n
    L = victim.lipschitz
    c_n = c_coefficient(n) if n >= 2 else float("nan")
    upper = expected_cosine(n, B, rho_value) if n >= 2 else float("nan")
    lower, vacuous = float("nan"), False
    if L is not None and n >= 2:
        try:
            lower = lower_bound_factor(n, delta, L, grad_norm) * upper
        except BoundVacuousError as exc:
            vacuous = True
            logger.warning(f"Lower bound vacuous for n={n}, delta={delta:.3g}: w={exc.w:.3g}")

    report = BoundReport(
        n=n, B=B, rho=rho_value, delta=float(delta),
        L=float("nan") if L is None else float(L), grad_norm=grad_norm,
        c_n=c_n, lower=lower, upper=upper,
        measured=float(cosines.mean()), stderr=float(cosines.std(ddof=1) / math.sqrt(trials)),
        trials=trials, orthogonal=orthogonalize,
        measured_span=float(np.nanmean(span_cosines)) if g_span is not None else float("nan"),
        vacuous=vacuous,
    )
    logger.info(
        f"n={n} B={B} rho={rho_value:.3f} delta={delta:.3g}: measured {report.measured:.4f} "
        f"+/- {report.stderr:.4f}, bounds [{report.lower:.4f}, {report.upper:.4f}]"
    )
    return report


def relative_delta(d: float, victim: AnalyticVictim, grad_norm: float) -> float:
    """Grid value d on the ||grad S||/L scale; plain d when the gradient is constant."""
    L = victim.lipschitz
    if L is None or L == 0.0:
        return d
    return d * grad_norm / L
