import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from src.core import RngStream, VectorLike, as_vector, clip, sample_unit_directions
from src.errors import ContractError, DimensionError, DomainError
from src.subspace import SubspaceBasis
from src.victim import HardLabelOracle, discretize

logger = logging.getLogger(__name__)

_BOX_SLACK = 1e-12


@dataclass
class GradEstimate:
    """
    One Monte Carlo estimate of the boundary normal. `raw` is the weighted
    average before normalization; `direction` is raw/||raw|| (zeros when
    raw vanishes). `degenerate` marks a batch that carries no sign
    information: raw = 0, or more than one probe and every probe agreed.
    """
    direction: np.ndarray
    raw: np.ndarray
    B: int
    delta: float
    queries_used: int
    degenerate: bool
    decisions: np.ndarray = field(repr=False)
    # probes whose displacement was rounded away entirely (discretized form)
    absorbed: int = 0

    @property
    def agreement(self) -> float:
        """Fraction of probes answering +1."""
        return float(np.mean(self.decisions > 0))


def _check_inputs(x: np.ndarray, basis: SubspaceBasis, B: int, delta: float) -> None:
    if delta <= 0:
        raise DomainError(f"probe radius must be positive, got {delta}")
    if B < 1:
        raise DomainError(f"batch size must be at least 1, got {B}")
    if x.size != basis.m:
        raise DimensionError(f"point has {x.size} values, basis maps into {basis.m}")
    if x.min() < -_BOX_SLACK or x.max() > 1.0 + _BOX_SLACK:
        raise ContractError("estimation point lies outside [0, 1]^m")


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DimensionError("basis mapped a unit direction to zero")
    return rows / norms


def sample_perturbations(basis: SubspaceBasis, B: int, rng: RngStream,
                         orthogonalize: bool = False) -> np.ndarray:
    """u_b = normalize(W v_b) for B directions v_b on the unit sphere of R^n, as (B, m) rows."""
    v = sample_unit_directions(basis.n, B, rng, orthogonalize=orthogonalize)
    return _unit_rows(basis.forward(v))


def query_batch(oracle: HardLabelOracle, points: np.ndarray, workers: int = 1) -> np.ndarray:
    """
    Asks the oracle about every row of `points`. The result keeps the row
    order whatever the number of workers, so phi_b always pairs with u_b.
    """
    if workers > 1 and len(points) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            decisions = list(pool.map(oracle.phi, points))
    else:
        decisions = [oracle.phi(p) for p in points]
    return np.asarray(decisions, dtype=np.float64)


def _combine(decisions: np.ndarray, directions: np.ndarray,
             control_variate: bool) -> np.ndarray:
    weights = decisions
    if control_variate:
        weights = decisions - decisions.mean()
    return weights @ directions / len(decisions)


def _finish(raw: np.ndarray, decisions: np.ndarray, delta: float,
            absorbed: int = 0) -> GradEstimate:
    B = len(decisions)
    norm = float(np.linalg.norm(raw))
    unanimous = B > 1 and bool(np.all(decisions == decisions[0]))
    degenerate = norm == 0.0 or unanimous
    direction = raw / norm if norm > 0.0 else np.zeros_like(raw)
    if degenerate:
        logger.warning(
            f"Degenerate gradient batch: B={B}, delta={delta:.3g}, "
            f"+1 fraction={float(np.mean(decisions > 0)):.2f}, absorbed={absorbed}"
        )
    return GradEstimate(direction, raw, B, float(delta), B, degenerate, decisions, absorbed)


def estimate_gradient(x: VectorLike, basis: SubspaceBasis, B: int, delta: float,
                      oracle: HardLabelOracle, rng: RngStream,
                      orthogonalize: bool = False, control_variate: bool = False,
                      workers: int = 1) -> GradEstimate:
    """
    raw = (1/B) sum_b phi(clip(x + delta*u_b)) * u_b. Consumes exactly B
    queries; a budget error raised mid-batch carries the oracle's count.
    """
    x = as_vector(x)
    _check_inputs(x, basis, B, delta)
    u = sample_perturbations(basis, B, rng, orthogonalize)
    points = clip(x[None, :] + delta * u)
    decisions = query_batch(oracle, points, workers)
    return _finish(_combine(decisions, u, control_variate), decisions, delta)


def effective_directions(x: VectorLike, delta: float,
                         directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rounds each probe x + delta*u_b onto the 8-bit grid. Returns the
    discretized points and the effective perturbations
    u'_b = (P_rd(x + delta*u_b) - x) / delta.
    """
    x = as_vector(x)
    points = discretize(x[None, :] + delta * np.atleast_2d(directions))
    return points, (points - x[None, :]) / delta


def estimate_gradient_discretized(x: VectorLike, basis: SubspaceBasis, B: int, delta: float,
                                  oracle: HardLabelOracle, rng: RngStream,
                                  orthogonalize: bool = False, control_variate: bool = False,
                                  workers: int = 1) -> GradEstimate:
    """
    Discretization-aware estimate: phi is asked about the rounded probe and
    weighted by the perturbation that actually survived rounding.
    """
    x = as_vector(x)
    _check_inputs(x, basis, B, delta)
    u = sample_perturbations(basis, B, rng, orthogonalize)
    points, effective = effective_directions(x, delta, u)
    absorbed = int(np.sum(~np.any(effective, axis=1)))
    decisions = query_batch(oracle, points, workers)
    return _finish(_combine(decisions, effective, control_variate), decisions, delta, absorbed)
