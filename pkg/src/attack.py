import math
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from config.settings import settings
from src.core import Image, VectorLike, as_vector, clip, l2, make_rng, mse
from src.errors import (
    ConfigError, ContractError, ConvergedSignal, DimensionError, DomainError,
    QebaError, QueryBudgetExceeded,
)
from src.gradest import estimate_gradient, estimate_gradient_discretized
from src.subspace import SubspaceBasis
from src.victim import HardLabelOracle

logger = logging.getLogger(__name__)

CONVERGED_DISTANCE = 1e-12
TRACE_COLUMNS = ["iteration", "cumulative_queries", "mse", "xi", "delta", "alpha", "step_failures"]


class StepFailure(QebaError):
    """No adversarial point along the step direction within the halving cap."""

    def __init__(self, halvings: int, queries: int):
        super().__init__(f"gradient step failed after {halvings} halvings ({queries} queries)")
        self.halvings = halvings
        self.queries = queries


@dataclass
class Projection:
    point: np.ndarray
    alpha: float
    queries: int


@dataclass
class StepResult:
    point: np.ndarray
    xi: float
    halvings: int


@dataclass
class AttackConfig:
    source: Image
    target: Image
    batch_size: int = settings.attack.batch_size
    max_queries: int = 20000
    # None selects m^(-3/2)
    theta: Optional[float] = None
    seed: int = 0
    discretized: bool = False
    orthogonalize: bool = False
    control_variate: bool = False
    step_halvings: int = settings.attack.step_halvings
    workers: int = 1
    log_every: int = settings.attack.log_every

    def __post_init__(self):
        if self.source.shape != self.target.shape:
            raise ConfigError("target", f"shape {self.target.shape} differs from source {self.source.shape}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be at least 1")
        if self.max_queries < 2:
            raise ConfigError("max_queries", "need at least the two endpoint checks")
        if self.theta is not None and not 0.0 < self.theta < 1.0:
            raise ConfigError("theta", f"must lie in (0, 1), got {self.theta}")
        if self.step_halvings < 0:
            raise ConfigError("step_halvings", "must be non-negative")

    @property
    def tolerance(self) -> float:
        if self.theta is not None:
            return self.theta
        return float(self.source.m) ** -1.5


@dataclass
class TraceRecord:
    iteration: int
    cumulative_queries: int
    mse: float
    xi: float
    delta: float
    alpha: float
    step_failures: int


@dataclass
class AttackTrace:
    records: List[TraceRecord] = field(default_factory=list)
    final: Optional[Image] = None
    # iteration -> iterate, kept at t = 1, 2, 4, 8, ...
    snapshots: Dict[int, Image] = field(default_factory=dict)
    initial_mse: float = float("nan")
    converged: bool = False
    # every iterate, for replay checks; not written to disk
    iterates: List[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def final_mse(self) -> float:
        return self.records[-1].mse if self.records else float("nan")

    @property
    def queries(self) -> int:
        return self.records[-1].cumulative_queries if self.records else 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.records], columns=TRACE_COLUMNS)


def _mix(x_hat: np.ndarray, x_tgt: np.ndarray, alpha: float) -> np.ndarray:
    return clip((1.0 - alpha) * x_hat + alpha * x_tgt)


def binary_search_projection(x_tgt: VectorLike, x_hat: VectorLike, oracle: HardLabelOracle,
                             theta: float, check_endpoints: bool = True) -> Projection:
    """
    Bisects alpha in [0, 1] on the segment (1 - alpha)*x_hat + alpha*x_tgt
    until the bracket is at most theta wide, and returns the adversarial
    end. With `check_endpoints` the preconditions phi(x_hat) = +1 and
    phi(x_tgt) = -1 are queried first.

    If the budget runs out during bisection the QueryBudgetExceeded error
    carries the last adversarial Projection as `partial`.
    """
    if not 0.0 < theta < 1.0:
        raise DomainError(f"tolerance must lie in (0, 1), got {theta}")
    tgt, hat = as_vector(x_tgt), as_vector(x_hat)
    if tgt.shape != hat.shape:
        raise DimensionError(f"shape mismatch: {tgt.shape} vs {hat.shape}")
    start = oracle.query_count
    if check_endpoints:
        if oracle.phi(hat) != 1:
            raise ContractError("projection start point is not adversarial")
        if oracle.phi(tgt) != -1:
            raise ContractError("projection target is adversarial")

    lo, hi = 0.0, 1.0
    while hi - lo > theta:
        mid = 0.5 * (lo + hi)
        try:
            decision = oracle.phi(_mix(hat, tgt, mid))
        except QueryBudgetExceeded as exc:
            exc.partial = Projection(_mix(hat, tgt, lo), lo, oracle.query_count - start)
            raise
        if decision == 1:
            lo = mid
        else:
            hi = mid
    return Projection(_mix(hat, tgt, lo), lo, oracle.query_count - start)


def step_size(t: int, dist: float) -> float:
    if t < 1:
        raise DomainError(f"iteration must be >= 1, got {t}")
    if dist < 0:
        raise DomainError(f"distance must be non-negative, got {dist}")
    return dist / math.sqrt(t)


def probe_delta(dist: float, m: int) -> float:
    if m < 1:
        raise DomainError(f"dimension must be >= 1, got {m}")
    if dist <= 0:
        raise ConvergedSignal("iterate coincides with the target")
    return dist / m


def gradient_step(x: VectorLike, g: np.ndarray, xi: float, oracle: HardLabelOracle,
                  max_halvings: int = 20) -> StepResult:
    """Tries clip(x + xi/2^k * g) for k = 0..max_halvings and keeps the first adversarial one."""
    x = as_vector(x)
    g = as_vector(g)
    if abs(np.linalg.norm(g) - 1.0) > 1e-8:
        raise ContractError("step direction must have unit norm")
    if xi <= 0:
        raise DomainError(f"step size must be positive, got {xi}")
    for k in range(max_halvings + 1):
        step = xi / 2 ** k
        candidate = clip(x + step * g)
        if oracle.phi(candidate) == 1:
            return StepResult(candidate, step, k)
    raise StepFailure(max_halvings, max_halvings + 1)


def _is_snapshot_iteration(t: int) -> bool:
    return t >= 1 and t & (t - 1) == 0


def run_attack(config: AttackConfig, oracle: HardLabelOracle, basis: SubspaceBasis) -> AttackTrace:
    """
    Targeted boundary attack: project the source onto the boundary toward
    the target, then repeat estimate / step / project until the budget is
    spent or the iterate reaches the target. The oracle budget is capped at
    config.max_queries.
    """
    src, tgt = config.source, config.target
    m = src.m
    if basis.m != m:
        raise DimensionError(f"basis maps into {basis.m} values, images have {m}")
    if oracle.budget is None or oracle.budget > oracle.query_count + config.max_queries:
        oracle.budget = oracle.query_count + config.max_queries
    theta = config.tolerance
    rng = make_rng(config.seed)
    estimate = estimate_gradient_discretized if config.discretized else estimate_gradient
    x_tgt = tgt.data

    if oracle.phi(src) != 1:
        raise ConfigError("source", "source image is not classified malicious")
    if oracle.phi(tgt) != -1:
        raise ConfigError("target", "target image is classified malicious")

    trace = AttackTrace(initial_mse=mse(src, tgt))

    def record(t: int, x: np.ndarray, xi: float, delta: float, alpha: float, failures: int):
        trace.records.append(TraceRecord(
            t, oracle.query_count, mse(x, x_tgt), xi, delta, alpha, failures,
        ))
        trace.iterates.append(x)
        if _is_snapshot_iteration(t):
            trace.snapshots[t] = src.with_data(x)

    logger.info(
        f"Starting attack: m={m}, basis={basis!r}, B={config.batch_size}, "
        f"budget={config.max_queries}, theta={theta:.3g}, seed={config.seed}"
    )
    try:
        init = binary_search_projection(x_tgt, src.data, oracle, theta, check_endpoints=False)
    except QueryBudgetExceeded as exc:
        if isinstance(exc.partial, Projection):
            init = exc.partial
        else:
            init = Projection(src.data.copy(), 0.0, 0)
        logger.warning(f"Budget exhausted during initialization after {exc.count} queries")
        record(0, init.point, float("nan"), float("nan"), init.alpha, 0)
        trace.final = src.with_data(init.point)
        return trace

    x = init.point
    record(0, x, float("nan"), float("nan"), init.alpha, 0)
    failures = 0
    t = 0
    while True:
        dist = l2(x - x_tgt)
        if dist < CONVERGED_DISTANCE:
            trace.converged = True
            logger.info(f"Converged at iteration {t}")
            break
        t += 1
        delta = probe_delta(dist, m)
        xi = step_size(t, dist)
        try:
            est = estimate(x, basis, config.batch_size, delta, oracle, rng,
                           orthogonalize=config.orthogonalize,
                           control_variate=config.control_variate, workers=config.workers)
            if est.degenerate:
                est = estimate(x, basis, config.batch_size, delta, oracle, rng,
                               orthogonalize=config.orthogonalize,
                               control_variate=config.control_variate, workers=config.workers)
            x_hat = x
            if est.degenerate:
                failures += 1
                logger.warning(f"Iteration {t}: two degenerate batches, step skipped")
            else:
                try:
                    x_hat = gradient_step(x, est.direction, xi, oracle, config.step_halvings).point
                except StepFailure as exc:
                    failures += 1
                    logger.warning(f"Iteration {t}: {exc}")
            proj = binary_search_projection(x_tgt, x_hat, oracle, theta, check_endpoints=False)
        except QueryBudgetExceeded as exc:
            if isinstance(exc.partial, Projection):
                x = exc.partial.point
                record(t, x, xi, delta, exc.partial.alpha, failures)
            logger.info(f"Budget exhausted at iteration {t} after {exc.count} queries")
            break
        x = proj.point
        record(t, x, xi, delta, proj.alpha, failures)
        if config.log_every and t % config.log_every == 0:
            logger.info(
                f"Iteration {t}: queries={oracle.query_count}, mse={trace.records[-1].mse:.4g}, "
                f"xi={xi:.3g}, delta={delta:.3g}, failures={failures}"
            )

    trace.final = src.with_data(x)
    logger.info(
        f"Attack finished: {len(trace.records) - 1} iterations, {oracle.query_count} queries, "
        f"mse {trace.initial_mse:.4g} -> {trace.final_mse:.4g}"
    )
    return trace


def replay_adversarial(trace: AttackTrace, oracle: HardLabelOracle) -> bool:
    """Re-checks every recorded iterate without spending budget."""
    return all(oracle.check(x) == 1 for x in trace.iterates)
