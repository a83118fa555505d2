import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from src.core import Image, VectorLike, as_vector
from src.errors import (
    DegenerateVictimError, DimensionError, DomainError, QueryBudgetExceeded,
)

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass
class AnalyticVictim:
    """
    A victim whose adversarial score S and its gradient are known in closed
    form. phi = sign(S) with sign(0) = +1. `lipschitz` is the Lipschitz
    constant of grad S when known (None otherwise).
    """
    name: str
    m: int
    score: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    lipschitz: Optional[float] = None
    # closed-form parameters (w, b, center, radius) where the family has them
    params: Dict[str, Any] = field(default_factory=dict)

    def phi(self, x: VectorLike) -> int:
        """Whitebox decision; does not go through any query counter."""
        return 1 if self.score(as_vector(x)) >= 0 else -1


class HardLabelOracle:
    """
    Query-counted decision function. Only the sign is exposed. With
    `discretized` set, every query is rounded onto the 8-bit grid before the
    decision is taken (an API that accepts only 8-bit images).
    """

    def __init__(self, decide: Callable[[np.ndarray], int], budget: Optional[int] = None,
                 discretized: bool = False):
        if budget is not None and budget < 0:
            raise DomainError(f"budget must be non-negative, got {budget}")
        self._decide = decide
        self.budget = budget
        self.discretized = discretized
        self._count = 0
        self._lock = threading.Lock()

    @classmethod
    def from_victim(cls, victim: AnalyticVictim, budget: Optional[int] = None,
                    discretized: bool = False) -> "HardLabelOracle":
        return cls(victim.phi, budget=budget, discretized=discretized)

    @property
    def query_count(self) -> int:
        return self._count

    @property
    def remaining(self) -> Optional[int]:
        if self.budget is None:
            return None
        return self.budget - self._count

    def phi(self, x: VectorLike) -> int:
        with self._lock:
            if self.budget is not None and self._count >= self.budget:
                raise QueryBudgetExceeded(self._count)
            self._count += 1
        return self._evaluate(x)

    __call__ = phi

    def check(self, x: VectorLike) -> int:
        """Replays a decision without counting it. Used only to re-verify traces."""
        return self._evaluate(x)

    def _evaluate(self, x: VectorLike) -> int:
        v = as_vector(x)
        if self.discretized:
            v = discretize(v)
        decision = int(self._decide(v))
        if decision not in (-1, 1):
            raise DomainError(f"decision function returned {decision}, expected -1 or +1")
        return decision


def phi(oracle: HardLabelOracle, x: VectorLike) -> int:
    return oracle.phi(x)


def discretize(x: VectorLike) -> VectorLike:
    """
    Rounds every entry to the nearest k/255 (half away from zero, which for
    [0, 1] is half up). Idempotent.
    """
    if isinstance(x, Image):
        return x.with_data(discretize(x.data))
    v = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5) / 255.0


def make_linear_victim(w: np.ndarray, b: float) -> AnalyticVictim:
    """S(x) = <w, x> + b. The gradient is w everywhere, so L = 0."""
    w = np.array(as_vector(w), dtype=np.float64)
    if not np.any(w):
        raise DegenerateVictimError("linear victim needs a non-zero weight vector")
    b = float(b)

    def score(x: np.ndarray) -> float:
        return float(np.dot(w, x) + b)

    def gradient(x: np.ndarray) -> np.ndarray:
        return w.copy()

    return AnalyticVictim("linear", w.size, score, gradient, lipschitz=0.0,
                          params={"w": w, "b": b})


def make_quadratic_victim(center: VectorLike, radius: float,
                          inside_adversarial: bool = True) -> AnalyticVictim:
    """
    S(x) = r^2 - ||x - c||^2, so the decision boundary is the sphere of
    radius r and grad S = -2(x - c) has Lipschitz constant 2. With
    `inside_adversarial` unset the sign is flipped and the outside of the
    ball is adversarial.
    """
    if radius <= 0:
        raise DomainError(f"radius must be positive, got {radius}")
    c = np.array(as_vector(center), dtype=np.float64)
    r2 = float(radius) ** 2
    sign = 1.0 if inside_adversarial else -1.0

    def score(x: np.ndarray) -> float:
        d = x - c
        return sign * (r2 - float(np.dot(d, d)))

    def gradient(x: np.ndarray) -> np.ndarray:
        return sign * -2.0 * (x - c)

    return AnalyticVictim("quadratic", c.size, score, gradient, lipschitz=2.0,
                          params={"center": c, "radius": float(radius),
                                  "inside_adversarial": inside_adversarial})


@dataclass
class MlpLayer:
    weight: np.ndarray   # (out, in)
    bias: np.ndarray     # (out,)
    activation: str = "identity"

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpNetwork:
    layers: List[MlpLayer]
    malicious_class: int = 0

    def forward(self, x: np.ndarray):
        pre, post = [], [x]
        a = x
        for layer in self.layers:
            z = layer.weight @ a + layer.bias
            if layer.activation == "tanh":
                a = np.tanh(z)
            elif layer.activation == "relu":
                a = np.maximum(z, 0.0)
            else:
                a = z
            pre.append(z)
            post.append(a)
        return pre, post

    def runner_up(self, logits: np.ndarray) -> int:
        # ties resolved to the lowest class index
        others = logits.copy()
        others[self.malicious_class] = -np.inf
        return int(np.argmax(others))

    def score(self, x: np.ndarray) -> float:
        _, post = self.forward(x)
        logits = post[-1]
        return float(logits[self.malicious_class] - logits[self.runner_up(logits)])

    def gradient(self, x: np.ndarray) -> np.ndarray:
        pre, post = self.forward(x)
        logits = post[-1]
        upstream = np.zeros_like(logits)
        upstream[self.malicious_class] = 1.0
        upstream[self.runner_up(logits)] -= 1.0
        for layer, z, a in zip(reversed(self.layers), reversed(pre), reversed(post[1:])):
            if layer.activation == "tanh":
                upstream = upstream * (1.0 - a * a)
            elif layer.activation == "relu":
                upstream = upstream * (z > 0.0)
            upstream = layer.weight.T @ upstream
        return upstream


def validate_layers(layers: List[MlpLayer], malicious_class: int) -> None:
    if not layers:
        raise DimensionError("network has no layers")
    for i, layer in enumerate(layers):
        if layer.activation not in ACTIVATIONS:
            raise DimensionError(f"layer {i}: unknown activation '{layer.activation}'")
        if layer.bias.shape != (layer.n_out,):
            raise DimensionError(f"layer {i}: bias has shape {layer.bias.shape}, expected ({layer.n_out},)")
        if i and layers[i - 1].n_out != layer.n_in:
            raise DimensionError(
                f"layer {i} expects {layer.n_in} inputs but layer {i - 1} gives {layers[i - 1].n_out}"
            )
    n_classes = layers[-1].n_out
    if n_classes < 2:
        raise DimensionError("network needs at least two output classes")
    if not 0 <= malicious_class < n_classes:
        raise DimensionError(f"malicious class {malicious_class} outside 0..{n_classes - 1}")


def mlp_victim_from_layers(layers: List[MlpLayer], malicious_class: int = 0,
                           m: Optional[int] = None) -> AnalyticVictim:
    """S = logit(malicious) - max other logit, with an analytic backprop gradient."""
    validate_layers(layers, malicious_class)
    if m is not None and layers[0].n_in != m:
        raise DimensionError(f"network input is {layers[0].n_in}, images have {m} values")
    net = MlpNetwork(layers, malicious_class)
    return AnalyticVictim("mlp", layers[0].n_in, net.score, net.gradient, lipschitz=None)


def make_mlp_victim(weights_file: str, malicious_class: Optional[int] = None,
                    m: Optional[int] = None) -> AnalyticVictim:
    from src.extractor import read_mlp_weights

    layers, header_class = read_mlp_weights(weights_file)
    if malicious_class is None:
        malicious_class = header_class
    victim = mlp_victim_from_layers(layers, malicious_class, m=m)
    logger.info(
        f"Loaded MLP victim from {weights_file}: {len(layers)} layers, "
        f"input {victim.m}, malicious class {malicious_class}"
    )
    return victim
