"""
Synthetic attack scenes on analytic victims.

Natural images and classifier gradients are dominated by low spatial
frequencies. The scenes here reproduce that at desk scale: targets and
boundary normals are bilinear upsamplings of coarse random grids, so the
victim's gradient sits almost entirely inside the spatial and frequency
subspaces.
"""
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from src.core import Image, RngStream, derive_rng, make_rng
from src.errors import ContractError, DomainError
from src.subspace import SpatialBasis
from src.victim import AnalyticVictim, make_linear_victim, make_quadratic_victim

logger = logging.getLogger(__name__)

SCENE_KINDS = ("linear", "quadratic")


@dataclass
class Scene:
    kind: str
    victim: AnalyticVictim
    source: Image
    target: Image
    # unit vector pointing from the target toward the adversarial region
    normal: np.ndarray
    lateral: np.ndarray
    seed: int
    gap: float


def smooth_field(shape: Tuple[int, int, int], low: int, rng: RngStream) -> np.ndarray:
    """Flat field obtained by bilinear upsampling of a (C, low, low) Gaussian grid."""
    c, h, w = shape
    if low < 2 or h % low or w % low:
        raise DomainError(f"coarse grid {low} must be >= 2 and divide {h}x{w}")
    upsample = SpatialBasis(c, h, w, h // low)
    return upsample.forward(rng.standard_normal(upsample.n))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _victim(kind: str, target: np.ndarray, normal: np.ndarray,
            radius: float, gap: float) -> AnalyticVictim:
    if kind == "linear":
        # S(x) = -<n, x - t> - gap, the plane sits `gap` from the target
        return make_linear_victim(-normal, float(np.dot(normal, target)) - gap)
    return make_quadratic_victim(target - (radius + gap) * normal, radius, inside_adversarial=True)


def make_scene(kind: str = "quadratic", shape: Tuple[int, int, int] = (3, 32, 32),
               seed: int = 0, radius: float = 50.0, gap: float = 0.1, depth: float = 0.1,
               lateral: float = 1.0, low: int = 4) -> Scene:
    """
    Builds a victim with phi(target) = -1 and a source with phi(source) = +1.
    The source lies `gap + depth` behind the boundary along the normal and
    `lateral` to the side, so the first projection lands far from the
    closest adversarial point (distance `gap`).
    """
    if kind not in SCENE_KINDS:
        raise DomainError(f"scene kind must be one of {SCENE_KINDS}, got '{kind}'")
    if gap <= 0 or depth <= 0 or lateral < 0:
        raise DomainError("gap and depth must be positive, lateral non-negative")
    if kind == "quadratic" and (radius - depth) ** 2 + lateral ** 2 >= radius ** 2:
        raise DomainError(f"lateral offset {lateral} leaves the ball of radius {radius}")
    rng = make_rng(seed)
    pattern = smooth_field(shape, low, rng)
    target = 0.5 + 0.2 * pattern / np.max(np.abs(pattern))
    normal = _unit(smooth_field(shape, low, rng))
    side = smooth_field(shape, low, rng)
    side = _unit(side - normal * np.dot(normal, side))
    source = target - (gap + depth) * normal + lateral * side
    if source.min() < 0.0 or source.max() > 1.0:
        raise ContractError("scene source leaves the pixel box; lower `lateral` or `depth`")

    victim = _victim(kind, target, normal, radius, gap)
    if victim.phi(source) != 1 or victim.phi(target) != -1:
        raise ContractError("scene end points do not straddle the boundary")
    logger.debug(f"Scene {kind} seed={seed}: initial mse {np.mean((source - target) ** 2):.4g}")
    return Scene(kind, victim, Image(source, shape), Image(target, shape),
                 normal, side, seed, gap)


def reference_victims(scene: Scene, count: int = 5, jitter: float = 0.3,
                      radius: float = 50.0, low: int = 4) -> List[AnalyticVictim]:
    """
    Substitute victims of the same family whose normals are smooth
    perturbations of the scene's normal. Their gradients feed the
    intrinsic-component basis.
    """
    if count < 1:
        raise DomainError(f"need at least one reference victim, got {count}")
    shape = scene.target.shape
    victims = []
    for k in range(count):
        rng = derive_rng(scene.seed, 1000 + k)
        normal = _unit(scene.normal + jitter * _unit(smooth_field(shape, low, rng)))
        victims.append(_victim(scene.kind, scene.target.data, normal, radius, scene.gap))
    return victims


def reference_probes(scene: Scene, count: int, spread: float = 0.05,
                     low: int = 4) -> List[np.ndarray]:
    """Images scattered around the target at which reference gradients are taken."""
    shape = scene.target.shape
    probes = []
    for k in range(count):
        rng = derive_rng(scene.seed, 5000 + k)
        field = smooth_field(shape, low, rng) + 0.25 * rng.standard_normal(scene.target.m)
        probes.append(np.clip(scene.target.data + spread * _unit(field), 0.0, 1.0))
    return probes
