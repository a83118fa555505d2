import os
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from config.settings import settings
from src import extractor
from src.attack import AttackConfig, AttackTrace, run_attack
from src.core import Image, derive_rng, make_rng
from src.errors import ConfigError, InfeasibleError
from src.loader import ResultWriter, config_hash
from src.scenes import make_scene, reference_probes, reference_victims
from src.subspace import (
    SubspaceBasis, basis_with_rho, build_gradient_store, dct_basis, full_basis,
    load_basis, pca_basis, spatial_basis,
)
from src.theory import BoundReport, boundary_point, measure_cosine, relative_delta
from src.victim import AnalyticVictim, HardLabelOracle, make_mlp_victim

logger = logging.getLogger(__name__)


def _split(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class VictimSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["linear", "quadratic", "mlp"] = "quadratic"
    channels: int = 3
    height: int = 32
    width: int = 32
    radius: float = 50.0
    gap: float = 0.1
    depth: float = 0.1
    lateral: float = 1.0
    weights: Optional[str] = None
    malicious_class: Optional[int] = None
    source: Optional[str] = None
    target: Optional[str] = None

    @model_validator(mode="after")
    def check_files_for_mlp(self):
        if self.kind == "mlp" and not (self.weights and self.source and self.target):
            raise ValueError("mlp victims need weights, source and target files")
        if min(self.channels, self.height, self.width) < 1:
            raise ValueError("image dimensions must be positive")
        return self

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.height, self.width)


class SubspaceSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["full", "spatial", "dct", "pca"] = "full"
    ratio: int = 4
    orthonormalize: bool = False
    basis_file: Optional[str] = None
    # pca dimension; defaults to m / ratio^2
    components: Optional[int] = None
    probes: int = 256
    references: int = 5

    @field_validator("ratio", "probes", "references")
    @classmethod
    def check_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    repetitions: int = 1
    seed: int = 0
    seeds: Optional[List[int]] = None
    max_queries: int = 20000
    batch_size: int = settings.attack.batch_size
    thresholds: List[float] = [1e-3, 1e-4]
    budgets: List[int] = [1000, 5000, 10000, 20000]
    discretized: bool = False
    orthogonalize: bool = False
    control_variate: bool = False
    theta: Optional[float] = None
    out_dir: Optional[str] = None
    workers: int = settings.experiment.workers
    grid_step: int = settings.experiment.grid_step
    victim: VictimSpec = VictimSpec()
    subspace: SubspaceSpec = SubspaceSpec()

    @field_validator("thresholds", "budgets", "seeds", mode="before")
    @classmethod
    def split_lists(cls, v):
        return _split(v)

    @field_validator("repetitions", "workers", "grid_step", "batch_size")
    @classmethod
    def check_at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @field_validator("max_queries")
    @classmethod
    def check_budget(cls, v: int) -> int:
        if v < 2:
            raise ValueError("must cover the two endpoint checks")
        return v

    @field_validator("thresholds")
    @classmethod
    def check_decreasing(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("need at least one threshold")
        if any(t <= 0 for t in v) or any(a <= b for a, b in zip(v, v[1:])):
            raise ValueError("thresholds must be positive and strictly decreasing")
        return v

    @field_validator("budgets")
    @classmethod
    def check_increasing(cls, v: List[int]) -> List[int]:
        if not v or any(b < 1 for b in v) or any(a >= b for a, b in zip(v, v[1:])):
            raise ValueError("budgets must be positive and strictly increasing")
        return v

    @field_validator("seeds")
    @classmethod
    def check_non_empty(cls, v: Optional[List[int]]) -> Optional[List[int]]:
        if v is not None and not v:
            raise ValueError("seed list is empty")
        return v

    def seed_list(self) -> List[int]:
        if self.seeds is not None:
            return list(self.seeds)
        return [self.seed + i for i in range(self.repetitions)]


class TheoryConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "theory"
    victim: Literal["linear", "quadratic"] = "quadratic"
    channels: int = 3
    height: int = 32
    width: int = 32
    dims: List[int] = [3072, 192]
    batches: List[int] = [16, 64]
    deltas: List[float] = [1e-2]
    rhos: List[float] = [1.0, 0.5]
    trials: int = 100
    seed: int = 0
    orthogonalize: bool = True
    out_dir: Optional[str] = None
    workers: int = settings.experiment.workers

    @field_validator("dims", "batches", "deltas", "rhos", mode="before")
    @classmethod
    def split_lists(cls, v):
        return _split(v)

    @field_validator("dims", "batches")
    @classmethod
    def check_counts(cls, v: List[int]) -> List[int]:
        if not v or any(x < 1 for x in v):
            raise ValueError("need a non-empty list of positive integers")
        return v

    @field_validator("deltas")
    @classmethod
    def check_deltas(cls, v: List[float]) -> List[float]:
        if not v or any(d <= 0 for d in v):
            raise ValueError("need a non-empty list of positive values")
        return v

    @field_validator("rhos")
    @classmethod
    def check_rhos(cls, v: List[float]) -> List[float]:
        if not v or any(not 0.0 <= r <= 1.0 for r in v):
            raise ValueError("need a non-empty list of values in [0, 1]")
        return v

    @field_validator("trials")
    @classmethod
    def check_trials(cls, v: int) -> int:
        if v < 2:
            raise ValueError("need at least two trials")
        return v

    @model_validator(mode="after")
    def check_dims_fit(self):
        m = self.channels * self.height * self.width
        if any(n < 2 or n > m for n in self.dims):
            raise ValueError(f"subspace dimensions must lie in [2, {m}]")
        return self


def _validate(model, data: dict, section: str):
    try:
        return model.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        loc = ".".join(str(p) for p in err["loc"]) or section
        raise ConfigError(loc, err["msg"])


def _clean(section: Mapping[str, str]) -> Dict[str, str]:
    return {k: v for k, v in section.items() if v != ""}


def load_experiment_config(file_path: str,
                           overrides: Optional[Mapping[str, object]] = None
                           ) -> Tuple[ExperimentConfig, str]:
    """Parses [experiment], [victim] and [subspace]. Returns the model and its config hash."""
    sections = extractor.read_config(file_path)
    unknown = set(sections) - {"experiment", "victim", "subspace"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    if "experiment" not in sections:
        raise ConfigError("experiment", f"section missing in {file_path}")
    data = _clean(sections["experiment"])
    overrides = {k: str(v) for k, v in (overrides or {}).items() if v is not None}
    if "seed" in overrides:
        data.pop("seeds", None)
    data.update(overrides)
    data["victim"] = _clean(sections.get("victim", {}))
    data["subspace"] = _clean(sections.get("subspace", {}))
    config = _validate(ExperimentConfig, data, "experiment")
    return config, config_hash(data)


def load_theory_config(file_path: str,
                       overrides: Optional[Mapping[str, object]] = None
                       ) -> Tuple[TheoryConfig, str]:
    sections = extractor.read_config(file_path)
    if "theory" not in sections:
        raise ConfigError("theory", f"section missing in {file_path}")
    data = _clean(sections["theory"])
    data.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    config = _validate(TheoryConfig, data, "theory")
    return config, config_hash(data)


@dataclass
class Pair:
    victim: AnalyticVictim
    source: Image
    target: Image
    # reference victims and probes for the intrinsic-component basis
    references: List[AnalyticVictim] = field(default_factory=list)
    probes: List[np.ndarray] = field(default_factory=list)


def build_pair(spec: VictimSpec, seed: int, subspace: Optional[SubspaceSpec] = None) -> Pair:
    if spec.kind == "mlp":
        source = extractor.read_image(spec.source)
        target = extractor.read_image(spec.target)
        if source.shape != target.shape:
            raise ConfigError("victim.target", f"shape {target.shape} differs from source {source.shape}")
        victim = make_mlp_victim(spec.weights, spec.malicious_class, m=source.m)
        return Pair(victim, source, target)
    scene = make_scene(spec.kind, spec.shape, seed, radius=spec.radius, gap=spec.gap,
                       depth=spec.depth, lateral=spec.lateral)
    pair = Pair(scene.victim, scene.source, scene.target)
    if subspace is not None and subspace.kind == "pca" and not subspace.basis_file:
        pair.references = reference_victims(scene, subspace.references, radius=spec.radius)
        pair.probes = reference_probes(scene, subspace.probes)
    return pair


def build_basis(spec: SubspaceSpec, shape: Tuple[int, int, int], pair: Pair,
                seed: int, work_dir: str) -> SubspaceBasis:
    c, h, w = shape
    if spec.basis_file:
        basis = load_basis(spec.basis_file)
        if basis.m != c * h * w:
            raise ConfigError("subspace.basis_file", f"basis maps into {basis.m} values, images have {c * h * w}")
        return basis
    if spec.kind == "full":
        return full_basis(c * h * w)
    if spec.kind == "spatial":
        return spatial_basis(c, h, w, spec.ratio, orthonormalize=spec.orthonormalize)
    if spec.kind == "dct":
        return dct_basis(c, h, w, spec.ratio)
    if not pair.references:
        raise ConfigError("subspace.basis_file", "pca needs a basis file for file-based victims")
    n = spec.components or max(1, (c * h * w) // spec.ratio ** 2)
    store = build_gradient_store(pair.references, pair.probes,
                                 os.path.join(work_dir, f"gradients_{seed}"))
    try:
        return pca_basis(store, n, rng=make_rng(seed))
    except InfeasibleError as e:
        raise ConfigError("subspace.components", str(e))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    traces: Dict[int, AttackTrace]
    curve: pd.DataFrame
    success: pd.DataFrame
    paths: List[str] = field(default_factory=list)

    def final_mse(self) -> Dict[int, float]:
        return {seed: trace.final_mse for seed, trace in self.traces.items()}


def _run_one(config: ExperimentConfig, seed: int, shared: Optional[SubspaceBasis],
             work_dir: str) -> AttackTrace:
    pair = build_pair(config.victim, seed, config.subspace)
    basis = shared or build_basis(config.subspace, pair.source.shape, pair, seed, work_dir)
    oracle = HardLabelOracle.from_victim(pair.victim, budget=config.max_queries,
                                         discretized=config.discretized)
    attack_config = AttackConfig(
        source=pair.source, target=pair.target, batch_size=config.batch_size,
        max_queries=config.max_queries, theta=config.theta, seed=seed,
        discretized=config.discretized, orthogonalize=config.orthogonalize,
        control_variate=config.control_variate,
    )
    return run_attack(attack_config, oracle, basis)


def mse_curve(traces: Mapping[int, AttackTrace], max_queries: int, grid_step: int) -> pd.DataFrame:
    """
    MSE on the query grid 0, step, 2*step, ... by last observation carried
    forward. Before the first record a run still holds its source image.
    """
    grid = np.arange(0, max_queries + 1, grid_step)
    columns = {}
    for seed, trace in traces.items():
        frame = trace.to_frame()
        queries = frame["cumulative_queries"].to_numpy()
        values = frame["mse"].to_numpy()
        idx = np.searchsorted(queries, grid, side="right") - 1
        columns[seed] = np.where(idx >= 0, values[np.maximum(idx, 0)], trace.initial_mse)
    per_run = pd.DataFrame(columns, index=grid)
    return pd.DataFrame({
        "queries": grid,
        "mean_mse": per_run.mean(axis=1).to_numpy(),
        "std_mse": per_run.std(axis=1, ddof=0).to_numpy(),
        "runs": len(columns),
    })


def success_rates(traces: Mapping[int, AttackTrace], thresholds: Sequence[float],
                  budgets: Sequence[int]) -> pd.DataFrame:
    """Fraction of runs whose best recorded MSE within each budget is at or below each threshold."""
    rows = []
    frames = [trace.to_frame() for trace in traces.values()]
    for threshold in thresholds:
        row = {"threshold": threshold}
        for budget in budgets:
            hits = [
                bool((frame.loc[frame["cumulative_queries"] <= budget, "mse"] <= threshold).any())
                for frame in frames
            ]
            row[f"q{budget}"] = float(np.mean(hits)) if hits else float("nan")
        rows.append(row)
    return pd.DataFrame(rows)


def run_experiment(config: ExperimentConfig, digest: str = "",
                   out_dir: Optional[str] = None) -> ExperimentResult:
    out_dir = out_dir or config.out_dir or os.path.join(settings.app.output_dir, config.name)
    writer = ResultWriter(out_dir, digest, config.seed)
    seeds = config.seed_list()
    logger.info(
        f"Experiment '{config.name}': {len(seeds)} runs, victim={config.victim.kind}, "
        f"subspace={config.subspace.kind}, budget={config.max_queries}"
    )

    shared = None
    if config.victim.kind == "mlp" or config.subspace.kind != "pca" or config.subspace.basis_file:
        pair = build_pair(config.victim, seeds[0])
        shared = build_basis(config.subspace, pair.source.shape, pair, seeds[0], out_dir)

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        futures = {seed: pool.submit(_run_one, config, seed, shared, out_dir) for seed in seeds}
        traces = {seed: futures[seed].result() for seed in seeds}

    result = ExperimentResult(config, traces, pd.DataFrame(), pd.DataFrame())
    for seed, trace in traces.items():
        result.paths.append(writer.write_csv(
            f"trace_{seed}.csv", trace.to_frame(),
            extra={"seed": seed, "subspace": config.subspace.kind,
                   "initial_mse": f"{trace.initial_mse:.10g}"},
        ))
        result.paths.append(writer.write_image(f"adv_{seed}.qimg", trace.final))
        for t, snap in sorted(trace.snapshots.items()):
            writer.write_image(f"snap_{seed}_{t}.qimg", snap)

    denominators = {"runs": len(seeds), "denominator": f"{len(seeds)} seeds x 1 pair"}
    result.curve = mse_curve(traces, config.max_queries, config.grid_step)
    result.paths.append(writer.write_csv("mse_curve.csv", result.curve, extra=denominators))
    result.success = success_rates(traces, config.thresholds, config.budgets)
    result.paths.append(writer.write_csv("success_rates.csv", result.success, extra=denominators))
    logger.info(f"Experiment '{config.name}' done: outputs in {out_dir}")
    return result


@dataclass
class Comparison:
    final_mse: pd.DataFrame
    wins: pd.DataFrame


def compare_methods(configs: Sequence[Tuple[ExperimentConfig, str]],
                    out_dir: Optional[str] = None) -> Comparison:
    """
    Runs every config on the same seeds and compares final MSE seed by
    seed. A win counts 1, a tie 0.5.
    """
    if len(configs) < 2:
        raise ConfigError("configs", "need at least two methods to compare")
    base = configs[0][0]
    seeds = base.seed_list()
    for config, _ in configs[1:]:
        if config.seed_list() != seeds:
            raise ConfigError("seeds", f"'{config.name}' uses a different seed list")
        if config.victim != base.victim:
            raise ConfigError("victim", f"'{config.name}' attacks a different victim")
        if config.max_queries != base.max_queries:
            raise ConfigError("max_queries", f"'{config.name}' uses a different budget")
    out_dir = out_dir or os.path.join(settings.app.output_dir, "compare")

    names, finals = [], {}
    for config, digest in configs:
        name = config.name
        while name in finals:
            name += "'"
        names.append(name)
        result = run_experiment(config, digest, os.path.join(out_dir, f"method_{len(names)}"))
        finals[name] = [result.traces[seed].final_mse for seed in seeds]

    final_mse = pd.DataFrame({"seed": seeds, **finals})
    rows = []
    for a in names:
        for b in names:
            if a == b:
                continue
            diff = np.sign(np.asarray(finals[b]) - np.asarray(finals[a]))
            rows.append({"method_a": a, "method_b": b,
                         "win_fraction": float(np.mean((diff + 1.0) / 2.0)), "seeds": len(seeds)})
    wins = pd.DataFrame(rows, columns=["method_a", "method_b", "win_fraction", "seeds"])

    writer = ResultWriter(out_dir, "+".join(d for _, d in configs), base.seed)
    writer.write_csv("final_mse.csv", final_mse)
    writer.write_csv("win_fraction.csv", wins, extra={"tie": "0.5"})
    return Comparison(final_mse, wins)


def _theory_grid(config: TheoryConfig):
    for n in config.dims:
        for B in config.batches:
            for d in config.deltas:
                for r in config.rhos:
                    yield n, B, d, r


def validate_theory(config: TheoryConfig, digest: str = "",
                    out_dir: Optional[str] = None) -> pd.DataFrame:
    """Measures the estimator's cosine over the (n, B, delta, rho) grid and writes bounds.csv."""
    out_dir = out_dir or config.out_dir or os.path.join(settings.app.output_dir, config.name)
    shape = (config.channels, config.height, config.width)
    m = int(np.prod(shape))
    scene = make_scene(config.victim, shape, config.seed)
    x = boundary_point(scene.victim, scene.source)
    g = scene.victim.gradient(x)
    grad_norm = float(np.linalg.norm(g))

    reports: List[BoundReport] = []
    for i, (n, B, d, r) in enumerate(_theory_grid(config)):
        if B > n:
            logger.warning(f"Skipping n={n}, B={B}: batch larger than the subspace")
            continue
        rng = derive_rng(config.seed, i)
        if n == m and r == 1.0:
            basis = full_basis(m)
        elif n == m:
            logger.warning(f"Skipping n={n}, rho={r}: a full-space basis always has rho = 1")
            continue
        else:
            basis = basis_with_rho(g, n, r, rng)
        delta = relative_delta(d, scene.victim, grad_norm)
        reports.append(measure_cosine(scene.victim, x, basis, B, delta, config.trials, rng,
                                      orthogonalize=config.orthogonalize, workers=config.workers))

    frame = pd.DataFrame([vars(r) for r in reports], columns=BoundReport.columns())
    writer = ResultWriter(out_dir, digest, config.seed)
    writer.write_csv("bounds.csv", frame, extra={"victim": config.victim, "trials": config.trials})
    return frame
