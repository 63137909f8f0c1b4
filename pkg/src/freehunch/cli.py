"""``fh`` command-line entry point.

    fh <experiment> --config run.yaml --set sampler.steps=200 --out results --seed 3

Writes ``<out>/<experiment>-<seed>.csv`` and ``<out>/summary.json``. Exit codes:
0 success, 2 invalid configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import experiments as ex
from .guidance import DPS, FreeHunch, HeuristicSigma, Optimal, PiGDM, PiGDMNoScale
from .matrix_core import MatrixCoreError
from .samplers import OracleModel, SamplerConfig, Solver, sample
from .score_oracle import GaussianMixture, LinearObservation, masking_operator

SCHEMA_VERSION = 1
EXPERIMENTS = ("toy-posterior", "correlated-dims", "cov-error", "guidance-norm", "custom-sample")
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SamplerSection(_Section):
    steps: int = Field(100, ge=2)
    sigma_min: float = Field(0.002, gt=0)
    sigma_max: float = Field(20.0, gt=0)
    rho: float = Field(7.0, gt=0)
    solver: Literal["euler", "euler-maruyama", "heun"] = "euler"
    clip: bool = False
    fallback: bool = True
    threshold: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _ordered(self):
        if self.sigma_min >= self.sigma_max:
            raise ValueError(
                f"sigma_min ({self.sigma_min}) must be smaller than sigma_max ({self.sigma_max})"
            )
        return self


class TrackerSection(_Section):
    init_samples: int = Field(100_000, ge=2)
    space_update_range: Optional[tuple[float, float]] = None
    extra_evaluation: bool = True
    curvature_tolerance: float = Field(1e-8, ge=0)


class MixtureSection(_Section):
    weights: list[float]
    means: list[list[float]]
    covariances: list[list[list[float]]]


class ObservationSection(_Section):
    y: list[float]
    noise_std: float = Field(ge=0)
    operator: Optional[list[list[float]]] = None
    mask: Optional[list[bool]] = None

    @model_validator(mode="after")
    def _one_operator(self):
        if self.operator is not None and self.mask is not None:
            raise ValueError("give at most one of operator and mask")
        return self


class ToySection(_Section):
    n_samples: int = Field(10_000, ge=10)
    dps_xis: list[float] = [0.1, 0.3, 1.0, 3.0, 10.0]
    bins: int = Field(100, ge=2)
    margin: float = Field(0.5, ge=0)
    seeds: list[int] = []

    @field_validator("dps_xis")
    @classmethod
    def _positive(cls, v):
        if any(x <= 0 for x in v):
            raise ValueError("DPS scales must be positive")
        return v


class CorrelatedSection(_Section):
    dims: list[int] = list(range(2, 21, 2))
    rho: float = Field(0.999, ge=0, lt=1)
    noise_std: float = Field(0.2, gt=0)
    n_samples: int = Field(4000, ge=10)
    dps_xis: list[float] = [0.1, 0.3, 1.0, 3.0, 10.0]
    include_reference: bool = True


class CovErrorSection(_Section):
    n_trajectories: int = Field(200, ge=1)
    steps: list[int] = [50, 100, 200, 400]
    solvers: list[Literal["euler", "euler-maruyama"]] = ["euler", "euler-maruyama"]


class GuidanceNormSection(_Section):
    dims: list[int] = [1, 10, 100, 1000, 10_000, 100_000, 1_000_000]
    sigmas: list[float] = [1.0, 5.0, 20.0, 80.0]
    noise_stds: list[float] = [0.0, 0.1, 1.0]
    residual: float = 1.0


class CustomSection(_Section):
    n_samples: int = Field(1000, ge=1)
    rule: Literal["none", "dps", "pigdm", "pigdm-noscale", "heuristic-sigma", "freehunch", "optimal"] = "freehunch"
    xi: float = Field(1.0, gt=0)


class RunConfig(_Section):
    experiment: Literal[EXPERIMENTS]
    seed: int = Field(0, ge=0)
    output_dir: str = "results"
    timing: bool = False
    mixture_file: Optional[str] = None
    mixture: Optional[MixtureSection] = None
    observation: Optional[ObservationSection] = None
    sampler: SamplerSection = SamplerSection()
    tracker: TrackerSection = TrackerSection()
    toy: ToySection = ToySection()
    correlated: CorrelatedSection = CorrelatedSection()
    cov_error: CovErrorSection = CovErrorSection()
    guidance_norm: GuidanceNormSection = GuidanceNormSection()
    custom: CustomSection = CustomSection()

    @model_validator(mode="after")
    def _references(self):
        if self.mixture_file is not None:
            if self.mixture is not None:
                raise ValueError("give at most one of mixture and mixture_file")
            if not Path(self.mixture_file).is_file():
                raise ValueError(f"mixture_file {self.mixture_file!r} does not exist")
        return self


# ------------------------------------------------------------------ parsing


def _sections() -> dict:
    return {
        name: field.annotation
        for name, field in RunConfig.model_fields.items()
        if isinstance(field.annotation, type) and issubclass(field.annotation, _Section)
    }


def _resolve_key(key: str) -> list[str]:
    """Dotted path for an override key.

    Bare keys resolve to the sampler section first, then to the unique section that has them.
    """
    if "." in key or key in RunConfig.model_fields:
        return key.split(".")
    if key in SamplerSection.model_fields:
        return ["sampler", key]
    owners = [name for name, model in _sections().items() if key in model.model_fields]
    if len(owners) != 1:
        where = ", ".join(owners) if owners else "no section"
        raise ConfigError(f"override key {key!r} is ambiguous or unknown (found in {where})")
    return [owners[0], key]


def apply_overrides(data: dict, overrides) -> dict:
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        path = _resolve_key(key.strip())
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section value")
        node[path[-1]] = yaml.safe_load(raw)
    return data


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def parse_config(path=None, overrides=(), **fields) -> RunConfig:
    """Merge file, keyword fields and ``key=value`` overrides, in increasing precedence."""
    data = load_config_file(path) if path is not None else {}
    for key, value in fields.items():
        if value is None:
            continue
        if key in data and key == "experiment" and data[key] != value:
            raise ConfigError(f"experiment {value!r} conflicts with config file value {data[key]!r}")
        data[key] = value
    return RunConfig.model_validate(apply_overrides(data, overrides))


def dump_config(config: RunConfig) -> dict:
    return config.model_dump(mode="json")


# ---------------------------------------------------------------- building


def _mixture(config: RunConfig) -> Optional[GaussianMixture]:
    section = config.mixture
    if config.mixture_file is not None:
        section = MixtureSection.model_validate(load_config_file(config.mixture_file))
    if section is None:
        return None
    try:
        return GaussianMixture(np.array(section.weights), np.array(section.means), np.array(section.covariances))
    except ValueError as exc:
        raise ConfigError(f"invalid mixture: {exc}") from exc


def _observation(config: RunConfig) -> Optional[LinearObservation]:
    section = config.observation
    if section is None:
        return None
    operator = None
    if section.operator is not None:
        operator = np.array(section.operator, dtype=float)
    elif section.mask is not None:
        operator = masking_operator(section.mask)
    try:
        return LinearObservation(np.array(section.y), section.noise_std, operator)
    except ValueError as exc:
        raise ConfigError(f"invalid observation: {exc}") from exc


def _setup(config: RunConfig) -> ex.SamplingSetup:
    s, t = config.sampler, config.tracker
    return ex.SamplingSetup(
        steps=s.steps,
        sigma_min=s.sigma_min,
        sigma_max=s.sigma_max,
        rho=s.rho,
        solver=s.solver,
        clip=s.clip,
        fallback=s.fallback,
        threshold=s.threshold,
        init_samples=t.init_samples,
        space_update_range=t.space_update_range,
        extra_evaluation=t.extra_evaluation,
    )


def _rule(name: str, xi: float):
    return {
        "dps": DPS(xi),
        "pigdm": PiGDM(),
        "pigdm-noscale": PiGDMNoScale(),
        "heuristic-sigma": HeuristicSigma(),
        "freehunch": FreeHunch(),
        "optimal": Optimal(),
        "none": None,
    }[name]


def run_experiment(config: RunConfig) -> ex.ExperimentReport:
    mixture = _mixture(config) or ex.default_toy_mixture()
    obs = _observation(config)
    seed = config.seed
    if obs is not None and obs.observation.shape[0] != (obs.operator.shape[0] if obs.operator is not None else mixture.dim):
        raise ConfigError("observation length does not match the operator or mixture dimension")
    if config.experiment == "toy-posterior":
        toy = config.toy
        cfg = ex.ToyPosteriorConfig(
            mixture=mixture,
            observation=obs or ex.default_toy_observation(),
            setup=_setup(config),
            n_samples=toy.n_samples,
            dps_xis=tuple(toy.dps_xis),
            bins=toy.bins,
            margin=toy.margin,
            seeds=tuple(toy.seeds),
        )
        return ex.run_toy_posterior(cfg, seed, config.timing)
    if config.experiment == "correlated-dims":
        c = config.correlated
        cfg = ex.CorrelatedDimsConfig(
            dims=tuple(c.dims),
            rho=c.rho,
            noise_std=c.noise_std,
            n_samples=c.n_samples,
            dps_xis=tuple(c.dps_xis),
            setup=_setup(config),
            include_reference=c.include_reference,
        )
        return ex.run_correlated_dims(cfg, seed, config.timing)
    if config.experiment == "cov-error":
        c, s = config.cov_error, config.sampler
        cfg = ex.CovErrorConfig(
            mixture=mixture,
            observation=obs or ex.default_toy_observation(),
            n_trajectories=c.n_trajectories,
            steps=tuple(c.steps),
            solvers=tuple(c.solvers),
            sigma_min=s.sigma_min,
            sigma_max=s.sigma_max,
            rho=s.rho,
            space_update_range=config.tracker.space_update_range,
            curvature_tolerance=config.tracker.curvature_tolerance,
        )
        return ex.run_cov_error(cfg, seed, config.timing)
    if config.experiment == "guidance-norm":
        g = config.guidance_norm
        cfg = ex.GuidanceNormConfig(tuple(g.dims), tuple(g.sigmas), tuple(g.noise_stds), g.residual)
        return ex.run_guidance_norm(cfg, seed, config.timing)
    return _run_custom(config, mixture, obs or ex.default_toy_observation())


def _run_custom(config: RunConfig, mixture, obs) -> ex.ExperimentReport:
    c = config.custom
    rule = _rule(c.rule, c.xi)
    setup = _setup(config)
    if rule is None:
        sampler = SamplerConfig(setup.grid(), Solver(setup.solver), seed=config.seed)
    else:
        sampler = setup.sampler(rule, obs, mixture, config.seed)
    res = sample(sampler, OracleModel(mixture), c.n_samples)
    columns = ("sample", "aborted") + tuple(f"x{i}" for i in range(mixture.dim))
    report = ex.ExperimentReport("custom-sample", config.seed, {}, columns)
    for i, (x, bad) in enumerate(zip(res.samples, res.aborted)):
        report.rows.append({"sample": i, "aborted": int(bad), **{f"x{j}": v for j, v in enumerate(x)}})
    report.summary = {
        "aborted_trajectories": int(res.aborted.sum()),
        "mean": [float(v) for v in np.nanmean(res.samples, axis=0)],
    }
    return report


# ------------------------------------------------------------------ output


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if np.isfinite(v) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_outputs(report: ex.ExperimentReport, config: RunConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{report.experiment}-{report.seed}.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(report.columns), lineterminator="\r\n")
        writer.writeheader()
        for row in report.rows:
            writer.writerow({k: _cell(v) for k, v in row.items()})
    summary = {
        "schema_version": SCHEMA_VERSION,
        "experiment": report.experiment,
        "seed": report.seed,
        "config": dump_config(config),
        "summary": _jsonable(report.summary),
        "wall_ms": report.wall_ms,
        "csv": csv_path.name,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return csv_path


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _error(kind: str, message: str, code: int, out_dir: Optional[Path], details=None) -> int:
    record = {"error": kind, "message": message, "exit_code": code}
    if details is not None:
        record["details"] = details
    text = json.dumps(record, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "error.json").write_text(text + "\n", encoding="utf-8")
        except OSError:
            pass
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fh", description="Run a synthetic posterior-sampling experiment.")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--out", help="output directory (overrides output_dir)")
    parser.add_argument("--seed", type=int, help="random seed (overrides the config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out) if args.out else None
    try:
        config = parse_config(
            args.config, args.overrides, experiment=args.experiment, seed=args.seed, output_dir=args.out
        )
    except ValidationError as exc:
        problems = [
            {"loc": ".".join(str(p) for p in e["loc"]), "message": e["msg"]} for e in exc.errors()
        ]
        return _error("validation", f"{len(problems)} configuration problem(s)", EXIT_VALIDATION, out_dir, problems)
    except ConfigError as exc:
        return _error("validation", str(exc), EXIT_VALIDATION, out_dir)
    out_dir = Path(config.output_dir)
    try:
        report = run_experiment(config)
    except ConfigError as exc:
        return _error("validation", str(exc), EXIT_VALIDATION, out_dir)
    except (ArithmeticError, MatrixCoreError, np.linalg.LinAlgError) as exc:
        return _error("numerical", f"{type(exc).__name__}: {exc}", EXIT_NUMERICAL, out_dir)
    write_outputs(report, config, out_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
