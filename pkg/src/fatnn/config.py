"""Declarative run configuration (YAML) with line-precise validation errors."""

from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .model import ModelConfig
from .problems import ProblemSpec, make_problem
from .training import AdaptiveConfig, TrainOptions

OUTPUT_ROOT_ENV = "FATNN_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid configuration; ``str()`` carries ``path:line: message`` entries."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ProblemSection(_Strict):
    name: str
    params: dict[str, Any] = Field(default_factory=dict)
    boundary_weight: float | None = Field(default=None, ge=0)
    n_interior: int | None = Field(default=None, ge=1)
    n_boundary_per_face: int | None = Field(default=None, ge=1)
    n_initial: int | None = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _buildable(self):
        try:
            self.build()
        except (TypeError, ValueError) as exc:
            raise ValueError(f"cannot build problem {self.name!r}: {exc}") from None
        return self

    def build(self) -> ProblemSpec:
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in self.params.items()}
        problem = make_problem(self.name, **params)
        over = {k: getattr(self, k) for k in ("boundary_weight", "n_interior", "n_boundary_per_face", "n_initial")
                if getattr(self, k) is not None}
        return problem.with_(**over) if over else problem


class ModelSection(_Strict):
    combiner: Literal["cp", "tt"] = "cp"
    rank: int = Field(default=16, ge=1)
    tt_ranks: list[int] | None = None
    hidden: list[int] = Field(default_factory=lambda: [32, 32])
    activation: Literal["tanh", "trigblend", "sin", "cos"] = "trigblend"


class FeatureSection(_Strict):
    mode: Literal["random", "none"] = "random"
    m: int = Field(default=50, ge=1)
    sigma: float | list[float] = 10.0


class OptimizerSection(_Strict):
    lr0: float = Field(default=1e-3, gt=0)
    decay: float = Field(default=0.95, gt=0, le=1)
    decay_every: int = Field(default=1000, ge=1)
    resample: bool = True
    log_every: int = Field(default=100, ge=1)


class AdaptiveSection(_Strict):
    steps: int = Field(default=4, ge=0)
    top_m: int | None = Field(default=None, ge=1)
    cap: int = Field(default=200, ge=1)
    n_dft: int = Field(default=4096, ge=2)
    epochs: int = Field(default=1000, ge=0)
    n_eval: int = Field(default=65536, ge=1)
    eval_seed: int = 20240601
    jaccard_stop: float | None = Field(default=None, gt=0, le=1)

    @model_validator(mode="after")
    def _pow2(self):
        if self.n_dft & (self.n_dft - 1):
            raise ValueError(f"n_dft must be a power of two, got {self.n_dft}")
        return self


class ToyFitSection(_Strict):
    kind: Literal["toy"]
    ks: list[int] = Field(default_factory=lambda: [2, 4, 6])
    rank: int = Field(default=100, ge=1)
    epochs: int = Field(default=20000, ge=0)
    lr0: float = Field(default=1e-3, gt=0)
    decay: float = Field(default=0.98, gt=0, le=1)
    decay_every: int = Field(default=1000, ge=1)
    grid: int = Field(default=64, ge=8)
    eval_every: int = Field(default=100, ge=1)
    threshold: float = Field(default=0.3, gt=0)


class FFComparisonSection(_Strict):
    kind: Literal["ff_comparison"]
    ks: list[float] = Field(default_factory=lambda: [20.0])
    d: int = Field(default=6, ge=1)
    variants: list[Literal["cp", "tt", "cp-ff", "tt-ff"]] = Field(
        default_factory=lambda: ["cp", "tt", "cp-ff", "tt-ff"])
    rank: int = Field(default=32, ge=1)
    tt_rank: int = Field(default=8, ge=1)
    hidden: list[int] = Field(default_factory=lambda: [32, 32])
    hidden_ff: list[int] | None = None  # feature variants; defaults to ``hidden``
    activation: Literal["tanh", "trigblend", "sin", "cos"] = "tanh"
    m: int = Field(default=32, ge=1)
    sigma: float = Field(default=1.0, gt=0)
    epochs: int = Field(default=10000, ge=0)
    n_interior: int = Field(default=2000, ge=1)
    n_boundary_per_face: int = Field(default=50, ge=1)
    boundary_weight: float = Field(default=100.0, ge=0)
    n_eval: int = Field(default=65536, ge=1)


class ProbeSection(_Strict):
    kind: Literal["small_weight_probe"]
    deltas: list[float] = Field(default_factory=lambda: [0.2, 0.1, 0.05, 0.01])
    n: int = Field(default=100_000, ge=1)


class RunConfig(_Strict):
    experiment: str = Field(min_length=1)
    anchor: str = Field(min_length=1, description="which reported experiment this reproduces")
    reported_rel_l2: list[float] | None = None
    long_running: bool = False
    command: Literal["solve", "fit"]
    seed: int = 0
    output_dir: str | None = None
    problem: ProblemSection | None = None
    model: ModelSection | None = None
    features: FeatureSection | None = None
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    adaptive: AdaptiveSection | None = None
    fit: ToyFitSection | FFComparisonSection | ProbeSection | None = Field(default=None, discriminator="kind")

    @model_validator(mode="after")
    def _sections(self):
        if self.command == "solve":
            missing = [s for s in ("problem", "model", "adaptive") if getattr(self, s) is None]
            if missing:
                raise ValueError(f"solve configs need sections: {', '.join(missing)}")
            if self.fit is not None:
                raise ValueError("solve configs take no 'fit' section")
        elif self.fit is None:
            raise ValueError("fit configs need a 'fit' section")
        return self

    # -- builders ---------------------------------------------------------

    def build_problem(self) -> ProblemSpec:
        return self.problem.build()

    def build_model_config(self, problem: ProblemSpec) -> ModelConfig:
        m, f = self.model, self.features or FeatureSection()
        sigma = tuple(f.sigma) if isinstance(f.sigma, list) else f.sigma
        return ModelConfig(
            combiner=m.combiner,
            d=problem.n_inputs,
            rank=m.rank,
            tt_ranks=tuple(m.tt_ranks) if m.tt_ranks else None,
            hidden=tuple(m.hidden),
            activation=m.activation,
            feature_mode=f.mode,
            m=f.m,
            sigma=sigma,
        )

    def build_adaptive(self, problem: ProblemSpec) -> AdaptiveConfig:
        a, o = self.adaptive, self.optimizer
        train = TrainOptions(epochs=a.epochs, lr0=o.lr0, decay=o.decay, decay_every=o.decay_every,
                             resample=o.resample, log_every=o.log_every)
        return AdaptiveConfig(steps=a.steps, top_m=a.top_m or problem.top_m, cap=a.cap, n_dft=a.n_dft,
                              train=train, n_eval=a.n_eval, eval_seed=a.eval_seed, jaccard_stop=a.jaccard_stop)

    def output_path(self) -> Path:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        return root / (self.output_dir or self.experiment)


# -- loading ----------------------------------------------------------------------


def _node_at(node, loc):
    """Walk a composed YAML node along a pydantic error location; return the deepest match."""
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == key:
                    nxt = v
                    break
            if nxt is None:
                return node
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            return node
    return node


def _key_node(node, loc):
    """The key node for the last mapping key in ``loc`` (points at unknown keys)."""
    parent = _node_at(node, loc[:-1])
    if isinstance(parent, yaml.MappingNode):
        for k, _ in parent.value:
            if k.value == loc[-1]:
                return k
    return parent


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 0
        raise ConfigError(f"{source}:{line}: YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: expected a mapping at the top level")
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and p in ("toy", "ff_comparison",
                                                                                  "small_weight_probe")))
            node = _key_node(root, loc) if err["type"] == "extra_forbidden" and loc else _node_at(root, loc)
            line = node.start_mark.line + 1 if node is not None else 1
            where = ".".join(str(p) for p in loc) or "<root>"
            lines.append(f"{source}:{line}: {where}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from None
    if cfg.command == "solve":
        # cross-field checks (TT rank count vs. input count) need the built problem
        try:
            cfg.build_model_config(cfg.build_problem())
        except ValueError as exc:
            line = _node_at(root, ("model",)).start_mark.line + 1
            raise ConfigError(f"{source}:{line}: model: {exc}") from None
    return cfg


def load_config(path) -> tuple[RunConfig, str]:
    """Parse and validate a config file; also returns the sha256 of its bytes."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"{path}:0: cannot read config: {exc.strerror}") from None
    cfg = parse_config(raw.decode("utf-8"), str(path))
    return cfg, hashlib.sha256(raw).hexdigest()


def shipped_configs() -> dict[str, Path]:
    """Named configs bundled with the package."""
    base = Path(__file__).parent / "configs"
    return {p.stem: p for p in sorted(base.glob("*.yaml"))}


def resolve_config(name_or_path: str) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    shipped = shipped_configs()
    if name_or_path in shipped:
        return shipped[name_or_path]
    raise ConfigError(f"{name_or_path}:0: no such file or shipped config")
