"""Run configuration: ``key = value`` sections with typed defaults.

Every key has a default, so an empty file is a valid configuration. Unknown
sections and keys are errors, as are values that fail type or range checks.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .validation import check_seed


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


@dataclass(frozen=True)
class RunSection:
    experiment_id: str = "run"
    seed: int = 0


@dataclass(frozen=True)
class ProblemSection:
    kind: str = "poisson"
    n: int = 256
    length: float = 1.0
    n_train: int = 128
    n_test: int = 50
    k_max: int = 30
    sigma_min: float = 0.0
    sigma_max: float = 0.0
    fdm_method: str = "direct"


@dataclass(frozen=True)
class AeSection:
    subdomain: int = 32
    latent: int = 11
    base_channels: int = 8
    dense_width: int = 64
    solution_skip: str = "plane"
    condition_skip: str = "mean"
    epochs: int = 60
    batch_size: int = 32
    lr: float = 2e-3


@dataclass(frozen=True)
class FluxSection:
    hidden: int = 128
    bottleneck: int = 64
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-3
    scaling: str = "feature"
    condition_weight: float = 1.0
    augment: str = "dihedral"


@dataclass(frozen=True)
class SolveSection:
    method: str = "pj"
    tol: float = 1e-8
    max_iters: int = 5000
    damping: float = 1.0
    init: str = "zero"
    init_value: float = 0.0
    init_distribution: str = "uniform"
    init_amplitude: float = 1.0
    coarse_n: int = 64
    noise: float = 0.0
    cases: int = 0
    snapshots: int = 0


@dataclass(frozen=True)
class EvalSection:
    suite: str = "test"
    ood_k: tuple = (30, 40, 50, 60)
    ood_n: int = 10
    fcnn_epochs: int = 20
    fcnn_channels: int = 8
    robustness_n: int = 25
    noise_levels: tuple = (0.0, 0.1, 0.25, 0.5)


@dataclass(frozen=True)
class AblateSection:
    kind: str = "bottleneck"
    values: tuple = (4, 16, 35, 64, 100)


CHOICES = {
    ("problem", "kind"): ("poisson", "nonlinear"),
    ("problem", "fdm_method"): ("direct", "sor"),
    ("ae", "solution_skip"): ("none", "mean", "plane"),
    ("ae", "condition_skip"): ("none", "mean", "plane"),
    ("flux", "scaling"): ("feature", "block"),
    ("flux", "augment"): ("none", "dihedral"),
    ("solve", "method"): ("pj", "gs"),
    ("solve", "init"): ("zero", "uniform", "random", "coarse"),
    ("solve", "init_distribution"): ("uniform", "normal", "laplace", "logistic", "gumbel", "gamma"),
    ("eval", "suite"): ("test", "ood", "pjgs", "coarse", "robustness", "extended"),
    ("ablate", "kind"): ("bottleneck", "subdomain"),
}

POSITIVE = {
    ("problem", "n"), ("problem", "length"), ("problem", "n_train"), ("problem", "n_test"),
    ("problem", "k_max"), ("ae", "subdomain"), ("ae", "latent"), ("ae", "base_channels"),
    ("ae", "epochs"), ("ae", "batch_size"), ("ae", "lr"), ("flux", "hidden"),
    ("flux", "bottleneck"), ("flux", "epochs"), ("flux", "batch_size"), ("flux", "lr"),
    ("flux", "condition_weight"),
    ("solve", "tol"), ("solve", "max_iters"), ("solve", "damping"), ("solve", "coarse_n"),
    ("eval", "ood_n"), ("eval", "fcnn_epochs"), ("eval", "fcnn_channels"), ("eval", "robustness_n"),
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    problem: ProblemSection = field(default_factory=ProblemSection)
    ae: AeSection = field(default_factory=AeSection)
    flux: FluxSection = field(default_factory=FluxSection)
    solve: SolveSection = field(default_factory=SolveSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def replace(self, section: str, **kw) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **kw)})

    def to_ini(self) -> str:
        lines = []
        for sf in fields(self):
            lines.append(f"[{sf.name}]")
            sec = getattr(self, sf.name)
            for f in fields(sec):
                v = getattr(sec, f.name)
                if isinstance(v, tuple):
                    v = ", ".join(repr(x) for x in v)
                elif isinstance(v, float):
                    v = repr(v)
                lines.append(f"{f.name} = {v}")
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(section: str, key: str, default, text: str):
    label = f"{section}.{key}"
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return _ints(text) if all(isinstance(x, int) for x in default) else _floats(text)
        return text
    except ValueError:
        raise ConfigError(f"{label}: cannot parse {text!r} as {type(default).__name__}", label) from None


def _validate(cfg: RunConfig):
    for (sec, key), allowed in CHOICES.items():
        v = getattr(getattr(cfg, sec), key)
        if v not in allowed:
            raise ConfigError(f"{sec}.{key}: {v!r} is not one of {', '.join(allowed)}", f"{sec}.{key}")
    for sec, key in POSITIVE:
        v = getattr(getattr(cfg, sec), key)
        if not v > 0:
            raise ConfigError(f"{sec}.{key}: must be positive, got {v!r}", f"{sec}.{key}")
    try:
        check_seed(cfg.run.seed)
    except ValueError as e:
        raise ConfigError(f"run.seed: {e}", "run.seed") from None
    if not 0 < cfg.solve.damping <= 1:
        raise ConfigError("solve.damping: must lie in (0, 1]", "solve.damping")
    p = cfg.problem
    if (p.sigma_min == 0) != (p.sigma_max == 0) or p.sigma_min < 0 or p.sigma_max < p.sigma_min:
        raise ConfigError("problem.sigma_min/sigma_max: give both (0 < min <= max) or neither",
                          "problem.sigma_min")
    if p.n % cfg.ae.subdomain:
        raise ConfigError(f"ae.subdomain: {cfg.ae.subdomain} does not divide problem.n = {p.n}",
                          "ae.subdomain")
    if cfg.solve.snapshots < 0 or cfg.solve.cases < 0:
        raise ConfigError("solve.snapshots and solve.cases must be non-negative", "solve.snapshots")


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=True, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed configuration: {e}") from None
    base = RunConfig()
    sections = {f.name: f for f in fields(RunConfig)}
    updates = {}
    for sec in cp.sections():
        if sec not in sections:
            raise ConfigError(f"unknown section [{sec}]", sec)
        current = getattr(base, sec)
        known = {f.name: getattr(current, f.name) for f in fields(current)}
        kw = {}
        for key, text_value in cp.items(sec):
            if key not in known:
                raise ConfigError(f"unknown key {sec}.{key}", f"{sec}.{key}")
            kw[key] = _coerce(sec, key, known[key], text_value)
        updates[sec] = dataclasses.replace(current, **kw)
    cfg = dataclasses.replace(base, **updates)
    _validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
