"""Experiment configuration: a flat ``key = value`` text format with ``#`` comments."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .kge.scoring import METHODS
from .ledger import PACKED, WORST_CASE

STRATEGIES = ("feds", "fedep", "fedepl", "fede_kd", "fede_svd", "fede_svdplus", "single")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "synthetic"
    num_clients: int = 3
    strategy: str = "feds"
    kge_method: str = "transe"
    D: int = 256
    p: float = 0.4
    s: int = 4
    local_epochs: int = 3
    batch_size: int = 512
    lr: float = 1e-4
    gamma: float = 8.0
    epsilon: float = 2.0
    alpha_adv: float = 1.0
    negatives: int = 16
    eval_every: int = 5
    patience: int = 3
    seed: int = 0
    counting_mode: str = WORST_CASE
    max_rounds: int = 1000
    kd_low_dim: int = 0  # 0 -> 3/4 of D (192 at D=256)
    kd_distill: bool = True
    svd_cols: int = 8
    svd_rank: int = 5
    svd_alpha: float = 0.05

    def __post_init__(self):
        problems = []
        if self.strategy not in STRATEGIES:
            problems.append(f"strategy must be one of {STRATEGIES}")
        if self.kge_method not in METHODS:
            problems.append(f"kge_method must be one of {METHODS}")
        if self.counting_mode not in (WORST_CASE, PACKED):
            problems.append(f"counting_mode must be {WORST_CASE!r} or {PACKED!r}")
        if self.num_clients < 2:
            problems.append("num_clients must be >= 2")
        if self.D < 1:
            problems.append("D must be >= 1")
        if not 0 < self.p <= 1:
            problems.append("p must be in (0, 1]")
        if self.strategy == "fedepl" and self.p >= 1:
            problems.append("fedepl needs p < 1")
        if self.s < 1:
            problems.append("s must be >= 1")
        if self.eval_every < 1:
            problems.append("eval_every must be >= 1")
        if self.patience < 1:
            problems.append("patience must be >= 1")
        if self.max_rounds < 1:
            problems.append("max_rounds must be >= 1")
        if self.svd_rank > self.svd_cols:
            problems.append("svd_rank must not exceed svd_cols")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def low_dim(self) -> int:
        return self.kd_low_dim or (3 * self.D) // 4

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


def _coerce(name, raw, typ):
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from None


_TYPES = {"str": str, "int": int, "float": float, "bool": bool}


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    types = {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    return replace(base or ExperimentConfig(), **values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))
