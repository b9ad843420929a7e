"""Run configuration: a flat, JSON-serialisable dataclass with validation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

SCHEMA = "dpfpl.run/1"
ENV_PREFIX = "DPFPL_"

VARIANTS = (
    "dp-fpl",
    "dp-fpl-no-residual",
    "full-rank-local",
    "shared-only",
    "persistent-low-rank",
)
SPLITS = ("pathological", "dirichlet")

# Grids used by the ablation scripts.
EPSILON_GRID = (0.01, 0.05, 0.1, 0.2, 0.4)
RANK_GRID = (1, 2, 4, 8)


class ConfigError(ValueError):
    """Raised with one ``field: message`` line per invalid field."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


@dataclass
class RunConfig:
    schema: str = SCHEMA
    # toy encoder dimensions
    prompt_len: int = 8  # b
    prompt_dim: int = 32  # d
    token_dim: int = 8  # e
    image_dim: int = 16  # m
    num_classes: int = 8  # C
    hidden: int | None = None  # text encoder width, defaults to prompt_dim
    rank: int = 8  # k
    # protocol
    num_clients: int = 4  # N
    rounds: int = 100  # T
    batch_size: int = 32  # |B|
    lr_global: float = 1e-2
    lr_local: float = 1e-2
    temperature: float = 0.01
    init_std: float = 0.02
    # privacy
    epsilon: float = 0.1
    delta: float = 1e-5
    clip_threshold: float = 10.0
    noise: bool = True
    variant: str = "dp-fpl"
    # data
    split: str = "pathological"
    classes_per_client: int = 2
    alpha: float = 0.3
    per_class: int = 200
    data_noise: float = 0.5
    mean_scale: float = 1.0
    alignment: float = 0.7  # how much the frozen backbone already knows the classes
    ref_std: float = 1.0
    # seeds and bookkeeping
    seed: int = 0
    population_seed: int | None = None  # encoders + class means; defaults to seed
    repetitions: int = 1
    eval_every: int = 1
    threads: int = 1
    notes: dict = field(default_factory=dict)

    @property
    def pop_seed(self) -> int:
        return self.seed if self.population_seed is None else self.population_seed

    def problems(self) -> list[str]:
        out = []

        def need(ok, name, msg):
            if not ok:
                out.append(f"{name}: {msg} (got {getattr(self, name)!r})")

        need(self.schema == SCHEMA, "schema", f"expected {SCHEMA!r}")
        for name in ("prompt_len", "prompt_dim", "token_dim", "image_dim", "num_clients",
                     "rounds", "batch_size", "repetitions", "eval_every", "threads"):
            need(isinstance(getattr(self, name), int) and getattr(self, name) >= 1, name, "must be an integer >= 1")
        need(isinstance(self.num_classes, int) and self.num_classes >= 2, "num_classes", "must be an integer >= 2")
        need(self.hidden is None or (isinstance(self.hidden, int) and self.hidden >= 1), "hidden", "must be null or >= 1")
        need(isinstance(self.rank, int) and 1 <= self.rank <= min(self.prompt_len, self.prompt_dim),
             "rank", f"must be in [1, min(b, d)] = [1, {min(self.prompt_len, self.prompt_dim)}]")
        for name in ("lr_global", "lr_local", "temperature", "clip_threshold", "mean_scale"):
            need(_num(getattr(self, name)) and getattr(self, name) > 0, name, "must be > 0")
        need(_num(self.alignment) and 0 <= self.alignment <= 1, "alignment", "must be in [0, 1]")
        for name in ("init_std", "data_noise", "ref_std"):
            need(_num(getattr(self, name)) and getattr(self, name) >= 0, name, "must be >= 0")
        need(_num(self.epsilon) and self.epsilon > 0, "epsilon", "must be > 0")
        need(_num(self.delta) and 0 < self.delta < 1, "delta", "must be in (0, 1)")
        need(isinstance(self.noise, bool), "noise", "must be true or false")
        need(self.variant in VARIANTS, "variant", f"must be one of {VARIANTS}")
        need(self.split in SPLITS, "split", f"must be one of {SPLITS}")
        need(isinstance(self.per_class, int) and self.per_class >= 2, "per_class", "must be an integer >= 2")
        need(isinstance(self.seed, int) and self.seed >= 0, "seed", "must be an integer >= 0")
        need(self.population_seed is None or (isinstance(self.population_seed, int) and self.population_seed >= 0),
             "population_seed", "must be null or an integer >= 0")
        if self.split == "pathological":
            need(isinstance(self.classes_per_client, int) and self.classes_per_client >= 1,
                 "classes_per_client", "must be an integer >= 1")
            if isinstance(self.classes_per_client, int) and isinstance(self.num_clients, int):
                need(self.num_clients * self.classes_per_client <= self.num_classes, "classes_per_client",
                     f"num_clients x classes_per_client must be <= num_classes={self.num_classes}")
        else:
            need(_num(self.alpha) and self.alpha > 0, "alpha", "must be > 0")
            need(isinstance(self.num_clients, int) and self.num_clients >= 2, "num_clients",
                 "dirichlet split needs >= 2 clients")
        return out

    def validate(self) -> "RunConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        """Hash of everything that affects results except the master seed."""
        d = self.to_dict()
        for k in ("seed", "threads", "notes"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        if "schema" not in d:
            raise ConfigError([f"schema: missing (expected {SCHEMA!r})"])
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError([str(exc)]) from exc
        return cfg


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and x == x and abs(x) != float("inf")


def _coerce(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env(d: dict, environ=None) -> dict:
    """Override fields from ``DPFPL_<FIELD>`` environment variables."""
    environ = os.environ if environ is None else environ
    out = dict(d)
    defaults = RunConfig()
    for f in fields(RunConfig):
        key = ENV_PREFIX + f.name.upper()
        if key in environ:
            try:
                out[f.name] = _coerce(environ[key], out.get(f.name, getattr(defaults, f.name)))
            except ValueError:
                raise ConfigError([f"{f.name}: cannot parse {key}={environ[key]!r}"]) from None
    return out


def load_config(path, environ=None, **overrides) -> RunConfig:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"<file>: not valid JSON ({exc})"]) from None
    if not isinstance(d, dict):
        raise ConfigError(["<file>: top level must be an object"])
    d = apply_env(d, environ)
    d.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(d).validate()
