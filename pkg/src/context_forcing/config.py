"""Flat, versioned ``section.key = value`` experiment configuration.

Example::

    # context-forcing experiment config
    version = 1
    cache.n_slow = 12
    stage2.steps = 500

Unknown keys, malformed values and cross-field inconsistencies raise
:class:`ConfigError` with the offending key in the message. ``dumps`` writes
every key in schema order, so ``loads(dumps(cfg)) == cfg`` and the text
snapshot is diff-friendly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .memory import CacheConfig
from .numerics import SceneProcess

FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> tuple:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (default, parser, choices or None)
_SCHEMA = {
    "run.seed": (0, int, None),
    "domain.identity_dim": (2, int, None),
    "domain.frame_dim": (4, int, None),
    "domain.chunk_size": (3, int, None),
    "domain.transition": (0.9, float, None),
    "domain.noise_scale": (0.15, float, None),
    "domain.cond_noise": (1.0, float, None),
    "schedule.T": (4, int, None),
    "schedule.kind": ("vp", str, ("vp",)),
    "schedule.t_max": (0.97, float, None),
    "schedule.weighting": ("sigma2_over_alpha", str, ("sigma2_over_alpha", "unit")),
    "cache.n_sink": (3, int, None),
    "cache.n_slow": (12, int, None),
    "cache.n_fast": (6, int, None),
    "cache.tau": (0.95, float, None),
    "cache.consolidation_interval": (2, int, None),
    "cache.keep_policy": ("first", str, ("first", "all")),
    "cache.selection": ("surprisal", str, ("surprisal", "uniform")),
    "cache.bounded_positions": (True, _parse_bool, None),
    "net.head_dim": (8, int, None),
    "net.n_heads": (2, int, None),
    "net.hidden": (32, int, None),
    "net.pe_base": (100.0, float, None),
    "net.init_scale": (0.3, float, None),
    "teacher.kind": ("analytic", str, ("analytic", "trained")),
    "teacher.memoryless": (False, _parse_bool, None),
    "teacher.steps": (2000, int, None),
    "teacher.n_chunks": (8, int, None),
    "teacher.batch": (16, int, None),
    "teacher.lr": (3e-2, float, None),
    "erft.enabled": (True, _parse_bool, None),
    "erft.steps": (500, int, None),
    "erft.lr": (1e-3, float, None),
    "erft.bernoulli_p": (0.5, float, None),
    "erft.scale": (1.0, float, None),
    "erft.bank_capacity": (256, int, None),
    "base.steps": (1500, int, None),
    "base.n_chunks": (5, int, None),
    "base.batch": (16, int, None),
    "base.lr": (1e-2, float, None),
    "stage1.steps": (200, int, None),
    "stage1.batch": (16, int, None),
    "stage1.lr_gen": (1e-3, float, None),
    "stage1.lr_fake": (2e-3, float, None),
    "stage1.fake_steps": (2, int, None),
    "curriculum.L0": (5, int, None),
    "curriculum.L1": (30, int, None),
    "curriculum.s_d": (500, int, None),
    "rollout.target_len": (3, int, None),
    "rollout.c_len": ("uniform", str, None),
    "stage2.enabled": (True, _parse_bool, None),
    "stage2.steps": (500, int, None),
    "stage2.batch": (32, int, None),
    "stage2.lr_gen": (3e-4, float, None),
    "stage2.lr_fake": (2e-3, float, None),
    "stage2.fake_steps": (5, int, None),
    "eval.n_chunks": (60, int, None),
    "eval.marks": ((10, 20, 30, 40, 50, 60), _parse_ints, None),
    "eval.seeds": ((0, 1, 2, 3, 4), _parse_ints, None),
    "eval.n_prompts": (16, int, None),
    "eval.half_window": (0, int, None),
    "eval.bounded_positions": (True, _parse_bool, None),
}

KEYS = tuple(_SCHEMA)


@dataclass(frozen=True)
class ExperimentConfig:
    """Immutable mapping from dotted key to typed value."""

    values: tuple

    @classmethod
    def default(cls) -> "ExperimentConfig":
        return cls(tuple((k, spec[0]) for k, spec in _SCHEMA.items()))

    def __getitem__(self, key: str):
        for k, v in self.values:
            if k == key:
                return v
        raise KeyError(key)

    def as_dict(self) -> dict:
        return dict(self.values)

    def with_overrides(self, overrides) -> "ExperimentConfig":
        """Apply ``key=value`` strings or ``(key, value)`` pairs; values may be text."""
        d = self.as_dict()
        for item in overrides:
            if isinstance(item, str):
                if "=" not in item:
                    raise ConfigError(f"override {item!r} is not of the form key=value")
                key, raw = (s.strip() for s in item.split("=", 1))
            else:
                key, raw = item
            d[key] = _coerce(key, raw)
        cfg = ExperimentConfig(tuple((k, d[k]) for k in _SCHEMA))
        cfg.validate()
        return cfg

    def section(self, name: str) -> dict:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.values if k.startswith(pre)}

    def validate(self):
        d = self.as_dict()
        positive = ["domain.identity_dim", "domain.frame_dim", "domain.chunk_size", "schedule.T", "net.head_dim",
                    "net.n_heads", "net.hidden", "teacher.n_chunks", "teacher.batch", "base.n_chunks", "base.batch",
                    "stage1.batch", "stage2.batch", "curriculum.L0", "curriculum.s_d", "eval.n_chunks",
                    "eval.n_prompts", "erft.bank_capacity", "rollout.target_len"]
        for k in positive:
            if d[k] < 1:
                raise ConfigError(f"{k}: must be >= 1, got {d[k]}")
        for k in ("teacher.steps", "erft.steps", "base.steps", "stage1.steps", "stage2.steps",
                  "stage1.fake_steps", "stage2.fake_steps", "eval.half_window", "cache.n_slow"):
            if d[k] < 0:
                raise ConfigError(f"{k}: must be >= 0, got {d[k]}")
        if d["net.head_dim"] % 2:
            raise ConfigError("net.head_dim: must be even (sinusoidal embedding)")
        if not 0.0 < d["schedule.t_max"] < 1.0:
            raise ConfigError("schedule.t_max: must lie in (0, 1)")
        if d["domain.noise_scale"] < 0 or d["domain.cond_noise"] < 0:
            raise ConfigError("domain noise scales must be >= 0")
        if d["curriculum.L1"] < d["curriculum.L0"]:
            raise ConfigError("curriculum.L1: must be >= curriculum.L0")
        if d["rollout.target_len"] > d["curriculum.L0"]:
            raise ConfigError("rollout.target_len: must not exceed curriculum.L0")
        if d["eval.n_chunks"] < max(d["eval.marks"]) or min(d["eval.marks"]) < 1:
            raise ConfigError("eval.marks: must lie within 1..eval.n_chunks")
        if d["rollout.c_len"] != "uniform":
            try:
                if int(d["rollout.c_len"]) < 0:
                    raise ValueError
            except ValueError:
                raise ConfigError("rollout.c_len: expected 'uniform' or a non-negative integer") from None
        for k in ("erft.bernoulli_p",):
            if not 0.0 <= d[k] <= 1.0:
                raise ConfigError(f"{k}: must lie in [0, 1]")
        if d["erft.scale"] < 0:
            raise ConfigError("erft.scale: must be >= 0")
        try:
            self.cache_config()
        except ValueError as exc:
            raise ConfigError(f"cache: {exc}") from None
        try:
            SceneProcess(identity_dim=d["domain.identity_dim"], frame_dim=d["domain.frame_dim"],
                         transition=d["domain.transition"], noise_scale=d["domain.noise_scale"],
                         chunk_size=d["domain.chunk_size"], cond_noise=d["domain.cond_noise"])
        except ValueError as exc:
            raise ConfigError(f"domain: {exc}") from None

    def cache_config(self, **overrides) -> CacheConfig:
        c = self.section("cache")
        return replace(CacheConfig(**c), **overrides)

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256(dumps(self).encode()).hexdigest()[:12]


def _coerce(key: str, raw):
    if key not in _SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    default, parser, choices = _SCHEMA[key]
    if not isinstance(raw, str):
        value = raw
    else:
        try:
            value = parser(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if type(value) is not type(default):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {type(value).__name__}")
    if choices is not None and value not in choices:
        raise ConfigError(f"{key}: {value!r} is not one of {', '.join(choices)}")
    return value


def loads(text: str) -> ExperimentConfig:
    pairs = []
    version = None
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "version":
            version = raw
            continue
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        pairs.append((key, raw))
    if version is None:
        raise ConfigError("missing 'version' line")
    if version != str(FORMAT_VERSION):
        raise ConfigError(f"unsupported config version {version} (expected {FORMAT_VERSION})")
    return ExperimentConfig.default().with_overrides(pairs)


def dumps(cfg: ExperimentConfig) -> str:
    lines = ["# context-forcing experiment config", f"version = {FORMAT_VERSION}"]
    lines += [f"{k} = {_fmt(v)}" for k, v in cfg.values]
    return "\n".join(lines) + "\n"


def load(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


PRESETS = {
    "uniform-1": ("cache.selection=uniform", "cache.consolidation_interval=1"),
    "uniform-2": ("cache.selection=uniform", "cache.consolidation_interval=2"),
    "no-cdmd": ("stage2.enabled=false",),
    "no-bounded-pe": ("eval.bounded_positions=false",),
    "no-erft": ("erft.enabled=false",),
    "memoryless-teacher": ("teacher.memoryless=true",),
}

