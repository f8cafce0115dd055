"""Run configuration, logging setup, hashing and atomic output writes."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import appdirs

from causalbench.balance import DenominatorPolicy
from causalbench.effect import Estimand
from causalbench.errors import ConfigError
from causalbench.methods import PLUGIN_PREFIX, Approach, default_suite, is_known

PACKAGE_NAME = "causalbench"
LOG_ENV = "CAUSAL_BENCH_LOG"
CACHE_ENV = "CAUSAL_BENCH_CACHE"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
MIN_BOOTSTRAP_REPS = 100
DEFAULT_BOOTSTRAP_REPS = 1000

logger = logging.getLogger(__name__)


def configure_logging(level: str | None = None) -> int:
    """Attach one stderr handler to the package logger.

    The level comes from ``level`` or ``CAUSAL_BENCH_LOG`` (error, info or
    debug); anything else falls back to error.
    """
    name = (level or os.environ.get(LOG_ENV) or "error").strip().lower()
    package_logger = logging.getLogger(PACKAGE_NAME)
    if name not in LOG_LEVELS:
        logger.warning("Unknown log level '%s'; using error", name)
        name = "error"
    for handler in list(package_logger.handlers):
        if getattr(handler, "_causalbench", False):
            package_logger.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    handler._causalbench = True  # type: ignore[attr-defined]
    package_logger.addHandler(handler)
    package_logger.setLevel(LOG_LEVELS[name])
    return LOG_LEVELS[name]


def cache_dir() -> Path:
    override = os.environ.get(CACHE_ENV)
    return Path(override) if override else Path(appdirs.user_cache_dir(PACKAGE_NAME))


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def settings_hash(obj: Any) -> str:
    """SHA-256 of the canonical (sorted-key) JSON rendering of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write ``text`` to a temp file next to ``path`` and rename it into place."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def atomic_write_json(path: str | Path, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


@dataclass(frozen=True)
class MethodConfig:
    """One benchmark row: the method to run under a caller-chosen id."""

    method_id: str
    method: str = ""
    settings: Mapping[str, Any] = field(default_factory=dict)
    estimand: Estimand = Estimand.ATE
    seed: int | None = None
    approach: Approach | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", self.method or self.method_id)
        object.__setattr__(self, "estimand", Estimand.parse(self.estimand))
        if self.approach is not None:
            object.__setattr__(self, "approach", Approach(self.approach))

    @property
    def is_plugin(self) -> bool:
        return self.method.startswith(PLUGIN_PREFIX)

    @property
    def plugin_name(self) -> str:
        return self.method[len(PLUGIN_PREFIX) :]

    def to_dict(self) -> dict[str, Any]:
        return {
            "method_id": self.method_id,
            "method": self.method,
            "settings": dict(self.settings),
            "estimand": self.estimand.value,
            "seed": self.seed,
            "approach": None if self.approach is None else self.approach.value,
        }


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = DEFAULT_BOOTSTRAP_REPS  # noqa: N815
    seed: int = 0


@dataclass(frozen=True)
class PluginConfig:
    """External estimator: ``command`` is run with the NRS CSV path appended."""

    name: str
    command: tuple[str, ...]
    approach: Approach = Approach.OUTCOME_AND_TREATMENT
    timeout: float = 600.0


@dataclass(frozen=True)
class RunConfig:
    methods: tuple[MethodConfig, ...]
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    outcomes: tuple[str, ...] | None = None
    denominator_policy: DenominatorPolicy = DenominatorPolicy.POOLED_SD
    jobs: int | None = None
    plugins: Mapping[str, PluginConfig] = field(default_factory=dict)
    plugin_jobs: int = 2
    inputs: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def default(cls, B: int = DEFAULT_BOOTSTRAP_REPS, seed: int = 0) -> RunConfig:  # noqa: N803
        return cls(
            methods=tuple(MethodConfig(m) for m in default_suite()),
            bootstrap=BootstrapConfig(B, seed),
        )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Path | None = None) -> RunConfig:
        """Parse and validate a configuration mapping.

        Raises:
            ConfigError: Malformed structure or a failed validation rule
        """
        if not isinstance(data, Mapping):
            raise ConfigError("Configuration must be a JSON object")
        try:
            raw_methods = data.get("methods") or [{"method_id": m} for m in default_suite()]
            methods = tuple(
                MethodConfig(**m) if isinstance(m, Mapping) else MethodConfig(str(m))
                for m in raw_methods
            )
            boot = data.get("bootstrap", {})
            bootstrap = BootstrapConfig(
                int(boot.get("B", DEFAULT_BOOTSTRAP_REPS)), int(boot.get("seed", 0))
            )
            plugins = {
                name: PluginConfig(
                    name,
                    tuple(spec["command"]),
                    Approach(spec.get("approach", Approach.OUTCOME_AND_TREATMENT.value)),
                    float(spec.get("timeout", 600.0)),
                )
                for name, spec in data.get("plugins", {}).items()
            }
            inputs = {k: str(v) for k, v in data.get("inputs", {}).items()}
            if base_dir is not None:
                inputs = {
                    k: v if Path(v).is_absolute() else str(base_dir / v)
                    for k, v in inputs.items()
                }
            outcomes = data.get("outcomes")
            config = cls(
                methods=methods,
                bootstrap=bootstrap,
                outcomes=tuple(outcomes) if outcomes else None,
                denominator_policy=DenominatorPolicy(
                    data.get("denominator_policy", DenominatorPolicy.POOLED_SD.value)
                ),
                jobs=data.get("jobs"),
                plugins=plugins,
                plugin_jobs=int(data.get("plugin_jobs", 2)),
                inputs=inputs,
            )
        except (TypeError, ValueError, KeyError, AttributeError) as e:
            raise ConfigError(f"Malformed configuration: {e}") from None
        config.validate()
        return config

    @classmethod
    def from_json(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Configuration file not found: {path}", "CONFIG_NOT_FOUND")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(data, base_dir=path.parent)

    def validate(self) -> None:
        if not self.methods:
            raise ConfigError("Configuration lists no methods")
        ids = [m.method_id for m in self.methods]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise ConfigError(f"Duplicate method ids: {', '.join(duplicates)}")
        if self.bootstrap.B < MIN_BOOTSTRAP_REPS:
            raise ConfigError(
                f"bootstrap.B must be at least {MIN_BOOTSTRAP_REPS}, got {self.bootstrap.B}"
            )
        for m in self.methods:
            if m.is_plugin:
                if m.plugin_name not in self.plugins:
                    raise ConfigError(f"{m.method_id}: plugin '{m.plugin_name}' is not configured")
            elif not is_known(m.method):
                raise ConfigError(f"{m.method_id}: unknown method '{m.method}'")
        if self.jobs is not None and self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        for name, value in self.inputs.items():
            if not Path(value).exists():
                raise ConfigError(f"Input '{name}' not found: {value}", "INPUT_NOT_FOUND")

    def with_overrides(
        self,
        seed: int | None = None,
        bootstrap_reps: int | None = None,
        jobs: int | None = None,
        estimand: Estimand | None = None,
    ) -> RunConfig:
        """Copy with command-line flags applied on top of the file settings."""
        bootstrap = BootstrapConfig(
            self.bootstrap.B if bootstrap_reps is None else bootstrap_reps,
            self.bootstrap.seed if seed is None else seed,
        )
        methods = self.methods
        if estimand is not None:
            methods = tuple(
                MethodConfig(m.method_id, m.method, m.settings, estimand, m.seed, m.approach)
                for m in methods
            )
        config = RunConfig(
            methods=methods,
            bootstrap=bootstrap,
            outcomes=self.outcomes,
            denominator_policy=self.denominator_policy,
            jobs=self.jobs if jobs is None else jobs,
            plugins=self.plugins,
            plugin_jobs=self.plugin_jobs,
            inputs=self.inputs,
        )
        config.validate()
        return config

    def to_dict(self) -> dict[str, Any]:
        return {
            "methods": [m.to_dict() for m in self.methods],
            "bootstrap": asdict(self.bootstrap),
            "outcomes": None if self.outcomes is None else list(self.outcomes),
            "denominator_policy": self.denominator_policy.value,
            "plugins": {
                name: {
                    "command": list(p.command),
                    "approach": p.approach.value,
                    "timeout": p.timeout,
                }
                for name, p in self.plugins.items()
            },
            "plugin_jobs": self.plugin_jobs,
        }
