"""Configuration management for sparsetile.

Finds ``sparsetile.json``, loads and saves it with JSON schema
validation, and resolves the worker count used by the kernels and the
bench harness.  The configuration directory is chosen in this order:

1. the ``SPARSETILE_CONFIG_DIR`` environment variable;
2. ``app_dir`` when a ``portable.flag`` file exists there (or ``--portable``);
3. ``%APPDATA%/sparsetile`` on Windows, ``$XDG_CONFIG_HOME/sparsetile``
   (default ``~/.config/sparsetile``) elsewhere.

Example usage::

    from sparsetile.config_service import ConfigService

    service = ConfigService(app_dir=Path.cwd())
    cfg = service.load_config()
    cfg["workers"] = 8
    service.save_config(cfg)
"""

from __future__ import annotations

import json
import os
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from . import tuning
from .errors import ConfigError

try:
    import jsonschema
except ImportError:  # pragma: no cover
    jsonschema = None

SCHEMA_DIR = Path(__file__).resolve().parent / "schemas"
CONFIG_SCHEMA = "config.schema.json"
BENCH_CONFIG_SCHEMA = "bench_config.schema.json"
KV_MANIFEST_SCHEMA = "kv_manifest.schema.json"


def _get_appdata_root(app_name: str = "sparsetile") -> Path:
    """Return the platform-specific base directory for config files."""
    system = platform.system().lower()
    if system == "windows":
        appdata = os.environ.get("APPDATA")
        if appdata:
            return Path(appdata) / app_name
        return Path.home() / f"AppData/Roaming/{app_name}"
    xdg = os.environ.get("XDG_CONFIG_HOME")
    if xdg:
        return Path(xdg) / app_name
    return Path.home() / ".config" / app_name


def load_json(path: Path) -> Any:
    if not path.exists():
        return None
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_json(data: Any, file_path: Path) -> None:
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with file_path.open("w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, indent=2)


def schema_path(schema_name: str) -> Path:
    return SCHEMA_DIR / schema_name


def validate_json(data: Any, schema_name: str, what: str = "configuration") -> None:
    """Validate against a packaged schema if the jsonschema library is available."""
    if jsonschema is None:
        return
    schema = load_json(schema_path(schema_name))
    if not schema:
        return
    try:
        jsonschema.validate(instance=data, schema=schema)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"Invalid {what}: {exc.message}")


def resolve_workers(
    cli_workers: Optional[int] = None,
    config: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> int:
    """Worker count: CLI flag, then ``SPARAMX_THREADS``, then config, then the CPU count."""
    if cli_workers is not None:
        if cli_workers < 1:
            raise ConfigError(f"workers must be >= 1, got {cli_workers}")
        return int(cli_workers)
    env = os.environ if environ is None else environ
    raw = env.get(tuning.THREADS_ENV_VAR)
    if raw:
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{tuning.THREADS_ENV_VAR} must be an integer, got '{raw}'")
        if value < 1:
            raise ConfigError(f"{tuning.THREADS_ENV_VAR} must be >= 1, got {value}")
        return value
    if config and config.get("workers"):
        return int(config["workers"])
    return os.cpu_count() or 1


@dataclass
class ConfigService:
    """Resolve and manage sparsetile configuration."""

    app_dir: Path
    portable_flag_filename: str = "portable.flag"
    config_filename: str = "sparsetile.json"
    _cached_mode: Optional[bool] = field(default=None, init=False, repr=False)

    def _portable_flag_exists(self) -> bool:
        return (self.app_dir / self.portable_flag_filename).exists()

    def detect_mode(self, cli_portable: bool = False) -> bool:
        """Return ``True`` if portable mode should be used.

        A ``portable.flag`` file in ``app_dir`` always wins over the CLI
        flag.  The result is cached.
        """
        if self._cached_mode is None:
            if self._portable_flag_exists():
                self._cached_mode = True
            else:
                self._cached_mode = bool(cli_portable)
        return self._cached_mode

    def get_config_dir(self, cli_portable: bool = False) -> Path:
        override = os.environ.get(tuning.CONFIG_DIR_ENV_VAR)
        if override:
            return Path(override)
        if self.detect_mode(cli_portable=cli_portable):
            return self.app_dir
        return _get_appdata_root()

    def get_config_path(self, cli_portable: bool = False) -> Path:
        return self.get_config_dir(cli_portable) / self.config_filename

    def load_config(self, cli_portable: bool = False) -> Dict[str, Any]:
        """Load configuration, falling back to ``{}`` when the file is invalid."""
        cfg_path = self.get_config_path(cli_portable)
        try:
            data = load_json(cfg_path)
        except json.JSONDecodeError as exc:
            print(f"Warning: {cfg_path} is not valid JSON ({exc.msg}). Falling back to defaults.")
            return {}
        cfg: Dict[str, Any] = data if data is not None else {}
        try:
            validate_json(cfg, CONFIG_SCHEMA)
        except ConfigError as exc:
            print(f"Warning: {exc}. Falling back to defaults.")
            cfg = {}
        return cfg

    def save_config(self, config: Dict[str, Any], cli_portable: bool = False) -> None:
        """Write configuration to disk, validating against the schema first."""
        validate_json(config, CONFIG_SCHEMA)
        save_json(config, self.get_config_path(cli_portable))

    def apply_tuning(self, config: Mapping[str, Any]) -> None:
        """Push the ``tuning`` section of a loaded config into :mod:`sparsetile.tuning`."""
        overrides = config.get("tuning")
        if isinstance(overrides, dict):
            tuning.apply_overrides(overrides)

    def is_portable_mode(self) -> bool:
        try:
            return self._portable_flag_exists()
        except Exception:
            return False
