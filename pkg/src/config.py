"""Experiment configuration files.

Format: one ``key = value`` per line, ``#`` starts a comment, lists are
comma separated. Example::

    # iid sweep over the default 100-candidate grid
    n = 250
    k = 5
    epsilons = 0.25, 1, inf
    repetitions = 20
    partition = dirichlet
    alpha_dir = 0.5
    oracle = separated-gaussian
    oracle.sigma_loss = 0.2
    oracle.good_count = 5
    grid.learning_rate = 0.1, 0.01, 0.001
    grid.momentum = 0, 0.9

Without any ``grid.*`` key the 100-candidate learning-rate x decay x
momentum grid is used. ``DPHYPE_SEED`` sets the seed when the file does not.
"""

import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Optional

from accountant import PrivacyBudget
from errors import ConfigError, DPHypeError
from voting import HyperparameterGrid, noise_denominator

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "DPHYPE_SEED"

DEFAULT_EPSILONS = (0.1, 0.25, 0.5, 1.0, 3.0, math.inf)


def default_seed() -> int:
    """Seed from ``DPHYPE_SEED``, or 0."""
    raw = os.environ.get(SEED_ENV_VAR, "").strip()
    if not raw:
        return 0
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"expected a non-negative integer, got {raw!r}", field=SEED_ENV_VAR) from None
    if seed < 0:
        raise ConfigError(f"expected a non-negative integer, got {raw!r}", field=SEED_ENV_VAR)
    return seed


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of a protocol sweep."""

    grid: HyperparameterGrid = field(default_factory=HyperparameterGrid.default)
    n: int = 50
    k: int = 5
    epsilons: tuple[float, ...] = DEFAULT_EPSILONS
    delta: float = 1e-5
    dropout_tolerance: float = 0.0
    noncompliant_fraction: float = 0.0
    dropout_rate: float = 0.0
    repetitions: int = 20
    seed: int = 0
    transport: str = "memory"
    partition: str = "iid"
    alpha_dir: float = 0.5
    empty_shards: str = "exclude"
    record_plain: bool = False
    objective: str = "minimize"
    workers: int = 1
    dataset_size: int = 60000
    dataset_labels: int = 10
    dataset_path: Optional[Path] = None
    oracle: str = "separated-gaussian"
    sigma_loss: float = 0.2
    good: Optional[tuple[int, ...]] = None
    good_count: int = 5
    skew_weight: float = 1.0
    size_reference: Optional[int] = None
    table_path: Optional[Path] = None
    source: Optional[Path] = field(default=None, compare=False)

    @property
    def p(self) -> int:
        return self.grid.p

    def budgets(self) -> list[PrivacyBudget]:
        return [PrivacyBudget(eps, self.delta) for eps in self.epsilons]

    def good_candidates(self) -> Optional[frozenset[int]]:
        """Declared good set; the table oracle has none unless ``oracle.good`` lists one."""
        if self.oracle != "separated-gaussian":
            return frozenset(self.good) if self.good is not None else None
        if self.good is not None:
            return frozenset(self.good)
        return frozenset(range(self.good_count))


# key -> (dataclass field, converter)
def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    value = text.strip().lower()
    if value in ("inf", "+inf", "infinity", "∞"):
        return math.inf
    return float(value)


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def convert(text: str) -> str:
        value = text.strip().lower()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return value
    return convert


def _list(item: Callable[[str], Any]) -> Callable[[str], tuple]:
    def convert(text: str) -> tuple:
        parts = [part.strip() for part in text.split(",") if part.strip()]
        if not parts:
            raise ValueError("expected at least one value")
        return tuple(item(part) for part in parts)
    return convert


def _path(text: str) -> Path:
    return Path(text.strip())


def _grid_value(text: str) -> Any:
    try:
        number = float(text)
    except ValueError:
        return text
    return int(number) if number.is_integer() and "." not in text and "e" not in text.lower() else number


_KEYS: dict[str, tuple[str, Callable[[str], Any]]] = {
    "n": ("n", _int),
    "k": ("k", _int),
    "epsilons": ("epsilons", _list(_float)),
    "delta": ("delta", _float),
    "dropout_tolerance": ("dropout_tolerance", _float),
    "noncompliant_fraction": ("noncompliant_fraction", _float),
    "dropout_rate": ("dropout_rate", _float),
    "repetitions": ("repetitions", _int),
    "seed": ("seed", _int),
    "transport": ("transport", _choice("memory", "socket")),
    "partition": ("partition", _choice("iid", "dirichlet")),
    "alpha_dir": ("alpha_dir", _float),
    "empty_shards": ("empty_shards", _choice("exclude", "prior")),
    "record_plain": ("record_plain", _bool),
    "objective": ("objective", _choice("minimize", "maximize")),
    "workers": ("workers", _int),
    "dataset.size": ("dataset_size", _int),
    "dataset.labels": ("dataset_labels", _int),
    "dataset.path": ("dataset_path", _path),
    "oracle": ("oracle", _choice("separated-gaussian", "table")),
    "oracle.sigma_loss": ("sigma_loss", _float),
    "oracle.good": ("good", _list(_int)),
    "oracle.good_count": ("good_count", _int),
    "oracle.skew_weight": ("skew_weight", _float),
    "oracle.size_reference": ("size_reference", _int),
    "oracle.table": ("table_path", _path),
}


def parse_config(text: str, path: Optional[Path] = None) -> ExperimentConfig:
    """Parse config text; every error names its line and key."""
    values: dict[str, Any] = {}
    lines: dict[str, int] = {}
    grid_params: dict[str, list[Any]] = {}
    grid_size: Optional[int] = None

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", path, line_no)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("missing key", path, line_no)
        if key in lines:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", path, line_no, key)
        lines[key] = line_no

        try:
            if key == "grid.size":
                grid_size = _int(value)
            elif key.startswith("grid."):
                name = key[len("grid."):]
                if not name:
                    raise ValueError("grid parameter needs a name")
                grid_params[name] = list(_list(_grid_value)(value))
            elif key in _KEYS:
                field_name, convert = _KEYS[key]
                values[field_name] = convert(value)
            else:
                raise ConfigError("unknown key", path, line_no, key)
        except ValueError as e:
            raise ConfigError(str(e), path, line_no, key) from e

    def fail(message: str, key: str) -> ConfigError:
        return ConfigError(message, path, lines.get(key), key)

    if grid_size is not None and grid_params:
        raise fail("cannot combine grid.size with named grid parameters", "grid.size")
    try:
        if grid_size is not None:
            values["grid"] = HyperparameterGrid.anonymous(grid_size)
        elif grid_params:
            values["grid"] = HyperparameterGrid.cross_product(grid_params)
    except DPHypeError as e:
        raise fail(str(e), "grid.size" if grid_size is not None else next(k for k in lines if k.startswith("grid."))) from e

    if "seed" not in values:
        values["seed"] = default_seed()

    base = path.parent if path is not None else Path(".")
    for field_name in ("dataset_path", "table_path"):
        if values.get(field_name) is not None and not values[field_name].is_absolute():
            values[field_name] = base / values[field_name]

    config = ExperimentConfig(source=path, **values)
    validate_config(config, lines, path)
    logger.debug(f"Parsed config {path or '<text>'}: p={config.p}, n={config.n}, k={config.k}")
    return config


_FIELD_KEYS = {field_name: key for key, (field_name, _) in _KEYS.items()}


def validate_config(
    config: ExperimentConfig,
    lines: Optional[dict[str, int]] = None,
    path: Optional[Path] = None,
) -> None:
    """Cross-field checks; raises ConfigError pointing at the offending key."""
    lines = lines or {}

    def check(condition: bool, field_name: str, message: str) -> None:
        if not condition:
            key = _FIELD_KEYS.get(field_name, field_name)
            raise ConfigError(message, path, lines.get(key), key)

    check(config.n >= 1, "n", "need at least one client")
    check(1 <= config.k <= config.p, "k", f"must lie in [1, p={config.p}]")
    check(len(config.epsilons) >= 1, "epsilons", "need at least one epsilon")
    check(all(e > 0 for e in config.epsilons), "epsilons", "epsilons must be > 0 (inf allowed)")
    check(0.0 < config.delta < 1.0, "delta", "must lie in (0, 1)")
    check(0.0 <= config.dropout_tolerance < 1.0, "dropout_tolerance", "must lie in [0, 1)")
    check(0.0 <= config.noncompliant_fraction < 1.0, "noncompliant_fraction", "must lie in [0, 1)")
    check(
        config.dropout_tolerance + config.noncompliant_fraction < 1.0,
        "noncompliant_fraction",
        "dropout_tolerance + noncompliant_fraction must stay below 1",
    )
    check(0.0 <= config.dropout_rate < 1.0, "dropout_rate", "must lie in [0, 1)")
    check(config.repetitions >= 1, "repetitions", "must be >= 1")
    check(config.seed >= 0, "seed", "must be >= 0")
    check(config.workers >= 1, "workers", "must be >= 1")
    check(config.alpha_dir > 0, "alpha_dir", "concentration must be > 0")
    check(config.dataset_size >= config.n, "dataset_size", f"need at least n={config.n} items")
    check(config.dataset_labels >= 1, "dataset_labels", "must be >= 1")
    check(config.sigma_loss >= 0, "sigma_loss", "must be >= 0")
    check(config.skew_weight >= 0, "skew_weight", "must be >= 0")
    check(config.size_reference is None or config.size_reference >= 1, "size_reference", "must be >= 1")
    check(config.oracle != "table" or config.table_path is not None, "table_path", "table oracle needs oracle.table")
    if config.good is not None:
        check(len(config.good) >= 1, "good", "need at least one good candidate")
        check(all(0 <= g < config.p for g in config.good), "good", f"indices must lie in [0, {config.p})")
    elif config.oracle == "separated-gaussian":
        check(1 <= config.good_count <= config.p, "good_count", f"must lie in [1, p={config.p}]")
    noise_denominator(config.n, config.dropout_tolerance, config.noncompliant_fraction)


def load_config(path: Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}", path) from e
    return parse_config(text, Path(path))


def with_overrides(config: ExperimentConfig, **overrides: Any) -> ExperimentConfig:
    """Apply CLI overrides (None values are ignored) and re-validate."""
    known = {f.name for f in fields(ExperimentConfig)}
    changes = {k: v for k, v in overrides.items() if v is not None and k in known}
    if not changes:
        return config
    updated = replace(config, **changes)
    validate_config(updated, path=config.source)
    return updated
