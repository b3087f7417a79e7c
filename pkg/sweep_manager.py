"""Sweep configuration and resumable result persistence."""

import csv
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Set, Tuple

from constants import (
    BLOCK_CONSTANT_C,
    CONFIG_DIR_NAME,
    CONFIG_SNAPSHOT_NAME,
    CONFIG_VERSION,
    DEFAULT_EPSILON,
    DEFAULT_TOLERANCE,
    ENV_OUTPUT_DIR,
    ENV_THREADS,
    FAR_BLOCKS_FORMULA,
    FAR_BLOCKS_MEASURED,
    METHOD_MOMENT_PREFIX,
    METHOD_SCHEME_GAIN,
    METHOD_SCHEME_RATE,
    MIN_NODES,
    MIN_SCHEME_N,
    NORM_METHODS,
    RATE_METHODS,
    RUNS_DIR_NAME,
    SWEEP_CSV_HEADER,
    SWEEP_CSV_NAME
)
from errors import InvalidConfigError, ReportWriteError

logger = logging.getLogger(__name__)

MOMENT_METHOD = re.compile(rf'^{METHOD_MOMENT_PREFIX}([1-9][0-9]*)$')
SCHEME_KEYS = ('c1', 'c2', 'epsilon', 't', 'tau', 'amplification', 'theta', 'burst_policy',
               'target_signal_power', 'noise_trials', 'sources', 'snr_margin', 'tdma_steps')


def is_known_method(method: str) -> bool:
    return method in NORM_METHODS or method in RATE_METHODS or bool(MOMENT_METHOD.match(method))


def is_norm_method(method: str) -> bool:
    """Methods whose value is a norm (or a bound on it), fitted on value^2."""
    return method in NORM_METHODS or bool(MOMENT_METHOD.match(method))


def moment_order(method: str) -> Optional[int]:
    match = MOMENT_METHOD.match(method)
    return int(match.group(1)) if match else None


def default_output_dir() -> Path:
    """$LOSBROADCAST_OUT, else ~/.losbroadcast/runs."""
    env = os.environ.get(ENV_OUTPUT_DIR)
    if env:
        return Path(env).expanduser()
    return Path.home() / CONFIG_DIR_NAME / RUNS_DIR_NAME


def default_threads() -> int:
    env = os.environ.get(ENV_THREADS)
    if env:
        try:
            value = int(env)
        except ValueError as e:
            raise InvalidConfigError(f"{ENV_THREADS} must be an integer, got '{env}'") from e
        if value < 1:
            raise InvalidConfigError(f"{ENV_THREADS} must be >= 1")
        return value
    return 1


@dataclass
class SweepConfig:
    """
    One sweep: the grid of (n, seed, method) measurements and their settings.

    Power is either ``gamma`` (P = n^-gamma) or ``P_list`` (one value, or one
    per n); with neither, P = 1.
    """

    n_list: List[int]
    seeds: List[int]
    methods: List[str]
    version: int = CONFIG_VERSION
    gamma: Optional[float] = None
    P_list: Optional[List[float]] = None
    scheme: Dict[str, Any] = field(default_factory=dict)
    tolerance: float = DEFAULT_TOLERANCE
    epsilon: float = DEFAULT_EPSILON
    recursion_depth: int = 2
    far_blocks: str = FAR_BLOCKS_FORMULA
    block_constant: float = BLOCK_CONSTANT_C
    block_exponent: float = 0.5
    output_dir: Optional[str] = None
    threads: Optional[int] = None
    record_wall_time: bool = True

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise InvalidConfigError(f"unsupported config version {self.version}")
        if not self.n_list:
            raise InvalidConfigError("n_list must not be empty")
        if not self.seeds:
            raise InvalidConfigError("seeds must not be empty")
        if not self.methods:
            raise InvalidConfigError("methods must not be empty")
        for n in self.n_list:
            if int(n) != n or n < MIN_NODES:
                raise InvalidConfigError(f"every n must be an integer >= {MIN_NODES}, got {n}")
        if len(set(self.n_list)) != len(self.n_list):
            raise InvalidConfigError("n_list has duplicates")
        if len(set(self.seeds)) != len(self.seeds):
            raise InvalidConfigError("seeds has duplicates")
        unknown = [m for m in self.methods if not is_known_method(m)]
        if unknown:
            raise InvalidConfigError(f"unknown methods: {', '.join(unknown)}")
        if any(m in (METHOD_SCHEME_RATE, METHOD_SCHEME_GAIN) for m in self.methods):
            small = [n for n in self.n_list if n < MIN_SCHEME_N]
            if small:
                raise InvalidConfigError(
                    f"scheme methods need n >= {MIN_SCHEME_N}, got {small}")
        if self.gamma is not None and self.P_list is not None:
            raise InvalidConfigError("give either gamma or P_list, not both")
        if self.P_list is not None:
            if len(self.P_list) not in (1, len(self.n_list)):
                raise InvalidConfigError("P_list needs one value or one per n")
            if any(not p > 0 for p in self.P_list):
                raise InvalidConfigError("every P must be positive")
        bad_scheme = set(self.scheme) - set(SCHEME_KEYS)
        if bad_scheme:
            raise InvalidConfigError(f"unknown scheme keys: {', '.join(sorted(bad_scheme))}")
        if self.far_blocks not in (FAR_BLOCKS_FORMULA, FAR_BLOCKS_MEASURED):
            raise InvalidConfigError(f"far_blocks must be '{FAR_BLOCKS_FORMULA}' or "
                                     f"'{FAR_BLOCKS_MEASURED}'")
        if not self.tolerance > 0 or not self.epsilon > 0:
            raise InvalidConfigError("tolerance and epsilon must be positive")
        if self.recursion_depth < 0:
            raise InvalidConfigError("recursion_depth must be non-negative")
        if not 0 < self.block_exponent < 1:
            raise InvalidConfigError("block_exponent must lie in (0, 1)")
        if self.threads is not None and self.threads < 1:
            raise InvalidConfigError("threads must be >= 1")

    def power_for(self, n: int) -> float:
        if self.gamma is not None:
            return float(n) ** (-self.gamma)
        if self.P_list is not None:
            if len(self.P_list) == 1:
                return float(self.P_list[0])
            return float(self.P_list[self.n_list.index(n)])
        return 1.0

    def resolved_output_dir(self, override: Optional[Path] = None) -> Path:
        """CLI flag > config file > environment > default."""
        if override is not None:
            return Path(override)
        if self.output_dir:
            return Path(self.output_dir).expanduser()
        return default_output_dir()

    def resolved_threads(self, override: Optional[int] = None) -> int:
        if override is not None:
            return override
        if self.threads is not None:
            return self.threads
        return default_threads()

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['n_list'] = [int(n) for n in self.n_list]
        data['seeds'] = [int(s) for s in self.seeds]
        return data

    def measurement_dict(self) -> Dict[str, Any]:
        """Settings that change measured values; where and how fast they run is excluded."""
        data = self.to_dict()
        for key in ('output_dir', 'threads'):
            data.pop(key)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SweepConfig':
        """
        Build a config from parsed JSON.

        Raises:
            InvalidConfigError: On unknown or missing keys, or invalid values
        """
        if not isinstance(data, dict):
            raise InvalidConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**data)
        except TypeError as e:
            raise InvalidConfigError(f"incomplete config: {e}") from e


@dataclass(frozen=True)
class SweepRow:
    """One (n, seed, method) measurement."""

    n: int
    seed: int
    method: str
    value: float
    wall_time_ms: float
    status: str

    @property
    def key(self) -> Tuple[int, int, str]:
        return self.n, self.seed, self.method

    def to_fields(self) -> List[str]:
        return [str(self.n), str(self.seed), self.method, repr(float(self.value)),
                f"{self.wall_time_ms:.3f}", self.status]

    @classmethod
    def from_fields(cls, values: List[str]) -> 'SweepRow':
        n, seed, method, value, wall, status = values
        return cls(int(n), int(seed), method, float(value), float(wall), status)


def sort_rows(rows: Iterable[SweepRow], methods: List[str]) -> List[SweepRow]:
    """Deterministic order: n, then seed, then method in config order."""
    order = {m: i for i, m in enumerate(methods)}
    return sorted(rows, key=lambda r: (r.n, r.seed, order.get(r.method, len(order)), r.method))


class SweepManager:
    """Handles the config snapshot and the incremental sweep CSV of one output directory."""

    def __init__(self, output_dir: Path):
        """
        Initialize sweep manager.

        Args:
            output_dir: Directory holding config.json and sweep.csv
        """
        self.output_dir = Path(output_dir)
        self.csv_file = self.output_dir / SWEEP_CSV_NAME
        self.config_file = self.output_dir / CONFIG_SNAPSHOT_NAME

    @staticmethod
    def load_config(path: Path) -> SweepConfig:
        """
        Load a sweep config from a JSON file.

        Raises:
            InvalidConfigError: If the file is missing, not JSON or invalid
        """
        path = Path(path)
        try:
            with open(path, 'r') as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise InvalidConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise InvalidConfigError(f"config file {path} is not valid JSON: {e}") from e
        return SweepConfig.from_dict(data)

    @staticmethod
    def dump_config(config: SweepConfig, path: Path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w') as f:
                json.dump(config.to_dict(), f, indent=2, sort_keys=True)
                f.write('\n')
        except OSError as e:
            raise ReportWriteError(f"cannot write {path}: {e}") from e
        return path

    def prepare(self, config: SweepConfig) -> None:
        """
        Bind the directory to a config, refusing to resume a different sweep.

        Raises:
            InvalidConfigError: If the directory holds a sweep of another config
        """
        if self.config_file.exists():
            previous = self.load_config(self.config_file).measurement_dict()
            if previous != config.measurement_dict():
                raise InvalidConfigError(
                    f"{self.output_dir} holds a sweep with a different config; "
                    f"use another --out directory")
        else:
            self.dump_config(config, self.config_file)

    def load_rows(self) -> List[SweepRow]:
        """Rows already on disk; a torn trailing line from a crash is dropped."""
        if not self.csv_file.exists():
            return []
        text = self.csv_file.read_text()
        if text and not text.endswith('\n'):
            logger.warning("dropping incomplete last line of %s", self.csv_file)
            text = text[:text.rfind('\n') + 1]
            self.csv_file.write_text(text)
        reader = csv.reader(text.splitlines())
        header = next(reader, None)
        if header is None:
            return []
        if ','.join(header) != SWEEP_CSV_HEADER:
            raise InvalidConfigError(f"{self.csv_file} has an unexpected header")
        return [SweepRow.from_fields(values) for values in reader if values]

    def completed_keys(self) -> Set[Tuple[int, int, str]]:
        return {row.key for row in self.load_rows()}

    def append_rows(self, rows: List[SweepRow]) -> None:
        """Append rows, writing the header first if the file is new."""
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            new_file = not self.csv_file.exists() or self.csv_file.stat().st_size == 0
            with open(self.csv_file, 'a', newline='') as f:
                writer = csv.writer(f, lineterminator='\n')
                if new_file:
                    writer.writerow(SWEEP_CSV_HEADER.split(','))
                for row in rows:
                    writer.writerow(row.to_fields())
        except OSError as e:
            raise ReportWriteError(f"cannot write {self.csv_file}: {e}") from e
