"""Seed sweeps, scaling-exponent fits and report files."""

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import linregress

from constants import (
    BOUND_CSV_HEADER,
    DENSE_MATRIX_LIMIT,
    FIT_CSV_HEADER,
    FIT_CSV_NAME,
    METHOD_CAPACITY_BOUND,
    METHOD_GERSHGORIN_BLOCK,
    METHOD_GERSHGORIN_M1,
    METHOD_POWER_ITER,
    METHOD_RECURSIVE,
    METHOD_SCHEME_GAIN,
    METHOD_SCHEME_RATE,
    METHOD_TDMA_RATE,
    METHOD_THEOREM1_RATE,
    MOMENT_DENSE_LIMIT,
    REPORT_SVG_NAME,
    SLOPE_THRESHOLDS,
    STATUS_FAILED,
    STATUS_INFEASIBLE,
    STATUS_OK,
    STATUS_SKIPPED,
    SWEEP_CSV_HEADER,
    SWEEP_CSV_NAME
)
from errors import BroadcastError, InvalidArgumentError, LayoutInfeasibleError, ReportWriteError
from beamforming import SchemeParams, measure_scheme_rate
from capacity import capacity_upper_bound, tdma_baseline_rate, theorem1_predicted_rate
from network_model import (
    NetworkConfig,
    build_channel_matrix,
    channel_operator,
    partition_grid,
    place_nodes
)
from spectral import (
    BlockPartition,
    block_gershgorin_bound,
    recursive_norm_bound,
    row_sum_bound,
    spectral_norm,
    trace_moment
)
from sweep_manager import (
    SweepConfig,
    SweepManager,
    SweepRow,
    is_norm_method,
    moment_order,
    sort_rows
)

logger = logging.getLogger(__name__)

FIT_OK = 'ok'
FIT_PASS = 'pass'
FIT_FAIL = 'fail'
FIT_INSUFFICIENT = 'insufficient'

SVG_COLORS = ['#007AFF', '#34C759', '#FF9500', '#AF52DE', '#FF3B30', '#5AC8FA', '#8E8E93',
              '#FFCC00', '#5856D6', '#A2845E']


@dataclass(frozen=True)
class FitResult:
    """Least-squares line through (log n, log seed-averaged metric)."""

    method: str
    slope: float
    intercept: float
    stderr: float
    points: int
    excluded: int
    status: str

    def to_fields(self) -> List[str]:
        return [self.method, repr(self.slope), repr(self.intercept), repr(self.stderr),
                str(self.points), str(self.excluded), self.status]


@dataclass(frozen=True)
class ScalingReport:
    """All rows of a sweep and one fit per method."""

    rows: Tuple[SweepRow, ...]
    fits: Tuple[FitResult, ...]
    methods: Tuple[str, ...]

    @property
    def passed(self) -> bool:
        """No fitted slope misses its acceptance window."""
        return all(fit.status != FIT_FAIL for fit in self.fits)

    def fit_for(self, method: str) -> Optional[FitResult]:
        for fit in self.fits:
            if fit.method == method:
                return fit
        return None

    def failed_rows(self) -> List[SweepRow]:
        return [row for row in self.rows if row.status != STATUS_OK]


class _Instance:
    """Lazily built placement, matrix and norm of one (n, seed) network."""

    def __init__(self, config: SweepConfig, n: int, seed: int):
        self.sweep = config
        self.network = NetworkConfig(n, power_per_node=config.power_for(n), seed=seed)
        self.placement = place_nodes(self.network)
        self._matrix = None
        self._norm = None

    @property
    def dense(self) -> bool:
        return self.network.n <= DENSE_MATRIX_LIMIT

    @property
    def matrix(self):
        if self._matrix is None:
            if self.dense:
                self._matrix = build_channel_matrix(self.placement)
            else:
                self._matrix = channel_operator(self.placement)
        return self._matrix

    @property
    def norm(self) -> float:
        if self._norm is None:
            self._norm = spectral_norm(self.matrix, self.sweep.tolerance).value
        return self._norm


def scheme_params_for(config: SweepConfig) -> SchemeParams:
    """Scheme parameters of a sweep; epsilon defaults to the sweep's."""
    values = dict(config.scheme)
    values.setdefault('epsilon', config.epsilon)
    return SchemeParams(**values)


def _measure(instance: _Instance, method: str, scheme_cache: Dict[str, float]) -> Tuple[float, str]:
    config = instance.sweep
    n = instance.network.n
    P = instance.network.P

    if method == METHOD_POWER_ITER:
        return instance.norm, STATUS_OK
    if method == METHOD_CAPACITY_BOUND:
        return capacity_upper_bound(P, instance.norm), STATUS_OK
    if method == METHOD_TDMA_RATE:
        return tdma_baseline_rate(instance.network, instance.placement), STATUS_OK
    if method == METHOD_THEOREM1_RATE:
        return theorem1_predicted_rate(n, P, config.epsilon), STATUS_OK
    if method in (METHOD_SCHEME_RATE, METHOD_SCHEME_GAIN):
        if 'rate' not in scheme_cache:
            params = scheme_params_for(config)
            scheme_cache['rate'] = measure_scheme_rate(instance.network, params,
                                                       instance.placement).scheme_rate
        rate = scheme_cache['rate']
        return (rate if method == METHOD_SCHEME_RATE else rate / P), STATUS_OK

    order = moment_order(method)
    if order is not None:
        if n > MOMENT_DENSE_LIMIT:
            return math.nan, STATUS_SKIPPED
        # Tr((H H^dagger)^l)^(1/l) >= ||H||^2, so its square root bounds the norm
        return math.sqrt(trace_moment(instance.matrix.entries, order).root_value), STATUS_OK

    if not instance.dense:
        return math.nan, STATUS_SKIPPED
    if method == METHOD_GERSHGORIN_M1:
        return row_sum_bound(instance.matrix), STATUS_OK
    if method == METHOD_GERSHGORIN_BLOCK:
        side = math.sqrt(n ** config.block_exponent)
        partition = BlockPartition.from_layout(partition_grid(instance.placement, side))
        return block_gershgorin_bound(instance.matrix, partition, config.tolerance), STATUS_OK
    if method == METHOD_RECURSIVE:
        value, _ = recursive_norm_bound(instance.matrix, instance.placement,
                                        config.recursion_depth, config.epsilon,
                                        config.block_constant, config.far_blocks,
                                        config.tolerance)
        return value, STATUS_OK
    raise InvalidArgumentError(f"unknown method '{method}'")


def measure_instance(config: SweepConfig, n: int, seed: int,
                     methods: Optional[Sequence[str]] = None) -> List[SweepRow]:
    """
    Run the requested methods on one network instance.

    Failures never abort the sweep: an infeasible scheme layout yields status
    'infeasible', any other library error 'failed', both with value NaN.
    """
    methods = list(methods or config.methods)
    instance = _Instance(config, n, seed)
    scheme_cache: Dict[str, float] = {}
    rows = []
    for method in methods:
        start = time.perf_counter()
        try:
            value, status = _measure(instance, method, scheme_cache)
        except LayoutInfeasibleError as e:
            logger.warning("n=%d seed=%d %s: %s", n, seed, method, e)
            value, status = math.nan, STATUS_INFEASIBLE
        except BroadcastError as e:
            logger.warning("n=%d seed=%d %s failed: %s", n, seed, method, e)
            value, status = math.nan, STATUS_FAILED
        elapsed = (time.perf_counter() - start) * 1000 if config.record_wall_time else 0.0
        rows.append(SweepRow(n, seed, method, float(value), elapsed, status))
        logger.debug("n=%d seed=%d %s = %.6g (%s)", n, seed, method, value, status)
    return rows


def run_sweep(config: SweepConfig, manager: Optional[SweepManager] = None,
              threads: int = 1) -> ScalingReport:
    """
    Execute every (n, seed, method) measurement of the config.

    (n, seed) instances are spread over a thread pool; rows of one n are
    written in sorted order once all its seeds are done, so a killed sweep
    restarted on the same directory finishes with the same CSV.

    Args:
        config: Sweep grid and settings
        manager: Persistence target; rows already on disk are skipped
        threads: Worker threads

    Returns:
        ScalingReport over all rows (including ones from earlier runs)

    Raises:
        InvalidConfigError: If the config is invalid or the directory holds another sweep
    """
    if not config.methods:
        raise InvalidArgumentError("methods must not be empty")
    done = set()
    if manager is not None:
        manager.prepare(config)
        done = manager.completed_keys()

    collected: List[SweepRow] = []
    for n in sorted(config.n_list):
        pending = [seed for seed in config.seeds
                   if any((n, seed, method) not in done for method in config.methods)]
        if not pending:
            logger.info("n=%d already complete", n)
            continue

        def task(seed: int, n: int = n) -> List[SweepRow]:
            missing = [m for m in config.methods if (n, seed, m) not in done]
            return measure_instance(config, n, seed, missing)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                batches = list(pool.map(task, pending))
        else:
            batches = [task(seed) for seed in pending]

        rows = sort_rows([row for batch in batches for row in batch], config.methods)
        collected.extend(rows)
        if manager is not None:
            manager.append_rows(rows)
        logger.info("n=%d: %d rows", n, len(rows))

    rows = manager.load_rows() if manager is not None else collected
    rows = sort_rows(rows, config.methods)
    fits = tuple(fit_method(rows, method) for method in config.methods)
    return ScalingReport(tuple(rows), fits, tuple(config.methods))


def seed_averaged(rows: Iterable[SweepRow], method: str,
                  squared: Optional[bool] = None) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Per-n mean of a method's metric over seeds.

    Norm methods are averaged as value^2. Non-positive or non-finite values
    are left out and counted.

    Returns:
        (n values, means, excluded row count)
    """
    if squared is None:
        squared = is_norm_method(method)
    grouped: Dict[int, List[float]] = {}
    excluded = 0
    for row in rows:
        if row.method != method or row.status != STATUS_OK:
            continue
        if not math.isfinite(row.value) or row.value <= 0:
            excluded += 1
            continue
        grouped.setdefault(row.n, []).append(row.value ** 2 if squared else row.value)
    ns = np.array(sorted(grouped), dtype=float)
    means = np.array([np.mean(grouped[int(n)]) for n in ns])
    return ns, means, excluded


def fit_scaling_exponent(rows: Iterable[SweepRow], method: str,
                         squared: Optional[bool] = None) -> FitResult:
    """
    Slope of log(seed-averaged metric) against log(n).

    Args:
        rows: Sweep rows (other methods are ignored)
        method: Method whose metric is fitted
        squared: Fit value^2 (default: for norm methods)

    Returns:
        FitResult with slope, intercept and the slope's standard error

    Raises:
        InvalidArgumentError: With fewer than 3 distinct n
    """
    ns, means, excluded = seed_averaged(rows, method, squared)
    if excluded:
        logger.warning("%s: excluded %d non-positive values from the fit", method, excluded)
    if len(ns) < 3:
        raise InvalidArgumentError(f"{method}: need at least 3 distinct n, got {len(ns)}")
    fit = linregress(np.log(ns), np.log(means))
    status = FIT_OK
    if method in SLOPE_THRESHOLDS:
        low, high = SLOPE_THRESHOLDS[method]
        status = FIT_PASS if low <= fit.slope <= high else FIT_FAIL
    return FitResult(method, float(fit.slope), float(fit.intercept), float(fit.stderr),
                     len(ns), excluded, status)


def fit_method(rows: Sequence[SweepRow], method: str) -> FitResult:
    """fit_scaling_exponent that reports too few points as a status instead of raising."""
    try:
        return fit_scaling_exponent(rows, method)
    except InvalidArgumentError:
        _, means, excluded = seed_averaged(rows, method)
        return FitResult(method, math.nan, math.nan, math.nan, len(means), excluded,
                         FIT_INSUFFICIENT)


def _write_csv(path: Path, header: str, records: Iterable[List[str]]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(header.split(','))
            for record in records:
                writer.writerow(record)
    except OSError as e:
        raise ReportWriteError(f"cannot write {path}: {e}") from e
    return path


def write_bound_csv(rows: Iterable[SweepRow], path: Path) -> Path:
    """Bound report without the status column."""
    return _write_csv(Path(path), BOUND_CSV_HEADER, (row.to_fields()[:5] for row in rows))


def render_svg(report: ScalingReport) -> str:
    """Log-log scatter of seed-averaged metrics, one polyline per method."""
    series = []
    for method in report.methods:
        ns, means, _ = seed_averaged(report.rows, method)
        if len(ns):
            series.append((method, np.log10(ns), np.log10(means)))

    width, height = 900, 560
    margin = {"top": 50, "right": 220, "bottom": 60, "left": 70}
    chart_width = width - margin["left"] - margin["right"]
    chart_height = height - margin["top"] - margin["bottom"]

    svg = f'<svg width="{width}" height="{height}" xmlns="http://www.w3.org/2000/svg">\n'
    svg += f'  <text x="{width / 2}" y="25" text-anchor="middle" font-size="18" ' \
           f'font-weight="bold">Scaling with n (log-log)</text>\n'
    if not series:
        return svg + '</svg>\n'

    x_all = np.concatenate([x for _, x, _ in series])
    y_all = np.concatenate([y for _, _, y in series])
    x_low, x_high = float(x_all.min()), float(x_all.max())
    y_low, y_high = float(y_all.min()), float(y_all.max())
    x_span = x_high - x_low or 1.0
    y_span = y_high - y_low or 1.0

    def to_x(value: float) -> float:
        return margin["left"] + (value - x_low) / x_span * chart_width

    def to_y(value: float) -> float:
        return height - margin["bottom"] - (value - y_low) / y_span * chart_height

    svg += f'  <line x1="{margin["left"]}" y1="{height - margin["bottom"]}" ' \
           f'x2="{width - margin["right"]}" y2="{height - margin["bottom"]}" stroke="#333"/>\n'
    svg += f'  <line x1="{margin["left"]}" y1="{margin["top"]}" x2="{margin["left"]}" ' \
           f'y2="{height - margin["bottom"]}" stroke="#333"/>\n'
    svg += f'  <text x="{margin["left"] + chart_width / 2}" y="{height - 20}" ' \
           f'text-anchor="middle" font-size="13">log10 n</text>\n'

    for index, (method, xs, ys) in enumerate(series):
        color = SVG_COLORS[index % len(SVG_COLORS)]
        points = ' '.join(f'{to_x(x):.2f},{to_y(y):.2f}' for x, y in zip(xs, ys))
        svg += f'  <polyline points="{points}" fill="none" stroke="{color}" stroke-width="2"/>\n'
        for x, y in zip(xs, ys):
            svg += f'  <circle cx="{to_x(x):.2f}" cy="{to_y(y):.2f}" r="4" fill="{color}"/>\n'

        fit = report.fit_for(method)
        label = method
        if fit is not None and math.isfinite(fit.slope):
            label += f' (slope {fit.slope:.3f})'
        legend_y = margin["top"] + 20 * index
        legend_x = width - margin["right"] + 15
        svg += f'  <line x1="{legend_x}" y1="{legend_y}" x2="{legend_x + 25}" ' \
               f'y2="{legend_y}" stroke="{color}" stroke-width="3"/>\n'
        svg += f'  <text x="{legend_x + 32}" y="{legend_y + 4}" font-size="12">{label}</text>\n'

    svg += '</svg>\n'
    return svg


def emit_report(report: ScalingReport, output_dir: Path,
                formats: Sequence[str] = ('csv', 'svg')) -> List[Path]:
    """
    Write sweep.csv and fits.csv, plus report.svg when 'svg' is requested.

    Raises:
        ReportWriteError: If a file cannot be written
        InvalidArgumentError: On an unknown format
    """
    unknown = set(formats) - {'csv', 'svg'}
    if unknown:
        raise InvalidArgumentError(f"unknown report formats: {', '.join(sorted(unknown))}")
    output_dir = Path(output_dir)
    written = [
        _write_csv(output_dir / SWEEP_CSV_NAME, SWEEP_CSV_HEADER,
                   (row.to_fields() for row in report.rows)),
        _write_csv(output_dir / FIT_CSV_NAME, FIT_CSV_HEADER,
                   (fit.to_fields() for fit in report.fits))
    ]
    if 'svg' in formats:
        path = output_dir / REPORT_SVG_NAME
        try:
            path.write_text(render_svg(report))
        except OSError as e:
            raise ReportWriteError(f"cannot write {path}: {e}") from e
        written.append(path)
    logger.info("report written to %s", output_dir)
    return written


def report_from_rows(rows: Sequence[SweepRow], methods: Optional[Sequence[str]] = None) -> ScalingReport:
    """Rebuild a report (with fits) from stored rows."""
    if methods is None:
        methods = list(dict.fromkeys(row.method for row in rows))
    rows = sort_rows(rows, list(methods))
    return ScalingReport(tuple(rows), tuple(fit_method(rows, m) for m in methods), tuple(methods))
