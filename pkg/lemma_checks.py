"""Numerical checks of the scaling, bound and scheme properties."""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from constants import (
    BLOCK_CALIBRATION_PERCENTILE,
    DEFAULT_EPSILON,
    DEFAULT_TOLERANCE,
    EXPONENT_HIGH,
    EXPONENT_LOW,
    FIXED_POINT_MAX_STEPS,
    FIXED_POINT_TOLERANCE,
    GAIN_CONSTANT_K1,
    INTERFERENCE_BOUND_MIN_FRACTION,
    INTERFERENCE_CALIBRATION_PERCENTILE,
    INTERFERENCE_CONSTANT_K2,
    METHOD_POWER_ITER,
    METHOD_SCHEME_GAIN,
    SCHEME_MIN_DECODABLE,
    SCHEME_TDMA_MIN_RATIO,
    SOUNDNESS_TOLERANCE
)
from errors import InvalidArgumentError
from beamforming import (
    SchemeParams,
    build_pair_layout,
    gain_samples,
    interference_samples,
    interference_to_signal_ratio,
    measure_scheme_rate
)
from capacity import RateReport, capacity_upper_bound, tdma_baseline_rate
from experiments import fit_scaling_exponent, run_sweep
from network_model import (
    NetworkConfig,
    build_channel_matrix,
    channel_operator,
    cluster_pair_points,
    cross_channel,
    occupancy_check,
    partition_grid,
    place_nodes
)
from spectral import (
    BlockPartition,
    block_gershgorin_bound,
    block_law_samples,
    exponent_iterates,
    recursive_norm_bound,
    spectral_norm,
    trace_moment
)
from sweep_manager import SweepConfig, SweepRow

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    summary: str
    metrics: Dict[str, float] = field(default_factory=dict)


def check_spectral_scaling(n_list: Sequence[int] = (256, 512, 1024, 2048, 4096),
                           seeds: int = 10, threads: int = 1) -> CheckResult:
    """Fitted slope of mean ||H||^2 against n lies in [0.4, 0.7]."""
    config = SweepConfig(n_list=list(n_list), seeds=list(range(seeds)),
                         methods=[METHOD_POWER_ITER], record_wall_time=False)
    report = run_sweep(config, threads=threads)
    fit = report.fit_for(METHOD_POWER_ITER)
    passed = fit.status == 'pass'
    return CheckResult('spectral-scaling', passed,
                       f"slope of ||H||^2 = {fit.slope:.3f} +/- {fit.stderr:.3f}",
                       {'slope': fit.slope, 'stderr': fit.stderr})


def check_bound_soundness(n_list: Sequence[int] = (256, 1024), instances: int = 100,
                          depth: int = 2, epsilon: float = DEFAULT_EPSILON) -> CheckResult:
    """Block Gersgorin and recursive bounds dominate ||H|| on every instance."""
    worst = math.inf
    failures = 0
    total = 0
    for n in n_list:
        for seed in range(instances):
            placement = place_nodes(NetworkConfig(n, seed=seed))
            matrix = build_channel_matrix(placement)
            norm = spectral_norm(matrix).value
            partition = BlockPartition.from_layout(partition_grid(placement, n ** 0.25))
            block = block_gershgorin_bound(matrix, partition)
            recursive, _ = recursive_norm_bound(matrix, placement, depth, epsilon)
            floor = norm * (1 - SOUNDNESS_TOLERANCE)
            total += 1
            if block < floor or recursive < floor:
                failures += 1
                logger.warning("bound below norm at n=%d seed=%d", n, seed)
            worst = min(worst, block / norm, recursive / norm)
    return CheckResult('bound-soundness', failures == 0,
                       f"{total - failures}/{total} instances sound, worst ratio {worst:.4f}",
                       {'failures': failures, 'worst_ratio': worst})


def check_exponent_recursion() -> CheckResult:
    """Iterates from 1/2 are 3/8 and 9/28 and reach 1/4 within 60 steps."""
    iterates = exponent_iterates(EXPONENT_HIGH)
    exact = [Fraction(1, 2)]
    for _ in range(2):
        b = exact[-1]
        exact.append(3 * b / (4 * b + 2))
    values_ok = all(abs(iterates[i] - float(exact[i])) <= 1e-12 for i in range(3))
    steps = len(iterates) - 1
    converged = abs(iterates[-1] - EXPONENT_LOW) < FIXED_POINT_TOLERANCE
    passed = values_ok and exact[1] == Fraction(3, 8) and exact[2] == Fraction(9, 28) \
        and converged and steps <= FIXED_POINT_MAX_STEPS
    return CheckResult('exponent-recursion', passed,
                       f"b1={iterates[1]:.12f} b2={iterates[2]:.12f}, "
                       f"within 1e-6 of 1/4 after {steps} steps",
                       {'steps': steps})


def check_block_law(M_list: Sequence[int] = (64, 256, 1024), seeds: int = 100,
                    epsilon: float = DEFAULT_EPSILON, reference_M: int = 256) -> CheckResult:
    """99th percentile of ||F||^2 d / M^(1+eps) at d = 3 sqrt(M) stays within 2x of M = 256."""
    percentiles = {}
    for M in sorted(set(M_list) | {reference_M}):
        samples = block_law_samples(M, 3 * math.sqrt(M), seeds, epsilon, seed=M)
        percentiles[M] = float(np.percentile(samples, BLOCK_CALIBRATION_PERCENTILE,
                                             method='higher'))
    reference = percentiles[reference_M]
    ratios = {M: percentiles[M] / reference for M in M_list}
    passed = all(0.5 <= r <= 2.0 for r in ratios.values())
    text = ', '.join(f"M={M}: {percentiles[M]:.3f}" for M in M_list)
    return CheckResult('block-law', passed, f"p99 {text}",
                       {f'p99_M{M}': percentiles[M] for M in M_list})


def check_trace_moments(M: int = 64, blocks: int = 20, orders: Sequence[int] = (1, 2, 3, 4),
                        seed: int = 0) -> CheckResult:
    """Tr(FF^dagger) equals sum 1/r^2, roots decrease in l and stay above ||F||^2."""
    failures = []
    d = 3 * math.sqrt(M)
    for trial in range(blocks):
        points_a, points_b = cluster_pair_points(M, d, seed, trial)
        F = cross_channel(points_b, points_a)
        direct = float(np.sum(1.0 / cdist(points_b, points_a) ** 2))
        first = trace_moment(F, 1).trace_value
        if abs(first - direct) > 1e-10 * direct:
            failures.append(f"trace mismatch in block {trial}")
        roots = [trace_moment(F, ell).root_value for ell in orders]
        if any(later > earlier * (1 + 1e-12) for earlier, later in zip(roots, roots[1:])):
            failures.append(f"roots increase in block {trial}")
        norm_sq = spectral_norm(F, DEFAULT_TOLERANCE).value ** 2
        if roots[-1] < norm_sq * (1 - SOUNDNESS_TOLERANCE):
            failures.append(f"root below ||F||^2 in block {trial}")
    return CheckResult('trace-moments', not failures,
                       failures[0] if failures else f"{blocks} blocks consistent",
                       {'failures': len(failures)})


def check_beamforming_gain(M: int = 64, d: float = 64.0, c1: float = 2.0,
                           seeds: int = 100) -> CheckResult:
    """Compensated gain reaches K1 M/d on 95% of seeds and beats raw phases 5x."""
    compensated = gain_samples(M, d, c1, seeds)
    raw = gain_samples(M, d, c1, seeds, compensate=False)
    fraction = float(np.mean(compensated >= GAIN_CONSTANT_K1))
    ratio = float(compensated.mean() / raw.mean())
    passed = fraction >= 0.95 and ratio >= 5
    return CheckResult('beamforming-gain', passed,
                       f"{100 * fraction:.0f}% above K1, compensation gain {ratio:.1f}x",
                       {'fraction': fraction, 'ratio': ratio})


def check_interference(n_list: Sequence[int] = (2 ** 12, 2 ** 14, 2 ** 16), seeds: int = 100,
                       params: Optional[SchemeParams] = None) -> CheckResult:
    """
    Normalized interference percentile does not grow with n, and at the
    largest n at least 98% of receivers satisfy |I| <= K2 M log n / (d n^eps).
    The interference-to-signal power ratio of one instance per n is reported.
    """
    params = params or SchemeParams()
    pooled = {n: interference_samples(n, params, seeds) for n in n_list}
    percentiles = [float(np.percentile(pooled[n], INTERFERENCE_CALIBRATION_PERCENTILE,
                                       method='higher'))
                   for n in n_list]
    monotone = all(later <= earlier * (1 + 1e-12)
                   for earlier, later in zip(percentiles, percentiles[1:]))
    largest = max(n_list)
    within = float(np.mean(pooled[largest] <= INTERFERENCE_CONSTANT_K2))
    passed = monotone and within >= INTERFERENCE_BOUND_MIN_FRACTION
    text = ', '.join(f"n={n}: {p:.4f}" for n, p in zip(n_list, percentiles))
    metrics = {f'p99_n{n}': p for n, p in zip(n_list, percentiles)}
    metrics['within_k2'] = within
    for n in n_list:
        config = NetworkConfig(n)
        placement = place_nodes(config)
        layout = build_pair_layout(config, params, placement)
        metrics[f'isr_n{n}'] = interference_to_signal_ratio(layout, placement)
    return CheckResult('interference', passed,
                       f"p99 {text}; {100 * within:.1f}% within K2 at n={largest}", metrics)


def check_scheme(n_list: Sequence[int] = (2 ** 12, 2 ** 14, 2 ** 16), seeds: int = 5,
                 params: Optional[SchemeParams] = None, gamma: float = 1.0) -> CheckResult:
    """
    Scheme gain slope >= 0.3, at least 90% of sources decodable on 90% of
    seeds, noise <= 4(t+1), and the rate at the largest n at least
    SCHEME_TDMA_MIN_RATIO times the TDMA rate.
    """
    params = params or SchemeParams()
    rows = []
    decodable_seeds = 0
    noise_ok = True
    largest = max(n_list)
    ratios = []
    for n in n_list:
        for seed in range(seeds):
            config = NetworkConfig(n, gamma=gamma, seed=seed)
            placement = place_nodes(config)
            measurement = measure_scheme_rate(config, params, placement)
            rows.append(SweepRow(n, seed, METHOD_SCHEME_GAIN,
                                 measurement.scheme_rate / config.P, 0.0, 'ok'))
            decodable_seeds += measurement.decodable_fraction >= SCHEME_MIN_DECODABLE
            noise_ok &= measurement.noise_ok
            if n == largest:
                tdma = tdma_baseline_rate(config, placement)
                ratios.append(measurement.scheme_rate / tdma if tdma > 0 else math.inf)
    fit = fit_scaling_exponent(rows, METHOD_SCHEME_GAIN)
    fraction = decodable_seeds / (len(n_list) * seeds)
    ratio = float(np.mean(ratios))
    passed = fit.status == 'pass' and fraction >= SCHEME_MIN_DECODABLE and noise_ok \
        and ratio >= SCHEME_TDMA_MIN_RATIO
    return CheckResult('scheme', passed,
                       f"gain slope {fit.slope:.3f}, decodable on {100 * fraction:.0f}% "
                       f"of seeds, noise bound {'held' if noise_ok else 'violated'}, "
                       f"scheme/TDMA {ratio:.3g} at n={largest}",
                       {'slope': fit.slope, 'decodable_fraction': fraction,
                        'tdma_ratio': ratio})


def check_sandwich(n_list: Sequence[int] = (1024, 4096, 16384), seeds: int = 3,
                   params: Optional[SchemeParams] = None, gamma: float = 1.0) -> CheckResult:
    """Scheme and TDMA stay below P ||H||^2; the scheme/TDMA ratio grows with n."""
    params = params or SchemeParams()
    violations = 0
    ratios = []
    for n in n_list:
        per_seed = []
        for seed in range(seeds):
            config = NetworkConfig(n, gamma=gamma, seed=seed)
            placement = place_nodes(config)
            matrix = build_channel_matrix(placement) if n <= 4096 else channel_operator(placement)
            bound = capacity_upper_bound(config.P, spectral_norm(matrix))
            measurement = measure_scheme_rate(config, params, placement)
            report = RateReport(n, config.P, bound, tdma_baseline_rate(config, placement),
                                measurement.scheme_rate, measurement.optimistic_rate)
            violations += not report.sandwich_holds()
            per_seed.append(report.gain_over_tdma)
        ratios.append(float(np.mean(per_seed)))
    increasing = all(later > earlier for earlier, later in zip(ratios, ratios[1:]))
    text = ', '.join(f"n={n}: {r:.3g}" for n, r in zip(n_list, ratios))
    return CheckResult('sandwich', violations == 0 and increasing,
                       f"{violations} violations; scheme/TDMA {text}",
                       {'violations': violations})


def check_occupancy(n: int = 4096, M: int = 64, delta: float = 0.5,
                    trials: int = 1000) -> CheckResult:
    """Each tail's frequency within its own union bound plus 3 sigma."""
    report = occupancy_check(NetworkConfig(n), M, delta, trials)
    return CheckResult('occupancy', report.within_bound(),
                       f"upper {report.upper_frequency:.4f} vs {report.bound:.4f}, "
                       f"lower {report.lower_frequency:.4f} vs {report.lower_bound:.4f}",
                       {'upper_frequency': report.upper_frequency, 'bound': report.bound,
                        'lower_frequency': report.lower_frequency,
                        'lower_bound': report.lower_bound})


CHECKS: Dict[str, Callable[..., CheckResult]] = {
    'spectral-scaling': check_spectral_scaling,
    'bound-soundness': check_bound_soundness,
    'exponent-recursion': check_exponent_recursion,
    'block-law': check_block_law,
    'trace-moments': check_trace_moments,
    'beamforming-gain': check_beamforming_gain,
    'interference': check_interference,
    'scheme': check_scheme,
    'sandwich': check_sandwich,
    'occupancy': check_occupancy
}

# Reduced sizes for a fast smoke pass
QUICK_ARGS: Dict[str, Dict] = {
    'spectral-scaling': {'n_list': (256, 512, 1024), 'seeds': 3},
    'bound-soundness': {'n_list': (256,), 'instances': 5},
    'block-law': {'M_list': (64, 256), 'seeds': 20},
    'trace-moments': {'blocks': 5},
    'beamforming-gain': {'seeds': 40},
    'interference': {'n_list': (2 ** 12, 2 ** 14), 'seeds': 10},
    'scheme': {'n_list': (2 ** 10, 2 ** 11, 2 ** 12), 'seeds': 2},
    'sandwich': {'n_list': (1024, 4096), 'seeds': 1},
    'occupancy': {'trials': 200}
}


def run_checks(names: Optional[Sequence[str]] = None, quick: bool = False) -> List[CheckResult]:
    """
    Run the named checks (all by default) in a fixed order.

    Raises:
        InvalidArgumentError: On an unknown check name
    """
    names = list(names or CHECKS)
    unknown = [name for name in names if name not in CHECKS]
    if unknown:
        raise InvalidArgumentError(f"unknown checks: {', '.join(unknown)}")
    results = []
    for name in names:
        kwargs = QUICK_ARGS.get(name, {}) if quick else {}
        logger.info("running check %s", name)
        results.append(CHECKS[name](**kwargs))
    return results
