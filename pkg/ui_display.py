"""User interface display functions - all print statements."""

import math
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

from constants import (
    SEPARATOR_LIGHT, SEPARATOR_MEDIUM, SEPARATOR_HEAVY,
    CHECK_PASSED, CHECK_FAILED
)


def _mark(passed: bool) -> str:
    return CHECK_PASSED if passed else CHECK_FAILED


def _fmt(value: float) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return '-'
    return f"{value:.6g}"


def display_norm_result(n: int, seed: int, value: float, iterations: int,
                        residual: float, upper_bound: float) -> None:
    """Display one spectral norm and the cut-set bound it implies."""
    print(f"n={n:<7} seed={seed:<4} ||H|| = {value:.6f}  ||H||^2 = {value ** 2:.6f}")
    print(f"    {iterations} iterations, residual {residual:.2e}, "
          f"P ||H||^2 = {upper_bound:.6g}")


def display_bounds_table(n: int, seed: int, norm: float,
                         bounds: Sequence[Tuple[str, float, bool]]) -> None:
    """Display the bound methods of one instance next to the exact norm."""
    print(f"\nn={n}, seed={seed}")
    print(SEPARATOR_LIGHT)
    print(f"  {'power_iter':<18} {norm:>12.6f}")
    for method, value, sound in bounds:
        ratio = value / norm if norm and math.isfinite(value) else math.nan
        print(f"  {method:<18} {_fmt(value):>12}  x{_fmt(ratio):<8} {_mark(sound)}")


def display_scheme_summary(n: int, seed: int, P: float, layout_line: str,
                           report, decodable_fraction: float, max_noise: float,
                           noise_limit: float, energy_ok: bool,
                           precondition_ok: bool = True) -> None:
    """Display the rates of one scheme run and the checks on it."""
    print(f"\nBack-and-forth scheme, n={n}, seed={seed}, P={P:.3g}")
    print(SEPARATOR_MEDIUM)
    print(f"Layout: {layout_line}")
    print(f"Cut-set bound P||H||^2:  {report.upper_bound:.6g}")
    print(f"Scheme rate:             {report.scheme_rate:.6g}")
    if report.optimistic_rate is not None:
        print(f"Pipelined (optimistic):  {report.optimistic_rate:.6g}")
    print(f"TDMA baseline:           {report.tdma_rate:.6g}")
    print(f"Gain over TDMA:          {report.gain_over_tdma:.3g}x")
    print(f"  {_mark(report.sandwich_holds())} rates below the cut-set bound")
    print(f"  {_mark(decodable_fraction == 1.0)} decodable on "
          f"{100 * decodable_fraction:.0f}% of sampled sources")
    print(f"  {_mark(max_noise <= noise_limit)} accumulated noise {max_noise:.3g} "
          f"<= {noise_limit:.3g}")
    print(f"  {_mark(energy_ok)} average power within budget")
    print(f"  {_mark(precondition_ok)} phase-1 SNR at least N_C/M for every source")


def display_check_results(results: Iterable) -> None:
    """Display acceptance check outcomes and a final tally."""
    results = list(results)
    print("\nAcceptance checks")
    print(SEPARATOR_HEAVY)
    for result in results:
        print(f"{_mark(result.passed)} {result.name:<20} {result.summary}")
    passed = sum(result.passed for result in results)
    print(SEPARATOR_HEAVY)
    print(f"{passed}/{len(results)} checks passed")


def display_fits(fits: Iterable, title: str = "Scaling exponents") -> None:
    """Display fitted log-log slopes per method."""
    print(f"\n{title}")
    print(SEPARATOR_LIGHT)
    for fit in fits:
        if math.isfinite(fit.slope):
            print(f"  {fit.method:<18} slope {fit.slope:7.4f} +/- {fit.stderr:.4f}"
                  f"  ({fit.points} n values)  {fit.status}")
        else:
            print(f"  {fit.method:<18} {fit.status} ({fit.points} n values)")


def display_sweep_summary(total_rows: int, failed_rows: List, output_dir: Path) -> None:
    """Display row counts of a sweep."""
    print(f"\nSweep rows: {total_rows}")
    if failed_rows:
        print(f"Rows without a value: {len(failed_rows)}")
        for row in failed_rows[:5]:
            print(f"  - n={row.n} seed={row.seed} {row.method}: {row.status}")
        if len(failed_rows) > 5:
            print(f"  ... and {len(failed_rows) - 5} more")
    print(f"Results in: {output_dir}")


def display_calibration(name: str, value: float, reference: Optional[float] = None) -> None:
    """Display one calibrated constant."""
    line = f"  {name:<28} {value:.6g}"
    if reference is not None:
        line += f"  (built-in {reference:.6g})"
    print(line)


def display_written_files(paths: Iterable[Path]) -> None:
    print("\nWritten:")
    for path in paths:
        print(f"  {path}")


def display_error(message: str) -> None:
    """Display a one-line error."""
    print(f"\nERROR: {message}")


def display_interrupted() -> None:
    print("\nInterrupted.")
