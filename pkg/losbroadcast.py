#!/usr/bin/env python3
"""
losbroadcast - LOS broadcast capacity simulator

Builds line-of-sight channel matrices of random networks, bounds their
spectral norm, simulates back-and-forth beamforming and runs seed sweeps
of the resulting scaling laws.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from constants import (
    BLOCK_CONSTANT_C,
    DENSE_MATRIX_LIMIT,
    GAIN_CONSTANT_K1,
    INTERFERENCE_CONSTANT_K2,
    LOG_FORMAT,
    METHOD_GERSHGORIN_BLOCK,
    METHOD_GERSHGORIN_M1,
    METHOD_MOMENT_PREFIX,
    METHOD_POWER_ITER,
    METHOD_RECURSIVE,
    SCHEME_MIN_DECODABLE,
    SOUNDNESS_TOLERANCE,
    STATUS_OK,
    STATUS_SKIPPED
)
from errors import BroadcastError, ConvergenceError, InvalidConfigError

from beamforming import (
    SchemeParams,
    build_pair_layout,
    calibrate_gain_constant,
    calibrate_interference_constant,
    export_trace_csv,
    measure_scheme_rate
)
from capacity import RateReport, capacity_upper_bound, tdma_baseline_rate
from experiments import (
    emit_report,
    measure_instance,
    report_from_rows,
    run_sweep,
    scheme_params_for,
    write_bound_csv
)
from lemma_checks import CHECKS, run_checks
from network_model import (
    NetworkConfig,
    build_channel_matrix,
    channel_operator,
    export_matrix_binary,
    export_placement_csv,
    place_nodes
)
from spectral import calibrate_block_constant, spectral_norm
from sweep_manager import SweepConfig, SweepManager, default_output_dir

from ui_display import (
    display_bounds_table,
    display_calibration,
    display_check_results,
    display_error,
    display_fits,
    display_interrupted,
    display_norm_result,
    display_scheme_summary,
    display_sweep_summary,
    display_written_files
)

logger = logging.getLogger('losbroadcast')

BOUND_METHODS = [METHOD_POWER_ITER, METHOD_GERSHGORIN_M1, METHOD_GERSHGORIN_BLOCK,
                 METHOD_RECURSIVE, f'{METHOD_MOMENT_PREFIX}2']
DEFAULT_SWEEP_N = [256, 512, 1024, 2048, 4096]
DEFAULT_SWEEP_SEEDS = 10
CALIBRATION_TARGETS = ['block', 'gain', 'interference']


def _matrix_for(placement):
    if placement.n <= DENSE_MATRIX_LIMIT:
        return build_channel_matrix(placement)
    return channel_operator(placement)


class BroadcastLab:
    """Main application class - runs the measurements behind every subcommand."""

    def __init__(self, output_dir: Optional[Path] = None, threads: Optional[int] = None):
        """
        Initialize the lab.

        Args:
            output_dir: Where files go (--out); None keeps single runs file-free
            threads: Worker threads (--threads); None defers to config and env
        """
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.threads = threads

    def norm(self, n_list: Sequence[int], seeds: Sequence[int],
             gamma: Optional[float] = None) -> bool:
        """Print ||H|| per instance; fails if any power iteration does not converge."""
        passed = True
        for n in n_list:
            for seed in seeds:
                config = NetworkConfig(n, gamma=gamma, seed=seed)
                matrix = _matrix_for(place_nodes(config))
                try:
                    result = spectral_norm(matrix)
                except ConvergenceError as e:
                    display_error(f"n={n} seed={seed}: {e} (best estimate {e.best_estimate:.6g})")
                    passed = False
                    continue
                display_norm_result(n, seed, result.value, result.iterations, result.residual,
                                    capacity_upper_bound(config.P, result))
        return passed

    def bounds(self, n_list: Sequence[int], seeds: Sequence[int], depth: int = 2) -> bool:
        """Compare every bound method with the exact norm; fails if one undercuts it."""
        config = SweepConfig(n_list=list(n_list), seeds=list(seeds), methods=BOUND_METHODS,
                             recursion_depth=depth)
        all_rows = []
        passed = True
        for n in n_list:
            for seed in seeds:
                rows = measure_instance(config, n, seed)
                all_rows.extend(rows)
                norm = rows[0].value
                table = []
                for row in rows[1:]:
                    sound = row.status != STATUS_OK or \
                        row.value >= norm * (1 - SOUNDNESS_TOLERANCE)
                    passed &= sound and row.status in (STATUS_OK, STATUS_SKIPPED)
                    table.append((row.method, row.value, sound))
                display_bounds_table(n, seed, norm, table)
        if self.output_dir is not None:
            display_written_files([write_bound_csv(all_rows, self.output_dir / 'bounds.csv')])
        return passed

    def scheme(self, n_list: Sequence[int], seeds: Sequence[int], gamma: float,
               params: Optional[SchemeParams] = None) -> bool:
        """Run the scheme and check it against the cut-set bound and TDMA."""
        params = params or SchemeParams()
        passed = True
        decodable_seeds = 0
        runs = 0
        written = []
        for n in n_list:
            for seed in seeds:
                config = NetworkConfig(n, gamma=gamma, seed=seed)
                placement = place_nodes(config)
                layout = build_pair_layout(config, params, placement)
                measurement = measure_scheme_rate(config, params, placement, layout)
                bound = capacity_upper_bound(config.P, spectral_norm(_matrix_for(placement)))
                report = RateReport(n, config.P, bound, tdma_baseline_rate(config, placement),
                                    measurement.scheme_rate, measurement.optimistic_rate)

                t = max(trace.t for trace in measurement.traces)
                noise_limit = max(trace.noise_limit for trace in measurement.traces)
                energy_ok = all(trace.energy_ok for trace in measurement.traces)
                precondition_ok = all(trace.precondition_ok for trace in measurement.traces)
                steps = min(trace.steps_simulated for trace in measurement.traces)
                layout_line = (f"N_C={layout.N_C}, clusters {layout.cluster_width:.2f} x "
                               f"{layout.cluster_height:.1f}, d={layout.d:.1f}, "
                               f"{steps}/{layout.rounds_to_serve_all} TDMA steps, t={t}")
                display_scheme_summary(n, seed, config.P, layout_line, report,
                                       measurement.decodable_fraction,
                                       measurement.max_noise_power, noise_limit, energy_ok,
                                       precondition_ok)

                passed &= report.sandwich_holds() and energy_ok and measurement.noise_ok
                decodable_seeds += measurement.decodable_fraction >= SCHEME_MIN_DECODABLE
                runs += 1
                if self.output_dir is not None:
                    path = self.output_dir / f'trace_n{n}_seed{seed}.csv'
                    written.append(export_trace_csv(measurement.traces[0], path))
        if written:
            display_written_files(written)
        return passed and decodable_seeds >= SCHEME_MIN_DECODABLE * runs

    def verify_lemmas(self, names: Optional[Sequence[str]] = None, quick: bool = False) -> bool:
        results = run_checks(names, quick)
        display_check_results(results)
        return all(result.passed for result in results)

    def sweep(self, config: SweepConfig) -> bool:
        """Run (or resume) a sweep and write its report next to the rows."""
        manager = SweepManager(config.resolved_output_dir(self.output_dir))
        report = run_sweep(config, manager, config.resolved_threads(self.threads))
        emit_report(report, manager.output_dir)
        display_fits(report.fits)
        display_sweep_summary(len(report.rows), report.failed_rows(), manager.output_dir)
        return report.passed

    def report(self, directory: Path) -> bool:
        """Rebuild fits and figures from the rows stored in a sweep directory."""
        manager = SweepManager(directory)
        rows = manager.load_rows()
        if not rows:
            raise InvalidConfigError(f"no sweep rows in {directory}")
        methods = None
        if manager.config_file.exists():
            methods = manager.load_config(manager.config_file).methods
        report = report_from_rows(rows, methods)
        display_written_files(emit_report(report, directory))
        display_fits(report.fits)
        display_sweep_summary(len(report.rows), report.failed_rows(), directory)
        return report.passed

    def calibrate(self, targets: Sequence[str], seeds: Optional[int] = None) -> bool:
        """
        Re-derive the empirical constants of the bounds and the scheme.

        Raises:
            InvalidConfigError: On an unknown target
        """
        unknown = [target for target in targets if target not in CALIBRATION_TARGETS]
        if unknown:
            raise InvalidConfigError(f"unknown calibration targets: {', '.join(unknown)}")
        kwargs = {'seeds': seeds} if seeds else {}
        for target in targets:
            if target == 'block':
                value = calibrate_block_constant(workers=self.threads or 1, **kwargs)
                display_calibration('block constant c', value, BLOCK_CONSTANT_C)
            elif target == 'gain':
                display_calibration('gain constant K1', calibrate_gain_constant(**kwargs),
                                    GAIN_CONSTANT_K1)
            else:
                display_calibration('interference constant K2',
                                    calibrate_interference_constant(**kwargs),
                                    INTERFERENCE_CONSTANT_K2)
        return True

    def export(self, n_list: Sequence[int], seeds: Sequence[int],
               gamma: Optional[float] = None) -> bool:
        """Write placements (and dense matrices) for outside tools."""
        output_dir = self.output_dir or default_output_dir()
        written = []
        for n in n_list:
            for seed in seeds:
                placement = place_nodes(NetworkConfig(n, gamma=gamma, seed=seed))
                written.append(export_placement_csv(
                    placement, output_dir / f'placement_n{n}_seed{seed}.csv'))
                if n <= DENSE_MATRIX_LIMIT:
                    written.append(export_matrix_binary(
                        build_channel_matrix(placement),
                        output_dir / f'channel_n{n}_seed{seed}.c64'))
                else:
                    logger.warning("n=%d above the dense limit; matrix not exported", n)
        display_written_files(written)
        return True


def _int_list(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{text}'")
    if value < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='Sweep config JSON')
    common.add_argument('--out', type=Path, help='Output directory')
    common.add_argument('--n', type=_int_list, help='Network sizes, e.g. 256,1024')
    common.add_argument('--seeds', type=_positive_int,
                        help='Number of seeds (0..K-1)')
    common.add_argument('--threads', type=_positive_int, help='Worker threads')
    common.add_argument('--power-exponent', type=float, dest='power_exponent',
                        help='gamma, with P = n^-gamma')
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='Warnings only')

    parser = argparse.ArgumentParser(
        prog='losbroadcast',
        description='losbroadcast - LOS broadcast capacity simulator',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  losbroadcast norm --n 1024 --seeds 3
  losbroadcast bounds --n 256,1024
  losbroadcast scheme --n 4096 --power-exponent 1
  losbroadcast verify-lemmas --quick
  losbroadcast sweep --config sweep.json --out runs/prop1
  losbroadcast report runs/prop1
"""
    )
    sub = parser.add_subparsers(dest='command', metavar='command')

    sub.add_parser('norm', parents=[common], help='Spectral norm of H')
    bounds = sub.add_parser('bounds', parents=[common], help='Norm bounds against ||H||')
    bounds.add_argument('--depth', type=int, default=2, help='Recursion depth (default: 2)')
    sub.add_parser('scheme', parents=[common], help='Back-and-forth scheme rates')
    verify = sub.add_parser('verify-lemmas', parents=[common], help='Acceptance checks')
    verify.add_argument('checks', nargs='*', metavar='check',
                        help=f"Subset of: {', '.join(CHECKS)}")
    verify.add_argument('--quick', action='store_true', help='Reduced sizes')
    sweep = sub.add_parser('sweep', parents=[common], help='Resumable seed sweep')
    sweep.add_argument('--methods', help='Comma-separated methods (default: power_iter)')
    report = sub.add_parser('report', parents=[common], help='Rebuild a sweep report')
    report.add_argument('directory', type=Path, nargs='?', help='Sweep directory')
    calibrate = sub.add_parser('calibrate', parents=[common], help='Fit empirical constants')
    calibrate.add_argument('targets', nargs='*',
                           metavar='target', help=f"Subset of: {', '.join(CALIBRATION_TARGETS)}")
    sub.add_parser('export', parents=[common], help='Placement CSV and matrix dump')
    return parser


def sweep_config_from_args(args) -> SweepConfig:
    """Config file values, overridden by any command-line flag."""
    if args.config is not None:
        data = SweepManager.load_config(args.config).to_dict()
    else:
        data = {'n_list': DEFAULT_SWEEP_N, 'seeds': list(range(DEFAULT_SWEEP_SEEDS)),
                'methods': [METHOD_POWER_ITER]}
    if args.n:
        data['n_list'] = args.n
    if args.seeds:
        data['seeds'] = list(range(args.seeds))
    if args.power_exponent is not None:
        data['gamma'] = args.power_exponent
        data['P_list'] = None
    if getattr(args, 'methods', None):
        data['methods'] = [m.strip() for m in args.methods.split(',') if m.strip()]
    return SweepConfig.from_dict(data)


def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)


def dispatch(args) -> bool:
    lab = BroadcastLab(args.out, args.threads)
    seeds = list(range(args.seeds or 1))

    if args.command == 'norm':
        return lab.norm(args.n or [1024], seeds, args.power_exponent)
    if args.command == 'bounds':
        return lab.bounds(args.n or [1024], seeds, args.depth)
    if args.command == 'scheme':
        params = None
        if args.config is not None:
            params = scheme_params_for(SweepManager.load_config(args.config))
        gamma = 1.0 if args.power_exponent is None else args.power_exponent
        return lab.scheme(args.n or [4096], seeds, gamma, params)
    if args.command == 'verify-lemmas':
        return lab.verify_lemmas(args.checks or None, args.quick)
    if args.command == 'sweep':
        return lab.sweep(sweep_config_from_args(args))
    if args.command == 'report':
        directory = args.directory or args.out
        if directory is None and args.config is not None:
            directory = SweepManager.load_config(args.config).resolved_output_dir()
        if directory is None:
            raise InvalidConfigError("report needs a sweep directory")
        return lab.report(directory)
    if args.command == 'calibrate':
        return lab.calibrate(args.targets or CALIBRATION_TARGETS, args.seeds)
    if args.command == 'export':
        return lab.export(args.n or [1024], seeds, args.power_exponent)
    raise InvalidConfigError(f"unknown command '{args.command}'")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Main entry point for the CLI.

    Returns:
        0 if every check of the invocation passed, 1 if one failed,
        2 on an error, 130 when interrupted
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 0

    configure_logging(args.verbose, args.quiet)
    try:
        return 0 if dispatch(args) else 1
    except BroadcastError as e:
        display_error(str(e))
        return 2
    except KeyboardInterrupt:
        display_interrupted()
        return 130


if __name__ == '__main__':
    sys.exit(main())
