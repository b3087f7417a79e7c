#!/usr/bin/env python3
"""
Tests for sweep configuration, resumable sweeps, fits and report files.
"""

import math
import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from constants import (
    BOUND_CSV_HEADER,
    ENV_OUTPUT_DIR,
    ENV_THREADS,
    FIT_CSV_HEADER,
    METHOD_GERSHGORIN_M1,
    METHOD_POWER_ITER,
    METHOD_SCHEME_RATE,
    METHOD_TDMA_RATE,
    STATUS_INFEASIBLE,
    STATUS_OK,
    STATUS_SKIPPED,
    SWEEP_CSV_HEADER
)
from errors import InvalidArgumentError, InvalidConfigError
from experiments import (
    FIT_FAIL,
    FIT_INSUFFICIENT,
    FIT_OK,
    FIT_PASS,
    emit_report,
    fit_method,
    fit_scaling_exponent,
    measure_instance,
    render_svg,
    report_from_rows,
    run_sweep,
    scheme_params_for,
    seed_averaged,
    write_bound_csv
)
from sweep_manager import (
    SweepConfig,
    SweepManager,
    SweepRow,
    default_output_dir,
    default_threads,
    is_known_method,
    moment_order,
    sort_rows
)


def _power_rows(method, exponent, ns=(256, 512, 1024, 2048), seeds=(0, 1, 2)):
    return [SweepRow(n, seed, method, float(n) ** exponent, 0.0, STATUS_OK)
            for n in ns for seed in seeds]


def _small_config(**overrides):
    values = dict(n_list=[64, 128, 256], seeds=[0, 1],
                  methods=[METHOD_POWER_ITER, METHOD_GERSHGORIN_M1], record_wall_time=False)
    values.update(overrides)
    return SweepConfig(**values)


class TestSweepConfig(unittest.TestCase):
    """Validation and resolution of sweep settings."""

    def test_method_names(self):
        """Norm, rate and moment methods are known."""
        self.assertTrue(is_known_method('moment_ell3'))
        self.assertFalse(is_known_method('moment_ell0'))
        self.assertFalse(is_known_method('magic'))
        self.assertEqual(moment_order('moment_ell12'), 12)

    def test_invalid_configs(self):
        """Every malformed grid is rejected."""
        cases = [
            dict(methods=['magic']),
            dict(n_list=[64, 64]),
            dict(seeds=[]),
            dict(n_list=[1]),
            dict(gamma=1.0, P_list=[0.1]),
            dict(P_list=[0.1, 0.2]),
            dict(scheme={'speed': 3}),
            dict(far_blocks='guess'),
            dict(methods=[METHOD_SCHEME_RATE]),
            dict(version=2),
            dict(block_exponent=1.0),
        ]
        for overrides in cases:
            with self.subTest(overrides=overrides):
                with self.assertRaises(InvalidConfigError):
                    _small_config(**overrides)

    def test_power_resolution(self):
        """gamma, a single P or one P per n."""
        self.assertEqual(_small_config(gamma=0.5).power_for(256), 256 ** -0.5)
        self.assertEqual(_small_config(P_list=[0.25]).power_for(128), 0.25)
        self.assertEqual(_small_config(P_list=[1.0, 2.0, 3.0]).power_for(128), 2.0)
        self.assertEqual(_small_config().power_for(64), 1.0)

    def test_output_dir_precedence(self):
        """Flag beats config file beats environment."""
        config = _small_config(output_dir='/tmp/from-config')
        self.assertEqual(config.resolved_output_dir(Path('/tmp/flag')), Path('/tmp/flag'))
        self.assertEqual(config.resolved_output_dir(), Path('/tmp/from-config'))
        with patch.dict(os.environ, {ENV_OUTPUT_DIR: '/tmp/from-env'}):
            self.assertEqual(_small_config().resolved_output_dir(), Path('/tmp/from-env'))
            self.assertEqual(default_output_dir(), Path('/tmp/from-env'))

    def test_threads_from_environment(self):
        """LOSBROADCAST_THREADS must be a positive integer."""
        with patch.dict(os.environ, {ENV_THREADS: '3'}):
            self.assertEqual(default_threads(), 3)
            self.assertEqual(_small_config(threads=2).resolved_threads(), 2)
        with patch.dict(os.environ, {ENV_THREADS: 'many'}):
            with self.assertRaises(InvalidConfigError):
                default_threads()

    def test_from_dict_rejects_unknown_keys(self):
        """Typos in config files are errors."""
        data = _small_config().to_dict()
        data['n_lsit'] = [64]
        with self.assertRaises(InvalidConfigError):
            SweepConfig.from_dict(data)

    def test_from_dict_rejects_missing_keys(self):
        """n_list, seeds and methods are required."""
        with self.assertRaises(InvalidConfigError):
            SweepConfig.from_dict({'n_list': [64]})

    def test_json_round_trip(self):
        """A dumped config loads back equal."""
        config = _small_config(gamma=1.0, scheme={'c1': 3.0})
        with tempfile.TemporaryDirectory() as tmp:
            path = SweepManager.dump_config(config, Path(tmp) / 'config.json')
            self.assertEqual(SweepManager.load_config(path), config)

    def test_load_missing_or_broken_file(self):
        """Missing files and bad JSON are config errors."""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(InvalidConfigError):
                SweepManager.load_config(Path(tmp) / 'absent.json')
            broken = Path(tmp) / 'broken.json'
            broken.write_text('{"n_list": [')
            with self.assertRaises(InvalidConfigError):
                SweepManager.load_config(broken)

    def test_scheme_params(self):
        """Scheme epsilon follows the sweep unless overridden."""
        self.assertEqual(scheme_params_for(_small_config(epsilon=0.1)).epsilon, 0.1)
        config = _small_config(epsilon=0.1, scheme={'epsilon': 0.2})
        self.assertEqual(scheme_params_for(config).epsilon, 0.2)


class TestSweepManager(unittest.TestCase):
    """Snapshot binding and incremental CSV."""

    def test_append_and_load(self):
        """Header once, rows in order."""
        rows = _power_rows(METHOD_TDMA_RATE, 0.0, ns=(64,), seeds=(0, 1))
        with tempfile.TemporaryDirectory() as tmp:
            manager = SweepManager(Path(tmp))
            manager.append_rows(rows[:1])
            manager.append_rows(rows[1:])
            lines = manager.csv_file.read_text().splitlines()
            self.assertEqual(lines[0], SWEEP_CSV_HEADER)
            self.assertEqual(len(lines), 3)
            self.assertEqual(manager.load_rows(), rows)

    def test_torn_line_dropped(self):
        """A partial trailing line from a crash is removed."""
        rows = _power_rows(METHOD_TDMA_RATE, 0.0, ns=(64,), seeds=(0,))
        with tempfile.TemporaryDirectory() as tmp:
            manager = SweepManager(Path(tmp))
            manager.append_rows(rows)
            with open(manager.csv_file, 'a') as f:
                f.write('64,1,tdma')
            with self.assertLogs('sweep_manager', level='WARNING'):
                self.assertEqual(manager.load_rows(), rows)
            self.assertTrue(manager.csv_file.read_text().endswith('\n'))

    def test_refuses_other_config(self):
        """A directory is bound to the config that created it."""
        with tempfile.TemporaryDirectory() as tmp:
            manager = SweepManager(Path(tmp))
            manager.prepare(_small_config())
            manager.prepare(_small_config(threads=4))
            with self.assertRaises(InvalidConfigError):
                manager.prepare(_small_config(seeds=[0, 1, 2]))

    def test_sort_rows(self):
        """n, then seed, then config method order."""
        rows = [SweepRow(128, 0, 'b', 1.0, 0.0, STATUS_OK),
                SweepRow(64, 1, 'a', 1.0, 0.0, STATUS_OK),
                SweepRow(64, 1, 'b', 1.0, 0.0, STATUS_OK)]
        ordered = sort_rows(rows, ['b', 'a'])
        self.assertEqual([r.key for r in ordered], [(64, 1, 'b'), (64, 1, 'a'), (128, 0, 'b')])


class TestFits(unittest.TestCase):
    """Log-log slope fitting."""

    def test_exact_power_law(self):
        """||H|| = n^(1/4) fits a squared slope of 1/2 and passes."""
        fit = fit_scaling_exponent(_power_rows(METHOD_POWER_ITER, 0.25), METHOD_POWER_ITER)
        self.assertAlmostEqual(fit.slope, 0.5, places=10)
        self.assertAlmostEqual(fit.stderr, 0.0, places=10)
        self.assertEqual(fit.points, 4)
        self.assertEqual(fit.status, FIT_PASS)

    def test_slope_outside_window_fails(self):
        """A linear norm fits slope 2 and fails."""
        fit = fit_scaling_exponent(_power_rows(METHOD_POWER_ITER, 1.0), METHOD_POWER_ITER)
        self.assertAlmostEqual(fit.slope, 2.0, places=10)
        self.assertEqual(fit.status, FIT_FAIL)

    def test_constant_metric(self):
        """Constant rates fit slope 0 with no threshold."""
        fit = fit_scaling_exponent(_power_rows(METHOD_TDMA_RATE, 0.0), METHOD_TDMA_RATE)
        self.assertAlmostEqual(fit.slope, 0.0, places=12)
        self.assertEqual(fit.status, FIT_OK)

    def test_non_positive_values_excluded(self):
        """Zero and NaN values are counted and left out."""
        rows = _power_rows(METHOD_TDMA_RATE, 0.0)
        rows.append(SweepRow(256, 9, METHOD_TDMA_RATE, 0.0, 0.0, STATUS_OK))
        rows.append(SweepRow(512, 9, METHOD_TDMA_RATE, math.nan, 0.0, STATUS_OK))
        ns, means, excluded = seed_averaged(rows, METHOD_TDMA_RATE)
        self.assertEqual(excluded, 2)
        self.assertEqual(len(ns), 4)

    def test_too_few_points(self):
        """Two distinct n cannot be fitted."""
        rows = _power_rows(METHOD_TDMA_RATE, 0.0, ns=(64, 128))
        with self.assertRaises(InvalidArgumentError):
            fit_scaling_exponent(rows, METHOD_TDMA_RATE)
        self.assertEqual(fit_method(rows, METHOD_TDMA_RATE).status, FIT_INSUFFICIENT)


class TestSweep(unittest.TestCase):
    """End-to-end sweeps on small networks."""

    def test_row_count_and_soundness(self):
        """One row per (n, seed, method); the row-sum bound dominates the norm."""
        report = run_sweep(_small_config())
        self.assertEqual(len(report.rows), 12)
        values = {row.key: row.value for row in report.rows}
        for n in (64, 128, 256):
            for seed in (0, 1):
                self.assertGreaterEqual(values[(n, seed, METHOD_GERSHGORIN_M1)],
                                        values[(n, seed, METHOD_POWER_ITER)] * (1 - 1e-6))
        self.assertEqual(report.fit_for(METHOD_POWER_ITER).points, 3)

    def test_moment_bound_dominates_norm(self):
        """sqrt(Tr((H H^dagger)^2)^(1/2)) >= ||H||."""
        config = _small_config(methods=[METHOD_POWER_ITER, 'moment_ell2'])
        rows = measure_instance(config, 128, 0)
        self.assertGreaterEqual(rows[1].value, rows[0].value * (1 - 1e-6))

    def test_infeasible_scheme_row(self):
        """An impossible layout records 'infeasible' instead of aborting."""
        config = SweepConfig(n_list=[256], seeds=[0], methods=[METHOD_SCHEME_RATE],
                             scheme={'c2': 100.0}, record_wall_time=False)
        rows = measure_instance(config, 256, 0)
        self.assertEqual(rows[0].status, STATUS_INFEASIBLE)
        self.assertTrue(math.isnan(rows[0].value))

    def test_large_dense_only_methods_skipped(self):
        """Block methods are skipped when the matrix is not dense."""
        config = _small_config(n_list=[5000], seeds=[0], methods=[METHOD_GERSHGORIN_M1])
        rows = measure_instance(config, 5000, 0)
        self.assertEqual(rows[0].status, STATUS_SKIPPED)

    def test_threads_do_not_change_rows(self):
        """Thread count does not affect results."""
        config = _small_config()
        self.assertEqual(run_sweep(config).rows, run_sweep(config, threads=3).rows)

    def test_resume_is_byte_identical(self):
        """A sweep killed after its first n finishes with the same CSV."""
        config = _small_config()
        with tempfile.TemporaryDirectory() as tmp:
            full = SweepManager(Path(tmp) / 'full')
            run_sweep(config, full)
            expected = full.csv_file.read_text()

            resumed = SweepManager(Path(tmp) / 'resumed')
            resumed.prepare(config)
            lines = expected.splitlines(keepends=True)
            resumed.csv_file.write_text(''.join(lines[:5]) + lines[5][:7])
            report = run_sweep(config, resumed)
            self.assertEqual(resumed.csv_file.read_text(), expected)
            self.assertEqual(len(report.rows), 12)


class TestReports(unittest.TestCase):
    """CSV and SVG outputs."""

    def setUp(self):
        rows = _power_rows(METHOD_POWER_ITER, 0.25) + _power_rows(METHOD_TDMA_RATE, 0.0)
        rows.append(SweepRow(256, 7, METHOD_TDMA_RATE, math.nan, 0.0, STATUS_INFEASIBLE))
        self.report = report_from_rows(rows)

    def test_report_from_rows(self):
        """Methods keep first-seen order and failed rows are listed."""
        self.assertEqual(self.report.methods, (METHOD_POWER_ITER, METHOD_TDMA_RATE))
        self.assertEqual(len(self.report.failed_rows()), 1)
        self.assertTrue(self.report.passed)

    def test_svg_has_one_polyline_per_method(self):
        """Each method with data gets a line and a legend entry."""
        svg = render_svg(self.report)
        self.assertTrue(svg.startswith('<svg'))
        self.assertEqual(svg.count('<polyline'), 2)
        self.assertIn('slope 0.500', svg)

    def test_emit_report(self):
        """sweep.csv, fits.csv and report.svg with fixed headers."""
        with tempfile.TemporaryDirectory() as tmp:
            paths = emit_report(self.report, Path(tmp))
            self.assertEqual([p.name for p in paths], ['sweep.csv', 'fits.csv', 'report.svg'])
            self.assertEqual(paths[0].read_text().splitlines()[0], SWEEP_CSV_HEADER)
            fits = paths[1].read_text().splitlines()
            self.assertEqual(fits[0], FIT_CSV_HEADER)
            self.assertEqual(len(fits), 3)

    def test_bound_csv_drops_status(self):
        """bounds.csv has five columns."""
        with tempfile.TemporaryDirectory() as tmp:
            path = write_bound_csv(self.report.rows, Path(tmp) / 'bounds.csv')
            lines = path.read_text().splitlines()
        self.assertEqual(lines[0], BOUND_CSV_HEADER)
        self.assertEqual(len(lines[1].split(',')), 5)

    def test_unknown_format(self):
        """Only csv and svg are supported."""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(InvalidArgumentError):
                emit_report(self.report, Path(tmp), formats=('pdf',))


if __name__ == '__main__':
    unittest.main()
