#!/usr/bin/env python3
"""
Tests for the cluster-pair layout and the back-and-forth scheme.
"""

import dataclasses
import math
import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from beamforming import (
    PairLayout,
    SchemeParams,
    _dimensions,
    _feasible,
    build_pair_layout,
    burst_power,
    calibrate_gain_constant,
    coherent_gain,
    compute_amplification,
    compute_tau,
    default_rounds,
    export_trace_csv,
    gain_samples,
    interference_at,
    interference_bound,
    interference_samples,
    interference_to_signal_ratio,
    interference_vector,
    measure_scheme_rate,
    minimum_feasible_n,
    phase1_broadcast,
    precondition_snr,
    run_back_and_forth,
    sample_sources
)
from capacity import capacity_upper_bound
from constants import (
    BURST_CYCLE,
    BURST_SLOT,
    DIRECTION_LEFT_TO_RIGHT,
    DIRECTION_RIGHT_TO_LEFT,
    ENV_SLOW_TESTS,
    INTERFERENCE_CONSTANT_K2,
    MAX_ROUNDS,
    TRACE_CSV_HEADER
)
from errors import InvalidArgumentError, InvalidConfigError, LayoutInfeasibleError
from network_model import NetworkConfig, NodePlacement, build_channel_matrix, place_nodes
from spectral import spectral_norm

SLOW = os.environ.get(ENV_SLOW_TESTS) == '1'


class TestSchemeParams(unittest.TestCase):
    """Validation of the scheme constants."""

    def test_defaults_are_valid(self):
        """The default constants construct."""
        params = SchemeParams()
        self.assertIsNone(params.t)
        self.assertGreater(params.c1, math.sqrt(2))
        self.assertEqual(params.burst_policy, BURST_CYCLE)

    def test_rejects_small_c1(self):
        """c1 must exceed sqrt(2)."""
        with self.assertRaises(InvalidConfigError):
            SchemeParams(c1=1.0)

    def test_rejects_bad_values(self):
        """Zero rounds, unknown burst policies and too few sources are rejected."""
        for kwargs in ({'t': 0}, {'tau': 0}, {'burst_policy': 'forever'}, {'sources': 1},
                       {'c2': 0.0}, {'epsilon': 0.0}, {'t': MAX_ROUNDS + 1},
                       {'snr_margin': 0.0}, {'tdma_steps': 0}):
            with self.subTest(kwargs=kwargs):
                with self.assertRaises(InvalidConfigError):
                    SchemeParams(**kwargs)


class TestGeometry(unittest.TestCase):
    """Cluster dimensions, feasibility and pair membership."""

    def test_dimensions_at_65536(self):
        """n = 2^16 with defaults: width 4, height 64, 8 pairs."""
        width, height, d, gap, pairs = _dimensions(65536, SchemeParams())
        self.assertAlmostEqual(width, 4.0)
        self.assertAlmostEqual(height, 64.0)
        self.assertEqual(d, height)
        self.assertAlmostEqual(gap, 65536 ** 0.3)
        self.assertEqual(pairs, 8)

    def test_minimum_feasible_n(self):
        """The smallest feasible n is a boundary."""
        params = SchemeParams()
        n = minimum_feasible_n(params)
        self.assertIsNotNone(n)
        self.assertTrue(_feasible(n, params))
        self.assertFalse(_feasible(n - 1, params))

    def test_infeasible_layout_reports_minimum(self):
        """A huge guard gap leaves no pair and names the minimum n."""
        params = SchemeParams(c2=100.0)
        config = NetworkConfig(1024, seed=0)
        with self.assertRaises(LayoutInfeasibleError) as ctx:
            build_pair_layout(config, params, place_nodes(config))
        self.assertEqual(ctx.exception.minimum_feasible_n, minimum_feasible_n(params))

    def test_layout_at_65536(self):
        """Eight pairs, clusters inside their x ranges, 32 TDMA steps."""
        config = NetworkConfig(65536, seed=1)
        placement = place_nodes(config)
        layout = build_pair_layout(config, SchemeParams(), placement)
        self.assertEqual(len(layout.pairs), 8)
        self.assertAlmostEqual(layout.M, 256.0)
        self.assertEqual(layout.rounds_to_serve_all, 32)
        for left, right in layout.pairs:
            self.assertTrue(np.all(placement.x[left] < 64))
            self.assertTrue(np.all(placement.x[right] >= 128))
            self.assertTrue(np.all(placement.x[right] < 192))

    def test_pairs_are_disjoint(self):
        """Overlapping member sets are rejected."""
        with self.assertRaises(InvalidArgumentError):
            PairLayout(1.0, 1.0, 1.0, 1.0, 1, ((np.array([0, 1]), np.array([1, 2])),), 1, 1.0)

    def test_every_node_served(self):
        """All TDMA steps together cover every node."""
        config = NetworkConfig(4096, seed=2)
        placement = place_nodes(config)
        layout = build_pair_layout(config, SchemeParams(), placement)
        self.assertGreaterEqual(int(layout.participation().min()), 1)

    def test_odd_step_shifts_right(self):
        """Odd steps move the left clusters to x = sqrt(n)/4."""
        config = NetworkConfig(4096, seed=2)
        layout = build_pair_layout(config, SchemeParams(), place_nodes(config))
        shifted = layout.pairs_at(1)
        self.assertEqual(shifted.x_offset, 16.0)
        with self.assertRaises(InvalidArgumentError):
            layout.pairs_at(layout.rounds_to_serve_all)


class TestBeamformingPrimitives(unittest.TestCase):
    """Coherent gain, phase 1 and the amplification formulas."""

    def test_single_node_gain(self):
        """One transmitter at integer distance gives 1/r."""
        placement = NodePlacement(np.array([[0.0, 0.0], [3.0, 0.0]]), 0)
        gain = coherent_gain([0], 1, placement)
        self.assertAlmostEqual(gain.real, 1 / 3, places=12)
        self.assertAlmostEqual(gain.imag, 0.0, places=12)

    def test_compensation_removes_edge_offset(self):
        """A node 1/4 behind the edge is re-aligned by its pre-rotation."""
        placement = NodePlacement(np.array([[-0.25, 0.0], [3.0, 0.0]]), 0)
        compensated = coherent_gain([0], 1, placement, facing_edge=0.0)
        raw = coherent_gain([0], 1, placement, facing_edge=0.0, compensate=False)
        self.assertAlmostEqual(compensated.real, 1 / 3.25, places=12)
        self.assertAlmostEqual(compensated.imag, 0.0, places=12)
        self.assertAlmostEqual(raw.real, 0.0, places=12)
        self.assertAlmostEqual(raw.imag, 1 / 3.25, places=12)

    def test_receiver_inside_cluster_span(self):
        """A receiver level with the cluster has no facing edge."""
        placement = NodePlacement(np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 5.0]]), 0)
        with self.assertRaises(InvalidArgumentError):
            coherent_gain([0, 1], 2, placement)

    def test_phase1_unit_distance(self):
        """Burst power 1 at distance 1 gives SNR 1; the source is +inf."""
        placement = NodePlacement(np.array([[0.0, 0.0], [1.0, 0.0]]), 0)
        snr = phase1_broadcast(NetworkConfig(2), placement, 0, 1.0)
        self.assertEqual(snr[0], math.inf)
        self.assertAlmostEqual(snr[1], 1.0)

    def test_phase1_invalid_source(self):
        """Sources outside the network are rejected."""
        placement = NodePlacement(np.array([[0.0, 0.0], [1.0, 0.0]]), 0)
        with self.assertRaises(InvalidArgumentError):
            phase1_broadcast(NetworkConfig(2), placement, 2, 1.0)

    def test_phase1_weak_burst_warns(self):
        """A burst too weak for n^-1/2 at the far edge is logged as a warning."""
        config = NetworkConfig(64, seed=1)
        with self.assertLogs('beamforming', level='WARNING'):
            phase1_broadcast(config, place_nodes(config), 0, 1e-6)

    def test_amplification(self):
        """snr_min = 1 gives d/M and the product identity holds."""
        self.assertAlmostEqual(compute_amplification(64, 256, 1.0, 3), 0.25)
        A = compute_amplification(64, 256, 0.01, 4)
        self.assertAlmostEqual((A * 256 / 64) ** 8 * 0.01, 1.0, places=10)

    def test_tau(self):
        """tau rounds up and is at least one."""
        self.assertEqual(compute_tau(8, 64, 256, 65536, 1.0, 1.0, 1), 1)
        self.assertEqual(compute_tau(8, 64, 256, 65536, 1e-6, 1.0, 1), 1954)
        with self.assertRaises(InvalidArgumentError):
            compute_tau(0, 64, 256, 65536, 1.0, 1.0, 1)

    def test_default_rounds(self):
        """Smallest t with snr^(-1/t) <= n^eps, capped."""
        self.assertEqual(default_rounds(2.0, 4096, 0.05), 1)
        self.assertEqual(default_rounds(4096 ** -0.09, 4096, 0.05), 2)
        with self.assertLogs('beamforming', level='WARNING'):
            self.assertEqual(default_rounds(1e-300, 4, 0.05), MAX_ROUNDS)

    def test_burst_policies(self):
        """n P per slot, or n P T_msg / 2 over the cycle."""
        config = NetworkConfig(100, power_per_node=0.5)
        self.assertEqual(burst_power(config, SchemeParams(burst_policy=BURST_SLOT), 10), 50.0)
        self.assertEqual(burst_power(config, SchemeParams(burst_policy=BURST_CYCLE), 10), 250.0)

    def test_gain_constant_is_low_percentile(self):
        """With five fixtures the 5th percentile is the smallest gain."""
        samples = gain_samples(M=16, d=16.0, seeds=5, seed=1)
        self.assertEqual(calibrate_gain_constant(M=16, d=16.0, seeds=5, seed=1), samples.min())

    def test_gain_samples_deterministic(self):
        """Strip fixtures are seeded."""
        first = gain_samples(M=32, d=32.0, seeds=5, seed=3)
        second = gain_samples(M=32, d=32.0, seeds=5, seed=3)
        np.testing.assert_array_equal(first, second)
        self.assertTrue(np.all(first >= 0))


class TestInterference(unittest.TestCase):
    """Cross-pair interference."""

    def setUp(self):
        config = NetworkConfig(4096, seed=5)
        self.placement = place_nodes(config)
        self.layout = build_pair_layout(config, SchemeParams(), self.placement)

    def test_single_pair_has_no_interference(self):
        """With N_C = 1 every receiver sees zero interference."""
        single = dataclasses.replace(self.layout, pairs=self.layout.pairs[:1])
        _, values = interference_vector(single, self.placement)
        np.testing.assert_array_equal(values, 0)

    def test_receivers_are_right_clusters(self):
        """Left to right, the receivers are the right clusters."""
        receivers, values = interference_vector(self.layout, self.placement)
        expected = np.concatenate([right for _, right in self.layout.pairs])
        np.testing.assert_array_equal(receivers, expected)
        self.assertEqual(len(values), len(receivers))

    def test_interference_at(self):
        """Single-receiver lookup agrees with the vector."""
        receivers, values = interference_vector(self.layout, self.placement,
                                                DIRECTION_RIGHT_TO_LEFT)
        self.assertEqual(interference_at(self.layout, int(receivers[3]), self.placement,
                                         DIRECTION_RIGHT_TO_LEFT), values[3])
        transmitter = int(self.layout.pairs[0][1][0])
        with self.assertRaises(InvalidArgumentError):
            interference_at(self.layout, transmitter, self.placement, DIRECTION_RIGHT_TO_LEFT)

    def test_normalized_samples(self):
        """One normalized value per first-step receiver."""
        samples = interference_samples(4096, SchemeParams(), seeds=1, seed=5)
        receivers, _ = interference_vector(self.layout, self.placement)
        self.assertEqual(len(samples), len(receivers))
        self.assertTrue(all(value >= 0 for value in samples))


class TestBackAndForth(unittest.TestCase):
    """Round-by-round simulation."""

    def setUp(self):
        self.config = NetworkConfig(4096, seed=6)
        self.placement = place_nodes(self.config)
        self.params = SchemeParams(t=3, noise_trials=16)
        self.layout = build_pair_layout(self.config, self.params, self.placement)

    def test_round_structure(self):
        """t rounds alternating direction, starting left to right."""
        trace = run_back_and_forth(self.config, self.params, self.layout, self.placement, 0)
        self.assertEqual(trace.t, 3)
        self.assertEqual([r.direction for r in trace.rounds],
                         [DIRECTION_LEFT_TO_RIGHT, DIRECTION_RIGHT_TO_LEFT,
                          DIRECTION_LEFT_TO_RIGHT])
        self.assertGreaterEqual(trace.tau, 1)
        self.assertGreaterEqual(trace.achieved_rate, 0)
        self.assertAlmostEqual(trace.optimistic_rate, trace.achieved_rate * 3)

    def test_deterministic(self):
        """Identical inputs give identical traces."""
        first = run_back_and_forth(self.config, self.params, self.layout, self.placement, 7)
        second = run_back_and_forth(self.config, self.params, self.layout, self.placement, 7)
        self.assertEqual(first, second)

    def test_energy_budget_met(self):
        """A derived tau keeps the average power within P."""
        trace = run_back_and_forth(self.config, self.params, self.layout, self.placement, 0)
        self.assertTrue(trace.energy_ok)
        self.assertLessEqual(trace.average_power, self.config.P * (1 + 1e-9))

    def test_every_tdma_step_simulated(self):
        """All steps of the cycle contribute to the trace."""
        trace = run_back_and_forth(self.config, self.params, self.layout, self.placement, 0)
        self.assertEqual(trace.steps_simulated, self.layout.rounds_to_serve_all)

    def test_sampled_steps(self):
        """tdma_steps limits the simulation to evenly spaced steps."""
        params = dataclasses.replace(self.params, tdma_steps=4)
        trace = run_back_and_forth(self.config, params, self.layout, self.placement, 0)
        self.assertEqual(trace.steps_simulated, 4)

    def test_cycle_burst_meets_precondition(self):
        """The cycle burst lifts the weakest phase-1 SNR to margin * N_C / M."""
        trace = run_back_and_forth(self.config, self.params, self.layout, self.placement, 0)
        floor = self.params.snr_margin * precondition_snr(self.layout)
        self.assertTrue(trace.precondition_ok)
        self.assertGreaterEqual(trace.snr_min, floor * (1 - 1e-9))

    def test_noise_stays_bounded(self):
        """Accumulated noise stays below 4 (t + 1)."""
        trace = run_back_and_forth(self.config, self.params, self.layout, self.placement, 0)
        self.assertTrue(trace.noise_ok)
        self.assertLessEqual(trace.accumulated_noise_power, 4 * (trace.t + 1))

    def test_noiseless_run(self):
        """Without injected noise, no noise accumulates."""
        params = dataclasses.replace(self.params, inject_noise=False)
        trace = run_back_and_forth(self.config, params, self.layout, self.placement, 0)
        self.assertTrue(all(r.noise_power == 0.0 for r in trace.rounds))

    def test_single_pair_sees_no_interference(self):
        """One pair per step gives zero interference in every round of every step."""
        params = dataclasses.replace(self.params, c2=3.0)
        layout = build_pair_layout(self.config, params, self.placement)
        self.assertEqual(layout.N_C, 1)
        trace = run_back_and_forth(self.config, params, layout, self.placement, 0)
        self.assertEqual(trace.N_C, 1)
        self.assertTrue(all(r.interference_power == 0.0 for r in trace.rounds))

    def test_empty_layout(self):
        """A layout without pairs cannot run."""
        empty = dataclasses.replace(self.layout, pairs=())
        with self.assertRaises(LayoutInfeasibleError):
            run_back_and_forth(self.config, self.params, empty, self.placement, 0)

    def test_measure_scheme_rate(self):
        """Eight distinct sources aggregate into one rate."""
        measurement = measure_scheme_rate(self.config, self.params, self.placement, self.layout)
        self.assertEqual(len(measurement.traces), 8)
        self.assertEqual(len({trace.source for trace in measurement.traces}), 8)
        self.assertGreaterEqual(measurement.scheme_rate, 0)
        self.assertLessEqual(measurement.decodable_fraction, 1.0)
        self.assertEqual(sample_sources(self.config, 8),
                         [trace.source for trace in measurement.traces])

    def test_trace_csv(self):
        """Trace CSV has the fixed header and one line per round."""
        trace = run_back_and_forth(self.config, self.params, self.layout, self.placement, 0)
        with tempfile.TemporaryDirectory() as tmp:
            lines = export_trace_csv(trace, Path(tmp) / 'trace.csv').read_text().splitlines()
        self.assertEqual(lines[0], TRACE_CSV_HEADER)
        self.assertEqual(len(lines), 4)


class TestSchemeOutcome(unittest.TestCase):
    """Noise, signal level, decodability and the cut-set bound at n = 1024."""

    SEEDS = range(5)

    @classmethod
    def setUpClass(cls):
        cls.params = SchemeParams(c2=3.0, noise_trials=16)
        cls.runs = []
        for seed in cls.SEEDS:
            config = NetworkConfig(1024, seed=seed)
            placement = place_nodes(config)
            measurement = measure_scheme_rate(config, cls.params, placement)
            cls.runs.append((config, placement, measurement))

    def test_noise_bounded_on_every_source(self):
        """Accumulated noise <= 4 (t + 1) for every sampled source."""
        for _, _, measurement in self.runs:
            for trace in measurement.traces:
                self.assertLessEqual(trace.accumulated_noise_power, 4 * (trace.t + 1))
                self.assertTrue(trace.noise_ok)

    def test_final_signal_power_is_order_one(self):
        """The final own-pair power sits near the target."""
        for _, _, measurement in self.runs:
            for trace in measurement.traces:
                self.assertGreaterEqual(trace.final_signal_power, 0.1)
                self.assertLessEqual(trace.final_signal_power, 10.0)

    def test_decodable_on_most_seeds(self):
        """Final SINR >= theta for 90% of sources on 90% of seeds."""
        good = sum(measurement.decodable_fraction >= 0.9 for _, _, measurement in self.runs)
        self.assertGreaterEqual(good, 0.9 * len(self.runs))
        for _, _, measurement in self.runs:
            for trace in measurement.traces:
                self.assertEqual(trace.decodable, trace.final_sinr >= self.params.theta)

    def test_rate_below_cut_set_bound(self):
        """Scheme rate <= P ||H||^2."""
        for config, placement, measurement in self.runs[:2]:
            bound = capacity_upper_bound(config.P,
                                         spectral_norm(build_channel_matrix(placement)))
            self.assertLessEqual(measurement.scheme_rate, bound)
            self.assertLessEqual(measurement.optimistic_rate, bound)

    def test_energy_and_precondition(self):
        """Every source keeps within P and meets N_C / M."""
        for _, _, measurement in self.runs:
            self.assertTrue(all(trace.energy_ok for trace in measurement.traces))
            self.assertTrue(all(trace.precondition_ok for trace in measurement.traces))


class TestSchemeScaling(unittest.TestCase):
    """Coefficient growth, the tau identity and geometric trends."""

    def test_signal_coefficient_increases(self):
        """With snr below the target, the signal coefficient grows every round."""
        config = NetworkConfig(1024, power_per_node=0.05, seed=3)
        placement = place_nodes(config)
        params = SchemeParams(c2=3.0, burst_policy=BURST_SLOT, inject_noise=False,
                              noise_trials=1, tdma_steps=2)
        layout = build_pair_layout(config, params, placement)
        trace = run_back_and_forth(config, params, layout, placement, 0)
        self.assertGreater(trace.t, 1)
        coefficients = [r.signal_amplitude_coeff for r in trace.rounds]
        self.assertTrue(all(later > earlier
                            for earlier, later in zip(coefficients, coefficients[1:])))

    def test_tau_matches_amplification(self):
        """A^2 <= n tau P / (N_C M) < A^2 + n P / (N_C M)."""
        for N_C, d, M, n, P, snr, t in ((4, 16.0, 32.0, 4096, 1e-3, 0.01, 2),
                                        (8, 64.0, 256.0, 65536, 1e-4, 0.001, 3),
                                        (1, 8.0, 11.3, 1024, 1e-3, 0.05, 1)):
            with self.subTest(n=n):
                A = compute_amplification(d, M, snr, t)
                tau = compute_tau(N_C, d, M, n, P, snr, t)
                self.assertGreater(tau, 1)
                scaled = n * tau * P / (N_C * M)
                self.assertGreaterEqual(scaled, A ** 2 * (1 - 1e-12))
                self.assertLess(scaled, A ** 2 + n * P / (N_C * M))

    def test_compensation_gain_ratio(self):
        """Compensated gain is at least five times the raw-phase gain."""
        compensated = gain_samples(M=64, d=64.0, seeds=30, seed=2)
        raw = gain_samples(M=64, d=64.0, seeds=30, seed=2, compensate=False)
        self.assertGreaterEqual(compensated.mean() / raw.mean(), 5.0)

    def test_interference_ratio_decreases_with_n(self):
        """Interference relative to the own-pair signal shrinks as n grows."""
        ratios = []
        for n in (4096, 16384, 65536):
            values = []
            for seed in range(2):
                config = NetworkConfig(n, seed=seed)
                placement = place_nodes(config)
                layout = build_pair_layout(config, SchemeParams(), placement)
                values.append(interference_to_signal_ratio(layout, placement))
            ratios.append(float(np.mean(values)))
        self.assertTrue(all(later < earlier for earlier, later in zip(ratios, ratios[1:])),
                        ratios)

    def test_interference_bound_matches_normalization(self):
        """|I| over the bound with K2 = 1 equals the normalized samples."""
        config = NetworkConfig(4096, seed=5)
        placement = place_nodes(config)
        params = SchemeParams()
        layout = build_pair_layout(config, params, placement)
        _, values = interference_vector(layout, placement)
        samples = interference_samples(4096, params, seeds=1, seed=5)
        np.testing.assert_allclose(
            np.abs(values) / interference_bound(layout, 4096, params.epsilon, 1.0), samples)
        self.assertAlmostEqual(interference_bound(layout, 4096, params.epsilon),
                               INTERFERENCE_CONSTANT_K2 *
                               interference_bound(layout, 4096, params.epsilon, 1.0))


@unittest.skipUnless(SLOW, f"set {ENV_SLOW_TESTS}=1 to run")
class TestSchemeAtScale(unittest.TestCase):
    """Full-size gain, interference and rate checks."""

    def test_gain_check(self):
        from lemma_checks import check_beamforming_gain
        self.assertTrue(check_beamforming_gain().passed)

    def test_interference_check(self):
        from lemma_checks import check_interference
        self.assertTrue(check_interference(seeds=20).passed)

    def test_scheme_check(self):
        from lemma_checks import check_scheme
        self.assertTrue(check_scheme(seeds=2).passed)


if __name__ == '__main__':
    unittest.main()
