"""
Back-and-forth beamforming between paired clusters.

Phase 1: the source bursts its message to the whole network. Phase 2:
N_C cluster pairs, stacked vertically and separated by a guard gap,
amplify-and-forward the message between their two clusters for t rounds
with transmit-side phase compensation. TDMA steps shift the pairs until
every node has been covered.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from constants import (
    BURST_CYCLE,
    BURST_SLOT,
    DEFAULT_C1,
    DEFAULT_C2,
    DEFAULT_EPSILON,
    DEFAULT_NOISE_TRIALS,
    DEFAULT_SCHEME_SOURCES,
    DEFAULT_SNR_MARGIN,
    DEFAULT_TARGET_SIGNAL_POWER,
    DEFAULT_THETA,
    DIRECTION_LEFT_TO_RIGHT,
    DIRECTION_RIGHT_TO_LEFT,
    GAIN_CALIBRATION_PERCENTILE,
    INTERFERENCE_CALIBRATION_N,
    INTERFERENCE_CALIBRATION_PERCENTILE,
    INTERFERENCE_CONSTANT_K2,
    MAX_FEASIBLE_N,
    MAX_ROUNDS,
    MAX_SCHEDULE_PASSES,
    NOISE_GROWTH_FACTOR,
    TRACE_CSV_HEADER,
    VALID_BURST_POLICIES
)
from errors import (
    DivergenceError,
    InvalidArgumentError,
    InvalidConfigError,
    LayoutInfeasibleError,
    ReportWriteError
)
from network_model import (
    NetworkConfig,
    NodePlacement,
    cross_channel,
    make_rng,
    place_nodes
)

logger = logging.getLogger(__name__)

# RNG stream offsets, XOR-ed with the placement seed
SOURCE_STREAM = 0x5EED
NOISE_STREAM = 0x1 << 32


@dataclass(frozen=True)
class SchemeParams:
    """
    Constants and overrides of the back-and-forth scheme.

    t, tau and amplification are derived per run when left as None.
    The cycle burst policy sizes the source burst so that the weakest
    phase-1 SNR reaches snr_margin * N_C / M; the slot policy bursts n P.
    tdma_steps limits the simulation to that many evenly spaced TDMA steps.
    """

    c1: float = DEFAULT_C1
    c2: float = DEFAULT_C2
    epsilon: float = DEFAULT_EPSILON
    t: Optional[int] = None
    tau: Optional[int] = None
    amplification: Optional[float] = None
    theta: float = DEFAULT_THETA
    burst_policy: str = BURST_CYCLE
    target_signal_power: float = DEFAULT_TARGET_SIGNAL_POWER
    noise_trials: int = DEFAULT_NOISE_TRIALS
    inject_noise: bool = True
    compensate: bool = True
    sources: int = DEFAULT_SCHEME_SOURCES
    snr_margin: float = DEFAULT_SNR_MARGIN
    tdma_steps: Optional[int] = None

    def __post_init__(self):
        if not self.c1 > math.sqrt(2):
            raise InvalidConfigError(f"c1 must exceed sqrt(2), got {self.c1}")
        if not self.c2 > 0:
            raise InvalidConfigError(f"c2 must be positive, got {self.c2}")
        if not self.epsilon > 0:
            raise InvalidConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.t is not None and not 1 <= self.t <= MAX_ROUNDS:
            raise InvalidConfigError(f"t must lie in [1, {MAX_ROUNDS}], got {self.t}")
        if self.tau is not None and self.tau < 1:
            raise InvalidConfigError(f"tau must be >= 1, got {self.tau}")
        if self.amplification is not None and not self.amplification > 0:
            raise InvalidConfigError("amplification must be positive")
        if not self.theta > 0:
            raise InvalidConfigError("theta must be positive")
        if self.burst_policy not in VALID_BURST_POLICIES:
            raise InvalidConfigError(
                f"burst_policy must be one of {VALID_BURST_POLICIES}, got '{self.burst_policy}'")
        if not self.target_signal_power > 0:
            raise InvalidConfigError("target_signal_power must be positive")
        if self.noise_trials < 1:
            raise InvalidConfigError("noise_trials must be >= 1")
        if self.sources < DEFAULT_SCHEME_SOURCES:
            raise InvalidConfigError(f"sources must be >= {DEFAULT_SCHEME_SOURCES}")
        if not self.snr_margin > 0:
            raise InvalidConfigError("snr_margin must be positive")
        if self.tdma_steps is not None and self.tdma_steps < 1:
            raise InvalidConfigError("tdma_steps must be >= 1")


def _dimensions(n: int, params: SchemeParams) -> Tuple[float, float, float, float, int]:
    width = n ** 0.25 / (2 * params.c1)
    height = math.sqrt(n) / 4
    gap = params.c2 * n ** (0.25 + params.epsilon)
    pairs = int(math.floor(math.sqrt(n) / (width + gap)))
    return width, height, height, gap, pairs


def _feasible(n: int, params: SchemeParams) -> bool:
    width, height, _, _, pairs = _dimensions(n, params)
    return pairs >= 1 and width * height >= 1


def minimum_feasible_n(params: SchemeParams) -> Optional[int]:
    """
    Smallest n for which N_C >= 1 and a cluster holds at least one node on average.

    Returns None when no n up to 2^30 qualifies.
    """
    high = 2
    while not _feasible(high, params):
        high *= 2
        if high > MAX_FEASIBLE_N:
            return None
    low = high // 2
    while high - low > 1:
        middle = (low + high) // 2
        if _feasible(middle, params):
            high = middle
        else:
            low = middle
    return high


@dataclass(frozen=True)
class PairLayout:
    """
    Cluster pairs active in one TDMA step.

    Each pair is a left cluster T_i and a right cluster R_i of size
    cluster_height (horizontal) by cluster_width (vertical) with a gap d
    between their facing edges. Pairs sit on horizontal bands ``pitch``
    apart.
    """

    cluster_width: float
    cluster_height: float
    d: float
    vertical_gap: float
    N_C: int
    pairs: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    rounds_to_serve_all: int
    pitch: float
    step: int = 0
    x_offset: float = 0.0
    y_offset: float = 0.0
    bands: Tuple[Tuple[float, float], ...] = ()
    placement: Optional[NodePlacement] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        members = [nodes for pair in self.pairs for nodes in pair]
        if members:
            joined = np.concatenate(members)
            if len(np.unique(joined)) != len(joined):
                raise InvalidArgumentError("pair member sets must be disjoint")

    @property
    def M(self) -> float:
        """Nominal cluster area (and expected node count)."""
        return self.cluster_width * self.cluster_height

    @property
    def left_edge(self) -> float:
        """Facing edge of the left clusters."""
        return self.x_offset + self.cluster_height

    @property
    def right_edge(self) -> float:
        """Facing edge of the right clusters."""
        return self.x_offset + self.cluster_height + self.d

    @property
    def shift(self) -> float:
        shifts = math.ceil(self.rounds_to_serve_all / 2)
        return self.pitch / shifts

    def pairs_at(self, step: int) -> 'PairLayout':
        """
        Layout of TDMA step ``step``.

        Even steps put the left clusters at x = 0, odd steps at x = sqrt(n)/4;
        every second step raises all bands by pitch / ceil(R / 2). Pairs with
        an empty cluster are dropped.
        """
        if not 0 <= step < self.rounds_to_serve_all:
            raise InvalidArgumentError(
                f"step must lie in [0, {self.rounds_to_serve_all}), got {step}")
        return _layout_for_step(self.placement, self.cluster_width, self.cluster_height,
                                self.d, self.vertical_gap, self.N_C, self.rounds_to_serve_all,
                                self.pitch, step)

    def participation(self) -> np.ndarray:
        """Number of TDMA steps in which each node belongs to some cluster."""
        positions = self.placement.positions
        counts = np.zeros(len(positions), dtype=int)
        for step in range(self.rounds_to_serve_all):
            counts += _covered(positions, self.cluster_width, self.cluster_height, self.d,
                               self.pitch, self.N_C, *_offsets(step, self.cluster_height,
                                                               self.pitch,
                                                               self.rounds_to_serve_all))
        return counts


def _offsets(step: int, height: float, pitch: float, rounds: int) -> Tuple[float, float]:
    shifts = math.ceil(rounds / 2)
    return (step % 2) * height, (step // 2) * pitch / shifts


def _bands(y_offset: float, width: float, pitch: float, pairs: int,
           side: float) -> List[Tuple[float, float]]:
    bands = []
    for i in range(pairs):
        y0 = y_offset + i * pitch
        if y0 < side:
            bands.append((y0, min(y0 + width, side)))
    return bands


def _covered(positions: np.ndarray, width: float, height: float, d: float, pitch: float,
             pairs: int, x_offset: float, y_offset: float) -> np.ndarray:
    side = 4 * height
    x, y = positions[:, 0], positions[:, 1]
    in_x = ((x >= x_offset) & (x < x_offset + height)) | \
           ((x >= x_offset + height + d) & (x < x_offset + 2 * height + d))
    in_y = np.zeros(len(positions), dtype=bool)
    for y0, y1 in _bands(y_offset, width, pitch, pairs, side):
        in_y |= (y >= y0) & (y < y1)
    return (in_x & in_y).astype(int)


def _layout_for_step(placement: NodePlacement, width: float, height: float, d: float,
                     gap: float, pairs: int, rounds: int, pitch: float,
                     step: int) -> PairLayout:
    x_offset, y_offset = _offsets(step, height, pitch, rounds)
    x, y = placement.x, placement.y
    left_x = (x >= x_offset) & (x < x_offset + height)
    right_x = (x >= x_offset + height + d) & (x < x_offset + 2 * height + d)

    members = []
    bands = []
    for y0, y1 in _bands(y_offset, width, pitch, pairs, placement.side):
        in_band = (y >= y0) & (y < y1)
        left = np.flatnonzero(left_x & in_band)
        right = np.flatnonzero(right_x & in_band)
        if len(left) == 0 or len(right) == 0:
            logger.debug("step %d: dropping pair on band [%.3f, %.3f) with an empty cluster",
                         step, y0, y1)
            continue
        members.append((left, right))
        bands.append((y0, y1))

    return PairLayout(width, height, d, gap, pairs, tuple(members), rounds, pitch, step,
                      x_offset, y_offset, tuple(bands), placement)


def build_pair_layout(config: NetworkConfig, params: SchemeParams,
                      placement: NodePlacement, step: int = 0) -> PairLayout:
    """
    Build the cluster-pair geometry and its node membership.

    Args:
        config: Network size
        params: Scheme constants c1, c2, eps
        placement: Node positions
        step: TDMA step to materialize

    Returns:
        PairLayout of the requested step

    Raises:
        LayoutInfeasibleError: If N_C < 1 or a first-step cluster is empty
    """
    if placement.n != config.n:
        raise InvalidArgumentError("placement does not match config.n")
    n = config.n
    width, height, d, gap, pairs = _dimensions(n, params)
    if pairs < 1:
        raise LayoutInfeasibleError(
            f"no cluster pair fits at n={n} (N_C = {pairs})", minimum_feasible_n(params))

    rounds = int(math.ceil(n / (pairs * width * height)))
    pitch = math.sqrt(n) / pairs
    first = _layout_for_step(placement, width, height, d, gap, pairs, rounds, pitch, 0)
    if len(first.pairs) < pairs:
        raise LayoutInfeasibleError(
            f"a cluster of the first TDMA step is empty at n={n}", minimum_feasible_n(params))

    logger.debug("pair layout n=%d: width %.3f, height %.3f, gap %.3f, N_C=%d, R=%d",
                 n, width, height, gap, pairs, rounds)
    return first if step == 0 else first.pairs_at(step)


def _facing_distance(points: np.ndarray, edge: float) -> np.ndarray:
    return np.abs(points[:, 0] - edge)


def coherent_gain(tx_cluster: Sequence[int], rx_node: int, placement: NodePlacement,
                  facing_edge: Optional[float] = None, compensate: bool = True) -> complex:
    """
    Sum of exp(2 pi i (r_jk - x_k)) / r_jk over the transmit cluster.

    x_k is node k's distance to the cluster edge facing the receiver. The
    receiver may sit on either side of the cluster, but not level with it.

    Args:
        tx_cluster: Transmit node indices
        rx_node: Receiving node index
        placement: Node positions
        facing_edge: x coordinate of the facing edge (default: the outermost node)
        compensate: Drop the -2 pi x_k pre-rotation when False
    """
    tx = np.asarray(tx_cluster, dtype=int)
    points = placement.positions[tx]
    receiver = placement.positions[rx_node]
    if facing_edge is None:
        if receiver[0] > points[:, 0].max():
            facing_edge = float(points[:, 0].max())
        elif receiver[0] < points[:, 0].min():
            facing_edge = float(points[:, 0].min())
        else:
            raise InvalidArgumentError("receiver must lie to one side of the transmit cluster")
    row = cross_channel(receiver, points)[0]
    if compensate:
        row = row * np.exp(-2j * np.pi * _facing_distance(points, facing_edge))
    return complex(row.sum())


def _direction_sets(layout: PairLayout, direction: str):
    if direction == DIRECTION_LEFT_TO_RIGHT:
        return [pair[0] for pair in layout.pairs], [pair[1] for pair in layout.pairs], \
            layout.left_edge
    if direction == DIRECTION_RIGHT_TO_LEFT:
        return [pair[1] for pair in layout.pairs], [pair[0] for pair in layout.pairs], \
            layout.right_edge
    raise InvalidArgumentError(f"unknown direction '{direction}'")


def interference_vector(layout: PairLayout, placement: NodePlacement,
                        direction: str = DIRECTION_LEFT_TO_RIGHT) -> Tuple[np.ndarray, np.ndarray]:
    """
    Phase-compensated contribution of every other pair at every receiver.

    Returns:
        (receiver indices, complex interference per receiver)
    """
    tx_sets, rx_sets, edge = _direction_sets(layout, direction)
    if not tx_sets:
        return np.array([], dtype=int), np.array([], dtype=complex)
    tx_all = np.concatenate(tx_sets)
    rx_all = np.concatenate(rx_sets)
    tx_pair = np.concatenate([np.full(len(s), i) for i, s in enumerate(tx_sets)])
    rx_pair = np.concatenate([np.full(len(s), i) for i, s in enumerate(rx_sets)])

    tx_points = placement.positions[tx_all]
    weights = np.exp(-2j * np.pi * _facing_distance(tx_points, edge))
    channel = cross_channel(placement.positions[rx_all], tx_points)
    channel[rx_pair[:, None] == tx_pair[None, :]] = 0
    return rx_all, channel @ weights


def interference_at(layout: PairLayout, rx_node: int, placement: NodePlacement,
                    direction: str = DIRECTION_LEFT_TO_RIGHT) -> complex:
    """
    Interference at one receiver from the transmit clusters of all other pairs.

    Raises:
        InvalidArgumentError: If rx_node is not a receiver in this direction
    """
    receivers, values = interference_vector(layout, placement, direction)
    hits = np.flatnonzero(receivers == rx_node)
    if len(hits) == 0:
        raise InvalidArgumentError(f"node {rx_node} is not a receiver of this layout")
    return complex(values[hits[0]])


def phase1_broadcast(config: NetworkConfig, placement: NodePlacement, source: int,
                     burst_power: float) -> np.ndarray:
    """
    Per-node SNR of the source's phase-1 burst, burst_power / r^2.

    The source's own entry is +inf.

    Raises:
        InvalidArgumentError: If the source index is invalid or burst_power <= 0
    """
    if not 0 <= source < placement.n:
        raise InvalidArgumentError(f"source {source} outside [0, {placement.n})")
    if not burst_power > 0:
        raise InvalidArgumentError("burst_power must be positive")
    distances = np.hypot(*(placement.positions - placement.positions[source]).T)
    with np.errstate(divide='ignore'):
        snr = burst_power / distances ** 2
    snr[source] = np.inf
    snr_min = float(np.delete(snr, source).min()) if placement.n > 1 else math.inf
    if snr_min < config.n ** -0.5:
        logger.warning("phase-1 SNR %.3g is below n^-1/2 = %.3g for source %d",
                       snr_min, config.n ** -0.5, source)
    return snr


def compute_amplification(d: float, M: float, snr_min: float, t: int) -> float:
    """A = (d / M) snr_min^(-1 / (2t)), so that (A M / d)^(2t) snr_min = 1."""
    if not snr_min > 0:
        raise InvalidArgumentError("snr_min must be positive")
    if t < 1:
        raise InvalidArgumentError("t must be >= 1")
    return (d / M) * snr_min ** (-1.0 / (2 * t))


def compute_tau(N_C: int, d: float, M: float, n: int, P: float, snr_min: float, t: int) -> int:
    """tau = ceil(N_C d^2 / (n M P) snr_min^(-1/t)), at least 1."""
    if min(N_C, d, M, n, P, snr_min, t) <= 0:
        raise InvalidArgumentError("all arguments of compute_tau must be positive")
    return max(1, int(math.ceil(N_C * d ** 2 / (n * M * P) * snr_min ** (-1.0 / t))))


def default_rounds(snr_min: float, n: int, epsilon: float) -> int:
    """Smallest t with snr_min^(-1/t) <= n^eps, capped at MAX_ROUNDS."""
    if snr_min >= 1:
        return 1
    t = int(math.ceil(math.log(1 / snr_min) / (epsilon * math.log(n))))
    if t > MAX_ROUNDS:
        logger.warning("round count %d capped at %d", t, MAX_ROUNDS)
        return MAX_ROUNDS
    return max(t, 1)


def burst_power(config: NetworkConfig, params: SchemeParams, message_slots: float) -> float:
    """Source burst: n P for the slot policy, n P T_msg / 2 for the cycle policy."""
    if params.burst_policy == BURST_CYCLE:
        return config.n * config.P * message_slots / 2
    return config.n * config.P


def precondition_snr(layout: PairLayout) -> float:
    """N_C / M, the weakest phase-1 SNR under which forwarded noise stays bounded."""
    return layout.N_C / layout.M


def interference_bound(layout: PairLayout, n: int, epsilon: float,
                       K2: float = INTERFERENCE_CONSTANT_K2) -> float:
    """K2 M log n / (d n^eps), the bound on the interference magnitude at a receiver."""
    return K2 * layout.M * math.log(n) / (layout.d * n ** epsilon)


@dataclass(frozen=True)
class RoundRecord:
    """
    One round, aggregated over every simulated TDMA step.

    signal_power is the mean own-pair power over the receivers,
    interference_power and noise_power are maxima, min_snr is the smallest
    SINR of any receiver.
    """

    round: int
    direction: str
    signal_amplitude_coeff: float
    signal_power: float
    interference_power: float
    noise_power: float
    min_snr: float


@dataclass(frozen=True)
class SchemeTrace:
    """Decomposition of every round plus the outcome for one source message."""

    source: int
    rounds: Tuple[RoundRecord, ...]
    decodable: bool
    achieved_rate: float
    optimistic_rate: float
    final_sinr: float
    t: int
    tau: int
    burst_power: float
    snr_min: float
    amplification: Tuple[float, ...]
    average_power: float
    energy_ok: bool
    N_C: int
    M: float
    rounds_to_serve_all: int
    steps_simulated: int
    noise_ok: bool
    precondition_ok: bool
    schedule_passes: int

    @property
    def accumulated_noise_power(self) -> float:
        return self.rounds[-1].noise_power

    @property
    def final_signal_power(self) -> float:
        return self.rounds[-1].signal_power

    @property
    def noise_limit(self) -> float:
        return NOISE_GROWTH_FACTOR * (self.t + 1)


class _PairChannels:
    """Channel blocks and per-node phase weights of one TDMA step."""

    def __init__(self, layout: PairLayout, placement: NodePlacement, compensate: bool):
        self.pairs = len(layout.pairs)
        self.left = np.concatenate([pair[0] for pair in layout.pairs])
        self.right = np.concatenate([pair[1] for pair in layout.pairs])
        self.left_pair = np.concatenate([np.full(len(p[0]), i) for i, p in enumerate(layout.pairs)])
        self.right_pair = np.concatenate([np.full(len(p[1]), i)
                                          for i, p in enumerate(layout.pairs)])
        positions = placement.positions
        # rows: right cluster nodes, columns: left cluster nodes
        channel = cross_channel(positions[self.right], positions[self.left])
        own = self.right_pair[:, None] == self.left_pair[None, :]
        self.own = np.where(own, channel, 0)
        self.other = np.where(own, 0, channel)

        if compensate:
            self.left_phase = np.exp(-2j * np.pi * _facing_distance(positions[self.left],
                                                                    layout.left_edge))
            self.right_phase = np.exp(-2j * np.pi * _facing_distance(positions[self.right],
                                                                     layout.right_edge))
        else:
            self.left_phase = np.ones(len(self.left), dtype=complex)
            self.right_phase = np.ones(len(self.right), dtype=complex)

    def hop(self, round_index: int, source: int):
        """
        (tx nodes, tx pair ids, tx phase, own map, other map, rx nodes, rx pair ids).

        Odd rounds go left to right. The source never relays.
        """
        if round_index % 2 == 1:
            tx, tx_pair, phase, own, other, rx, rx_pair = (
                self.left, self.left_pair, self.left_phase, self.own, self.other,
                self.right, self.right_pair)
        else:
            tx, tx_pair, phase, own, other, rx, rx_pair = (
                self.right, self.right_pair, self.right_phase, self.own.T, self.other.T,
                self.left, self.left_pair)
        return tx, tx_pair, np.where(tx == source, 0, phase), own, other, rx, rx_pair

    def interference_ratio(self) -> float:
        """Mean interference power over mean own-pair power, unit start, left to right."""
        weights = self.left_phase
        own = np.abs(self.own @ weights) ** 2
        other = np.abs(self.other @ weights) ** 2
        return float(other.mean() / own.mean())


def _pair_mean(values: np.ndarray, pair_ids: np.ndarray, pairs: int) -> np.ndarray:
    totals = np.bincount(pair_ids, weights=values, minlength=pairs)
    counts = np.bincount(pair_ids, minlength=pairs)
    return totals / np.maximum(counts, 1)


def _pilot_gains(channels: _PairChannels, start: np.ndarray, t: int, source: int) -> np.ndarray:
    """Per-hop own-pair amplitude gain measured by noiseless unit-gain propagation."""
    pairs = channels.pairs
    amplitude = start.astype(complex)
    log_gain = np.zeros(pairs)
    for round_index in range(1, t + 1):
        _, tx_pair, phase, own, _, _, rx_pair = channels.hop(round_index, source)
        before = np.sqrt(_pair_mean(np.abs(amplitude) ** 2, tx_pair, pairs))
        amplitude = own @ (phase * amplitude)
        after = np.sqrt(_pair_mean(np.abs(amplitude) ** 2, rx_pair, pairs))
        with np.errstate(divide='ignore', invalid='ignore'):
            log_gain += np.log(after) - np.log(before)
        scale = np.where(after > 0, after, 1.0)
        amplitude = amplitude / scale[rx_pair]
    return np.nan_to_num(np.exp(log_gain / t), nan=0.0)


@dataclass
class _RoundTally:
    own_total: float = 0.0
    receivers: int = 0
    interference_max: float = 0.0
    noise_max: float = 0.0
    sinr_min: float = math.inf
    coefficient: float = math.inf

    def add(self, own_power: np.ndarray, other_power: np.ndarray, noise_power: np.ndarray,
            sinr: np.ndarray, coefficient: float):
        if own_power.size:
            self.own_total += float(own_power.sum())
            self.receivers += own_power.size
            self.interference_max = max(self.interference_max, float(other_power.max()))
            self.noise_max = max(self.noise_max, float(noise_power.max()))
            self.sinr_min = min(self.sinr_min, float(sinr.min()))
        self.coefficient = min(self.coefficient, coefficient)

    def record(self, round_index: int) -> RoundRecord:
        return RoundRecord(
            round=round_index,
            direction=DIRECTION_LEFT_TO_RIGHT if round_index % 2 else DIRECTION_RIGHT_TO_LEFT,
            signal_amplitude_coeff=0.0 if math.isinf(self.coefficient) else self.coefficient,
            signal_power=self.own_total / self.receivers if self.receivers else 0.0,
            interference_power=self.interference_max,
            noise_power=self.noise_max,
            min_snr=0.0 if math.isinf(self.sinr_min) else self.sinr_min
        )


@dataclass
class _Simulation:
    tallies: List[_RoundTally]
    snr_min: float
    amplification: Tuple[float, ...]
    energy: np.ndarray
    steps: int

    def energy_max(self, scale: float = 1.0) -> float:
        return float(self.energy.max()) * scale


def _schedule_steps(layout: PairLayout, params: SchemeParams) -> List[int]:
    rounds = layout.rounds_to_serve_all
    if params.tdma_steps is None or params.tdma_steps >= rounds:
        return list(range(rounds))
    return sorted({int(s) for s in np.linspace(0, rounds - 1, params.tdma_steps).round()})


def _layout_at(layout: PairLayout, step: int) -> PairLayout:
    return layout if step == layout.step else layout.pairs_at(step)


def _simulate_step(config: NetworkConfig, params: SchemeParams, channels: _PairChannels,
                   snr: np.ndarray, snr_min: float, source: int, t: int, step: int,
                   tallies: List[_RoundTally], energy: np.ndarray) -> np.ndarray:
    rng = make_rng(config.seed, NOISE_STREAM ^ (source << 12) ^ step)
    trials = params.noise_trials

    def fresh(size: int) -> np.ndarray:
        if not params.inject_noise:
            return np.zeros((size, trials), dtype=complex)
        return (rng.standard_normal((size, trials)) +
                1j * rng.standard_normal((size, trials))) / math.sqrt(2)

    # every relay scales its observation to the same signal level, never above the target
    level = min(snr_min, params.target_signal_power)
    active = channels.left != source
    start = np.sqrt(level) * active
    with np.errstate(divide='ignore'):
        start_noise_std = np.sqrt(level / snr[channels.left]) * active
    noise = fresh(len(channels.left)) * start_noise_std[:, None]

    hop_gain = _pilot_gains(channels, start, t, source)
    if params.amplification is not None:
        amplification = np.full(channels.pairs, params.amplification)
    else:
        # M_eff = g d turns compute_amplification into (target / level)^(1/2t) / g
        amplification = np.array([
            compute_amplification(1.0, g, level / params.target_signal_power, t)
            if g > 0 else 0.0
            for g in hop_gain
        ])
    per_hop = amplification * hop_gain

    own_path = start.astype(complex)
    total = own_path.copy()
    for round_index in range(1, t + 1):
        tx, tx_pair, phase, own_map, other_map, rx, rx_pair = channels.hop(round_index, source)
        weight = amplification[tx_pair] * phase
        noise_power_tx = np.mean(np.abs(noise) ** 2, axis=1)
        np.add.at(energy, tx, np.abs(weight) ** 2 * (np.abs(total) ** 2 + noise_power_tx))

        own_path = own_map @ (weight * own_path)
        sent = weight * total
        total = own_map @ sent + other_map @ sent
        weighted_noise = weight[:, None] * noise
        noise = own_map @ weighted_noise + other_map @ weighted_noise + fresh(len(rx))
        if not np.all(np.isfinite(total)) or not np.all(np.isfinite(noise)):
            raise DivergenceError(
                f"signal became non-finite in round {round_index} (amplification too large)")

        receiving = rx != source
        own_power = np.abs(own_path[receiving]) ** 2
        other_power = np.abs(total[receiving] - own_path[receiving]) ** 2
        noise_power = np.mean(np.abs(noise[receiving]) ** 2, axis=1)
        with np.errstate(divide='ignore', invalid='ignore'):
            sinr = own_power / (other_power + noise_power)
        sinr = np.nan_to_num(sinr, nan=0.0, posinf=math.inf)
        growing = per_hop[per_hop > 0]
        coefficient = float(np.min(growing ** round_index * math.sqrt(level))) \
            if growing.size else 0.0
        tallies[round_index - 1].add(own_power, other_power, noise_power, sinr, coefficient)
    return amplification


def _simulate(config: NetworkConfig, params: SchemeParams, layout: PairLayout,
              placement: NodePlacement, source: int, burst: float, t: int,
              steps: Sequence[int]) -> _Simulation:
    snr = phase1_broadcast(config, placement, source, burst)
    snr_min = float(np.delete(snr, source).min())
    tallies = [_RoundTally() for _ in range(t)]
    energy = np.zeros(placement.n)
    amplification: Optional[np.ndarray] = None
    simulated = 0
    for step in steps:
        step_layout = _layout_at(layout, step)
        if not step_layout.pairs:
            logger.debug("step %d has no active pair", step)
            continue
        channels = _PairChannels(step_layout, placement, params.compensate)
        used = _simulate_step(config, params, channels, snr, snr_min, source, t, step,
                              tallies, energy)
        if amplification is None:
            amplification = used
        simulated += 1
    if amplification is None:
        raise LayoutInfeasibleError("no simulated TDMA step has an active cluster pair")
    for round_index, tally in enumerate(tallies, start=1):
        logger.debug("round %d: %s", round_index, tally.record(round_index))
    return _Simulation(tallies, snr_min, tuple(float(a) for a in amplification),
                       energy, simulated)


def _relay_tau(energy_max: float, config: NetworkConfig, params: SchemeParams, t: int,
               rounds_all: int) -> int:
    """Smallest tau that keeps the relay share of the average power within budget."""
    factor = 2 if params.burst_policy == BURST_CYCLE else 1
    return max(1, int(math.ceil(factor * energy_max / (config.P * t * rounds_all))))


def _plan_cycle_tau(config: NetworkConfig, params: SchemeParams, layout: PairLayout,
                    placement: NodePlacement, source: int, t: int, tau: int) -> int:
    """Raise tau until the cycle burst it implies leaves room for the relay energy."""
    rounds_all = layout.rounds_to_serve_all
    participation = max(int(layout.participation().max()), 1)
    for planning_pass in range(MAX_SCHEDULE_PASSES):
        burst = burst_power(config, params, 1 + t * tau * rounds_all)
        planned = _simulate(config, params, layout, placement, source, burst, t, [layout.step])
        needed = _relay_tau(planned.energy_max(participation), config, params, t, rounds_all)
        if needed <= tau:
            break
        tau = needed
        logger.debug("planning pass %d: tau raised to %d", planning_pass + 1, tau)
    return tau


def run_back_and_forth(config: NetworkConfig, params: SchemeParams, layout: PairLayout,
                       placement: NodePlacement, source: int = 0) -> SchemeTrace:
    """
    Simulate phase 1 and t back-and-forth rounds for one source message.

    Every receiver's sample is the own-pair coherent signal plus the
    interference of the other pairs plus the forwarded noise plus fresh unit
    circularly-symmetric noise. Forwarded noise is carried through the exact
    amplify-and-forward map as ``noise_trials`` realizations. Round 1 goes
    left to right. Every TDMA step is simulated (or ``tdma_steps`` evenly
    spaced ones), so the trace covers every served node.

    Under the cycle policy the burst is sized so that the weakest phase-1
    SNR reaches snr_margin * N_C / M. tau is the largest of the scaling
    formula, the burst requirement and the smallest value that keeps every
    node's average power within P. The schedule is planned on ``layout``
    with energy extrapolated by participation, then corrected from the
    exact per-node energy of the full simulation.

    Returns:
        SchemeTrace, identical for identical inputs

    Raises:
        LayoutInfeasibleError: If the layout has no active pair
        DivergenceError: If the signal becomes non-finite
    """
    if not layout.pairs:
        raise LayoutInfeasibleError("layout has no active cluster pair")
    if not 0 <= source < placement.n:
        raise InvalidArgumentError(f"source {source} outside [0, {placement.n})")

    n, P = config.n, config.P
    rounds_all = layout.rounds_to_serve_all
    cycle = params.burst_policy == BURST_CYCLE
    r_max2 = float(np.max(np.sum((placement.positions - placement.positions[source]) ** 2,
                                 axis=1)))
    floor = params.snr_margin * precondition_snr(layout)
    snr_plan = max(n * P / r_max2, floor) if cycle else n * P / r_max2
    t = params.t or default_rounds(snr_plan, n, params.epsilon)

    if params.tau is not None:
        tau = params.tau
    else:
        tau = compute_tau(layout.N_C, layout.d, layout.M, n, P, snr_plan, t)
        if cycle:
            needed_burst = floor * r_max2
            tau = max(tau, int(math.ceil((2 * needed_burst / (n * P) - 1) / (t * rounds_all))))
            tau = _plan_cycle_tau(config, params, layout, placement, source, t, tau)

    steps = _schedule_steps(layout, params)
    scale = rounds_all / len(steps)
    passes = 0
    while True:
        passes += 1
        burst = burst_power(config, params, 1 + t * tau * rounds_all)
        simulation = _simulate(config, params, layout, placement, source, burst, t, steps)
        energy_max = simulation.energy_max(scale)
        if params.tau is not None:
            break
        needed = _relay_tau(energy_max, config, params, t, rounds_all)
        if needed <= tau:
            break
        tau = needed
        # the slot burst does not depend on tau
        if not cycle or passes >= MAX_SCHEDULE_PASSES:
            break

    message_slots = 1 + t * tau * rounds_all
    average_power = (burst + n * energy_max) / (n * message_slots)
    energy_ok = average_power <= P * (1 + 1e-9)
    if not energy_ok:
        logger.warning("average power %.4g exceeds the budget %.4g", average_power, P)

    snr_min = simulation.snr_min
    precondition_ok = snr_min >= precondition_snr(layout)
    if not precondition_ok:
        logger.warning("phase-1 SNR %.3g below N_C/M = %.3g for source %d; noise may accumulate",
                       snr_min, precondition_snr(layout), source)

    records = [tally.record(i) for i, tally in enumerate(simulation.tallies, start=1)]
    noise_limit = NOISE_GROWTH_FACTOR * (t + 1)
    noise_ok = records[-1].noise_power <= noise_limit
    if not noise_ok:
        logger.warning("accumulated noise %.4g exceeds %.4g for source %d",
                       records[-1].noise_power, noise_limit, source)

    final_sinr = records[-1].min_snr
    achieved = math.log2(1 + final_sinr) / (tau * t * rounds_all)
    trace = SchemeTrace(
        source=source,
        rounds=tuple(records),
        decodable=final_sinr >= params.theta,
        achieved_rate=achieved,
        optimistic_rate=achieved * t,
        final_sinr=final_sinr,
        t=t,
        tau=tau,
        burst_power=burst,
        snr_min=snr_min,
        amplification=simulation.amplification,
        average_power=average_power,
        energy_ok=energy_ok,
        N_C=len(layout.pairs),
        M=layout.M,
        rounds_to_serve_all=rounds_all,
        steps_simulated=simulation.steps,
        noise_ok=noise_ok,
        precondition_ok=precondition_ok,
        schedule_passes=passes
    )
    logger.info("source %d: t=%d tau=%d over %d steps, final SINR %.3g rate %.4g",
                source, t, tau, simulation.steps, final_sinr, achieved)
    return trace


@dataclass(frozen=True)
class SchemeMeasurement:
    """Scheme rate aggregated over a sample of sources."""

    n: int
    P: float
    scheme_rate: float
    optimistic_rate: float
    decodable_fraction: float
    traces: Tuple[SchemeTrace, ...]

    @property
    def max_noise_power(self) -> float:
        return max(trace.accumulated_noise_power for trace in self.traces)

    @property
    def noise_ok(self) -> bool:
        return all(trace.noise_ok for trace in self.traces)


def interference_to_signal_ratio(layout: PairLayout, placement: NodePlacement) -> float:
    """
    Mean interference power over mean own-pair power at the receivers of one hop.

    Every transmitter sends a unit phase-compensated symbol left to right.

    Raises:
        LayoutInfeasibleError: If the layout has no active pair
    """
    if not layout.pairs:
        raise LayoutInfeasibleError("layout has no active cluster pair")
    return _PairChannels(layout, placement, compensate=True).interference_ratio()


def sample_sources(config: NetworkConfig, count: int) -> List[int]:
    """Deterministic sample of distinct sources."""
    rng = make_rng(config.seed, SOURCE_STREAM)
    picked = rng.choice(config.n, size=min(count, config.n), replace=False)
    return sorted(int(s) for s in picked)


def measure_scheme_rate(config: NetworkConfig, params: SchemeParams,
                        placement: NodePlacement,
                        layout: Optional[PairLayout] = None) -> SchemeMeasurement:
    """
    Aggregate rate over a sample of sources: total bits over total phase-2 slots.

    Raises:
        LayoutInfeasibleError: Propagated from build_pair_layout
        DivergenceError: Propagated from run_back_and_forth
    """
    if layout is None:
        layout = build_pair_layout(config, params, placement)
    traces = [run_back_and_forth(config, params, layout, placement, source)
              for source in sample_sources(config, params.sources)]

    bits = sum(math.log2(1 + trace.final_sinr) for trace in traces)
    slots = sum(trace.tau * trace.t * trace.rounds_to_serve_all for trace in traces)
    rate = bits / slots
    optimistic = sum(math.log2(1 + trace.final_sinr) * trace.t for trace in traces) / slots
    decodable = sum(trace.decodable for trace in traces) / len(traces)
    logger.info("scheme n=%d P=%.3g: rate %.4g (optimistic %.4g), decodable %.0f%%",
                config.n, config.P, rate, optimistic, 100 * decodable)
    return SchemeMeasurement(config.n, config.P, rate, optimistic, decodable, tuple(traces))


def strip_fixture(M: int, d: float, c1: float, seed: int,
                   trial: int = 0) -> Tuple[NodePlacement, np.ndarray, int, float]:
    """
    A transmit strip of M nodes and one receiver facing it at distance d.

    The strip is sqrt(d)/c1 tall and M / height long with its facing edge at
    x = 0; the receiver lies in the band of the strip, d to d + length away.

    Returns:
        (placement, transmit indices, receiver index, facing edge)
    """
    height = math.sqrt(d) / c1
    length = M / height
    rng = make_rng(seed, trial)
    tx = np.column_stack([rng.uniform(-length, 0.0, M), rng.uniform(0.0, height, M)])
    rx = np.array([[d + rng.uniform(0.0, length), rng.uniform(0.0, height)]])
    placement = NodePlacement(np.vstack([tx, rx]), seed)
    return placement, np.arange(M), M, 0.0


def gain_samples(M: int = 64, d: float = 64.0, c1: float = DEFAULT_C1, seeds: int = 100,
                 seed: int = 0, compensate: bool = True) -> np.ndarray:
    """|coherent_gain| d / M over independent strip fixtures."""
    values = np.empty(seeds)
    for trial in range(seeds):
        placement, tx, rx, edge = strip_fixture(M, d, c1, seed, trial)
        values[trial] = abs(coherent_gain(tx, rx, placement, edge, compensate)) * d / M
    return values


def calibrate_gain_constant(M: int = 64, d: float = 64.0, c1: float = DEFAULT_C1,
                            seeds: int = 100, seed: int = 0,
                            percentile: float = GAIN_CALIBRATION_PERCENTILE) -> float:
    """K1 as a low percentile of the normalized coherent gain."""
    value = float(np.percentile(gain_samples(M, d, c1, seeds, seed), percentile,
                                method='lower'))
    logger.info("calibrated gain constant K1 = %.4f", value)
    return value


def interference_samples(n: int, params: SchemeParams, seeds: int,
                         seed: int = 0) -> np.ndarray:
    """|interference| d n^eps / (M log n) at every first-step receiver, pooled over seeds."""
    pooled = []
    for trial in range(seeds):
        config = NetworkConfig(n, seed=seed + trial)
        placement = place_nodes(config)
        layout = build_pair_layout(config, params, placement)
        _, values = interference_vector(layout, placement)
        pooled.append(np.abs(values) * layout.d * n ** params.epsilon / (layout.M * math.log(n)))
    return np.concatenate(pooled)


def calibrate_interference_constant(n: int = INTERFERENCE_CALIBRATION_N, params: Optional[SchemeParams] = None,
                                    seeds: int = 100, seed: int = 0,
                                    percentile: float = INTERFERENCE_CALIBRATION_PERCENTILE
                                    ) -> float:
    """K2 as a high percentile of the normalized interference."""
    params = params or SchemeParams()
    value = float(np.percentile(interference_samples(n, params, seeds, seed), percentile,
                                method='higher'))
    logger.info("calibrated interference constant K2 = %.4f at n=%d", value, n)
    return value


def export_trace_csv(trace: SchemeTrace, path: Path) -> Path:
    """Write the per-round decomposition with the fixed trace header."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(TRACE_CSV_HEADER.split(','))
            for record in trace.rounds:
                writer.writerow([record.round, record.direction, repr(record.signal_power),
                                 repr(record.interference_power), repr(record.noise_power),
                                 repr(record.min_snr)])
    except OSError as e:
        raise ReportWriteError(f"cannot write {path}: {e}") from e
    return path
