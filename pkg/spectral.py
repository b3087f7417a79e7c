"""Largest singular values and certified upper bounds on the channel norm."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from constants import (
    BLOCK_CALIBRATION_M,
    BLOCK_CALIBRATION_PERCENTILE,
    BLOCK_CALIBRATION_SEEDS,
    BLOCK_CONSTANT_C,
    DEFAULT_EPSILON,
    DEFAULT_TOLERANCE,
    EXPONENT_HIGH,
    EXPONENT_LOW,
    FAR_BLOCKS_FORMULA,
    FAR_BLOCKS_MEASURED,
    FIXED_POINT_MAX_STEPS,
    FIXED_POINT_TOLERANCE,
    ITERATION_CAP_FACTOR,
    MIN_ITERATION_CAP,
    NEIGHBOR_BLOCK_FACTOR,
    RECURSION_EXPONENT_GAP,
    RECURSION_MIN_BLOCK
)
from errors import (
    ConvergenceError,
    InvalidArgumentError,
    InvalidPartitionError,
    WindowViolationError
)
from network_model import (
    ChannelMatrix,
    ClusterLayout,
    NodePlacement,
    cluster_pair_points,
    cross_channel,
    grid_partition
)

logger = logging.getLogger(__name__)

MatrixLike = Union[ChannelMatrix, np.ndarray, LinearOperator]


@dataclass(frozen=True)
class NormResult:
    """Largest singular value with its power-iteration diagnostics."""

    value: float
    iterations: int
    residual: float

    def __post_init__(self):
        if self.value < 0:
            raise InvalidArgumentError("a norm cannot be negative")


def _as_operand(matrix: MatrixLike):
    if isinstance(matrix, ChannelMatrix):
        return matrix.entries
    if isinstance(matrix, LinearOperator):
        return matrix
    return np.asarray(matrix)


def spectral_norm(matrix: MatrixLike, tolerance: float = DEFAULT_TOLERANCE,
                  max_iterations: Optional[int] = None) -> NormResult:
    """
    Largest singular value by alternating products with H and H^dagger.

    The start vector is the normalized all-ones vector; the estimate after
    each sweep is ||H x|| for unit x, so it approaches the true value from
    below. Iteration stops once the relative change drops below tolerance.

    Args:
        matrix: ChannelMatrix, dense array (any shape) or LinearOperator
        tolerance: Relative-change stopping threshold, > 0
        max_iterations: Cap; defaults to max(10 * dimension, 1000)

    Returns:
        NormResult(value, iterations, residual)

    Raises:
        InvalidArgumentError: If tolerance <= 0 or the matrix is not finite
        ConvergenceError: If the cap is hit; carries the best estimate
    """
    if not tolerance > 0:
        raise InvalidArgumentError("tolerance must be positive")

    operand = _as_operand(matrix)
    if isinstance(operand, np.ndarray):
        if operand.ndim != 2:
            raise InvalidArgumentError("matrix must be two-dimensional")
        if operand.size == 0 or not np.any(operand):
            return NormResult(0.0, 0, 0.0)
        if not np.all(np.isfinite(operand)):
            raise InvalidArgumentError("matrix has non-finite entries")
        forward = operand.dot
        adjoint_matrix = operand.conj().T
        backward = adjoint_matrix.dot
    else:
        operator = aslinearoperator(operand)
        forward = operator.matvec
        backward = operator.rmatvec

    rows, cols = operand.shape
    cap = max_iterations or max(ITERATION_CAP_FACTOR * max(rows, cols), MIN_ITERATION_CAP)

    x = np.full(cols, 1.0 / math.sqrt(cols), dtype=np.complex128)
    estimate = 0.0
    residual = math.inf
    for iteration in range(1, cap + 1):
        y = forward(x)
        value = float(np.linalg.norm(y))
        if value == 0.0:
            if iteration > 1:
                return NormResult(0.0, iteration, 0.0)
            # all-ones lies in the null space; restart from a ramp
            x = np.arange(1, cols + 1, dtype=np.complex128)
            x /= np.linalg.norm(x)
            continue
        if estimate > 0:
            residual = abs(value - estimate) / value
        estimate = value
        if residual <= tolerance:
            logger.debug("power iteration converged after %d iterations (value %.6g)",
                         iteration, estimate)
            return NormResult(estimate, iteration, residual)
        z = backward(y)
        z_norm = np.linalg.norm(z)
        if z_norm == 0.0:
            return NormResult(estimate, iteration, 0.0)
        x = z / z_norm

    raise ConvergenceError(
        f"power iteration did not converge in {cap} iterations (residual {residual:.3e})",
        best_estimate=estimate, iterations=cap, residual=residual
    )


@dataclass(frozen=True)
class BlockPartition:
    """
    Contiguous blocks of a cluster-sorted index permutation.

    ``permutation[block_index_ranges[j][0]:block_index_ranges[j][1]]`` are the
    node indices of block j.
    """

    K: int
    block_index_ranges: Tuple[Tuple[int, int], ...]
    M: float
    permutation: np.ndarray

    def __post_init__(self):
        expected = 0
        for start, stop in self.block_index_ranges:
            if start != expected or stop < start:
                raise InvalidPartitionError("block ranges must be contiguous and disjoint")
            expected = stop
        if expected != len(self.permutation):
            raise InvalidPartitionError("block ranges must cover every node")
        if len(self.block_index_ranges) != self.K:
            raise InvalidPartitionError("K does not match the number of ranges")

    @property
    def n(self) -> int:
        return len(self.permutation)

    def block_nodes(self, j: int) -> np.ndarray:
        start, stop = self.block_index_ranges[j]
        return self.permutation[start:stop]

    @classmethod
    def from_layout(cls, layout: ClusterLayout) -> 'BlockPartition':
        """Sort nodes by cluster and cut one block per cluster (empty ones kept)."""
        order = np.argsort(layout.membership, kind='stable')
        counts = layout.counts()
        stops = np.cumsum(counts)
        starts = stops - counts
        ranges = tuple((int(a), int(b)) for a, b in zip(starts, stops))
        return cls(layout.K, ranges, layout.cluster_area, layout.node_indices[order])

    @classmethod
    def singletons(cls, n: int) -> 'BlockPartition':
        """The M = 1 partition: every node its own block."""
        return cls(n, tuple((i, i + 1) for i in range(n)), 1.0, np.arange(n))

    @classmethod
    def single_block(cls, n: int) -> 'BlockPartition':
        return cls(1, ((0, n),), float(n), np.arange(n))


def _dense(matrix: MatrixLike) -> np.ndarray:
    operand = _as_operand(matrix)
    if isinstance(operand, LinearOperator):
        raise InvalidArgumentError("block bounds need a dense matrix")
    return operand


def block_norm_table(matrix: MatrixLike, partition: BlockPartition,
                     tolerance: float = DEFAULT_TOLERANCE, workers: int = 1) -> np.ndarray:
    """
    K x K table of block spectral norms ||B_jk||.

    Blocks are independent, so they are evaluated on a thread pool; results
    come back in submission order, which keeps the table bit-reproducible.
    """
    entries = _dense(matrix)
    if entries.shape[0] != partition.n or entries.shape[1] != partition.n:
        raise InvalidPartitionError("partition does not match the matrix dimension")

    if all(stop - start <= 1 for start, stop in partition.block_index_ranges):
        table = np.zeros((partition.K, partition.K))
        present = [j for j, (a, b) in enumerate(partition.block_index_ranges) if b > a]
        nodes = np.array([partition.block_nodes(j)[0] for j in present], dtype=int)
        table[np.ix_(present, present)] = np.abs(entries[np.ix_(nodes, nodes)])
        return table

    jobs = [(j, k) for j in range(partition.K) for k in range(partition.K)]

    def norm_of(job):
        j, k = job
        rows, cols = partition.block_nodes(j), partition.block_nodes(k)
        if len(rows) == 0 or len(cols) == 0:
            return 0.0
        return spectral_norm(entries[np.ix_(rows, cols)], tolerance).value

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(norm_of, jobs))
    else:
        values = [norm_of(job) for job in jobs]
    return np.array(values).reshape(partition.K, partition.K)


def block_gershgorin_bound(matrix: MatrixLike, partition: BlockPartition,
                           tolerance: float = DEFAULT_TOLERANCE, workers: int = 1) -> float:
    """
    Block Gersgorin bound max(max_j sum_k ||B_jk||, max_j sum_k ||B_kj||).

    Args:
        matrix: Dense matrix or ChannelMatrix
        partition: Block partition of its index set
        tolerance: Power-iteration tolerance for each block
        workers: Threads used for the block norms

    Returns:
        Upper bound on the spectral norm of the matrix

    Raises:
        InvalidPartitionError: If the partition does not fit the matrix
        ConvergenceError: Propagated from a block norm
    """
    table = block_norm_table(matrix, partition, tolerance, workers)
    row_sums = table.sum(axis=1)
    col_sums = table.sum(axis=0)
    # argmax returns the smallest index on ties
    if row_sums.max() >= col_sums.max():
        value, axis, index = float(row_sums.max()), 'row', int(np.argmax(row_sums))
    else:
        value, axis, index = float(col_sums.max()), 'column', int(np.argmax(col_sums))
    logger.debug("block Gersgorin bound %.6g attained at block %s %d (K=%d)",
                 value, axis, index, partition.K)
    return value


def row_sum_bound(matrix: MatrixLike) -> float:
    """Classical Gersgorin-type bound: the M = 1 case of the block bound."""
    entries = np.abs(_dense(matrix))
    return float(max(entries.sum(axis=1).max(), entries.sum(axis=0).max()))


def exponent_map(b: float) -> float:
    """
    The exponent recursion f(b) = 3b / (4b + 2).

    Raises:
        InvalidArgumentError: If b lies outside [1/4, 1/2]
    """
    if not EXPONENT_LOW - 1e-15 <= b <= EXPONENT_HIGH + 1e-15:
        raise InvalidArgumentError(f"exponent must lie in [1/4, 1/2], got {b}")
    return 3 * b / (4 * b + 2)


def exponent_iterates(b0: float = EXPONENT_HIGH, tolerance: float = FIXED_POINT_TOLERANCE,
                      max_steps: int = FIXED_POINT_MAX_STEPS) -> List[float]:
    """Iterates b0, f(b0), ... until within tolerance of the fixed point 1/4."""
    iterates = [b0]
    while abs(iterates[-1] - EXPONENT_LOW) >= tolerance and len(iterates) <= max_steps:
        iterates.append(exponent_map(iterates[-1]))
    return iterates


@dataclass(frozen=True)
class RecursionTrace:
    """
    Exponents and block sizes of the recursive bound.

    chosen_M_sequence holds the block area actually used at each level that
    split the network, after clipping the side to a quarter of the region;
    planned_M_sequence holds the unclipped schedule of plan_recursion.
    """

    exponent_sequence: Tuple[float, ...]
    chosen_M_sequence: Tuple[float, ...]
    final_bound: float
    planned_M_sequence: Tuple[int, ...] = ()
    levels_used: int = 0

    def __post_init__(self):
        for b in self.exponent_sequence:
            if not EXPONENT_LOW - 1e-12 <= b <= EXPONENT_HIGH + 1e-12:
                raise InvalidArgumentError(f"exponent {b} outside [1/4, 1/2]")
        for earlier, later in zip(self.exponent_sequence, self.exponent_sequence[1:]):
            if abs(earlier - EXPONENT_LOW) >= FIXED_POINT_TOLERANCE and not later < earlier:
                raise InvalidArgumentError("exponent sequence must decrease")


def plan_recursion(n: int, depth: int, b0: float = EXPONENT_HIGH) -> Tuple[List[float], List[int]]:
    """
    Exponent and block-size schedule of the recursive bound.

    Level l uses M_l = floor(n_l^(3 / (4 b_l + 2))) with n_0 = n and
    n_(l+1) = 9 M_l; planning stops early once b is within 1e-3 of 1/4.
    """
    exponents: List[float] = []
    sizes: List[int] = []
    b, n_level = b0, float(n)
    for _ in range(depth):
        exponents.append(b)
        M = int(math.floor(n_level ** (3 / (4 * b + 2))))
        sizes.append(M)
        n_level = NEIGHBOR_BLOCK_FACTOR * M
        if abs(b - EXPONENT_LOW) < RECURSION_EXPONENT_GAP:
            break
        b = exponent_map(b)
    return exponents, sizes


def far_block_bound(cluster_area: float, distance: float, n: int,
                    epsilon: float, c: float = BLOCK_CONSTANT_C) -> float:
    """
    sqrt(c n^eps M / d), the far-block estimate used inside the recursion.

    Distances beyond M are clamped to M, which only enlarges the bound.
    """
    d = min(distance, cluster_area)
    return math.sqrt(c * n ** epsilon * cluster_area / d)


class _RecursiveBound:
    """One evaluation of the recursive decomposition bound."""

    def __init__(self, entries: np.ndarray, positions: np.ndarray, plan_sizes: List[int],
                 n: int, epsilon: float, c: float, far_blocks: str, tolerance: float,
                 min_block: int):
        self.entries = entries
        self.positions = positions
        self.plan_sizes = plan_sizes
        self.n = n
        self.epsilon = epsilon
        self.c = c
        self.far_blocks = far_blocks
        self.tolerance = tolerance
        self.min_block = min_block
        self.applied_sides: List[Optional[float]] = [None] * len(plan_sizes)
        self.deepest = 0

    def base(self, indices: np.ndarray) -> float:
        sub = self.entries[np.ix_(indices, indices)]
        if len(indices) < self.min_block:
            return spectral_norm(sub, self.tolerance).value
        return row_sum_bound(sub)

    def far_norm(self, layout: ClusterLayout, j: int, k: int) -> float:
        rows, cols = layout.members(j), layout.members(k)
        if len(rows) == 0 or len(cols) == 0:
            return 0.0
        if self.far_blocks == FAR_BLOCKS_MEASURED:
            return spectral_norm(self.entries[np.ix_(rows, cols)], self.tolerance).value
        area = max(layout.cluster_area, float(len(rows)), float(len(cols)))
        return far_block_bound(area, layout.inter_cluster_distances[j, k], self.n,
                               self.epsilon, self.c)

    def bound(self, indices: np.ndarray, origin: Tuple[float, float],
              extent: Tuple[float, float], level: int) -> float:
        if len(indices) == 0:
            return 0.0
        if level >= len(self.plan_sizes) or len(indices) < self.min_block:
            return self.base(indices)

        # at desk scale the planned M can leave fewer than 4 cells per axis,
        # in which case some R_j would cover the whole region
        side = min(math.sqrt(self.plan_sizes[level]), max(extent) / 4)
        layout = grid_partition(self.positions[indices], indices, side, origin, extent)
        if layout.grid_cols <= 3 and layout.grid_rows <= 3:
            return self.base(indices)

        if self.applied_sides[level] is None:
            self.applied_sides[level] = side
        self.deepest = max(self.deepest, level + 1)

        counts = layout.counts()
        near_max = 0.0
        far_max = 0.0
        for j in range(layout.K):
            if counts[j] == 0:
                continue
            neighbors = layout.neighbors(j)
            x0, y0, x1, y1 = layout.cell_bounds(neighbors)
            members = np.concatenate([layout.members(k) for k in neighbors])
            near = self.bound(np.sort(members), (x0, y0), (x1 - x0, y1 - y0), level + 1)
            far = sum(self.far_norm(layout, j, k) for k in layout.far_clusters(j))
            near_max = max(near_max, near)
            far_max = max(far_max, far)
        return NEIGHBOR_BLOCK_FACTOR * near_max + far_max


def recursive_norm_bound(matrix: MatrixLike, layout_source: NodePlacement, depth: int,
                         epsilon: float = DEFAULT_EPSILON, c: float = BLOCK_CONSTANT_C,
                         far_blocks: str = FAR_BLOCKS_FORMULA,
                         tolerance: float = DEFAULT_TOLERANCE,
                         b0: float = EXPONENT_HIGH,
                         min_block: int = RECURSION_MIN_BLOCK) -> Tuple[float, RecursionTrace]:
    """
    Upper bound on ||H|| by recursive block decomposition.

    Each level partitions the current region into clusters of area M, bounds
    far blocks (d_jk >= 2 sqrt(M)) by sqrt(c n^eps M / d_jk) and recurses on
    the 3 x 3 neighbourhoods H(R_j):
    ||H|| <= 9 max_j ||H(R_j)|| + max_j sum_(k in S_j) ||H_jk||.
    When the depth is exhausted the row-sum (M = 1 Gersgorin) bound is used;
    blocks under ``min_block`` nodes get their exact norm.

    Args:
        matrix: Dense channel matrix of the placement
        layout_source: Placement providing node coordinates
        depth: Number of decomposition levels, 0 for the row-sum bound
        epsilon: Exponent slack in the far-block bound, > 0
        c: Calibrated far-block constant
        far_blocks: 'formula' for the calibrated distance law, 'measured' for exact norms
        tolerance: Power-iteration tolerance for exact norms
        b0: Starting exponent of the schedule
        min_block: Blocks smaller than this are normed directly

    Returns:
        (bound, RecursionTrace)

    Raises:
        InvalidArgumentError: If depth < 0, epsilon <= 0 or far_blocks is unknown
        ConvergenceError: Propagated from exact block norms
    """
    if depth < 0:
        raise InvalidArgumentError("depth must be non-negative")
    if not epsilon > 0:
        raise InvalidArgumentError("epsilon must be positive")
    if far_blocks not in (FAR_BLOCKS_FORMULA, FAR_BLOCKS_MEASURED):
        raise InvalidArgumentError(f"unknown far_blocks mode '{far_blocks}'")

    entries = _dense(matrix)
    n = layout_source.n
    exponents, sizes = plan_recursion(n, depth, b0)

    if depth == 0:
        value = row_sum_bound(entries)
        return value, RecursionTrace((), (), value)

    evaluator = _RecursiveBound(entries, layout_source.positions, sizes, n, epsilon, c,
                                far_blocks, tolerance, min_block)
    side = layout_source.side
    value = evaluator.bound(np.arange(n), (0.0, 0.0), (side, side), 0)
    applied = tuple(s * s for s in evaluator.applied_sides if s is not None)
    trace = RecursionTrace(tuple(exponents), applied, value, tuple(sizes), evaluator.deepest)
    logger.info("recursive bound %.6g (n=%d, depth=%d, levels used %d)",
                value, n, depth, evaluator.deepest)
    return value, trace


def offdiag_block_bound(block: Optional[np.ndarray], M: float, d_jk: float,
                        epsilon: float, c: float = BLOCK_CONSTANT_C) -> float:
    """
    Off-diagonal block bound sqrt(c M^(1+eps) / d_jk).

    Args:
        block: The block itself (unused by the formula; see offdiag_block_holds)
        M: Nodes (and area) per cluster
        d_jk: Centre-to-centre distance
        epsilon: Exponent slack
        c: Calibrated constant

    Raises:
        WindowViolationError: Unless 2 sqrt(M) <= d_jk <= M
    """
    low, high = 2 * math.sqrt(M), float(M)
    if d_jk < low * (1 - 1e-12) or d_jk > high * (1 + 1e-12):
        raise WindowViolationError(
            f"distance {d_jk} outside the window [{low}, {high}] for M={M}")
    return math.sqrt(c * M ** (1 + epsilon) / d_jk)


def offdiag_block_holds(block: np.ndarray, M: float, d_jk: float, epsilon: float,
                        c: float = BLOCK_CONSTANT_C, tolerance: float = DEFAULT_TOLERANCE) -> bool:
    """True when the measured block norm respects the off-diagonal bound."""
    return spectral_norm(block, tolerance).value <= offdiag_block_bound(block, M, d_jk, epsilon, c)


def block_law_samples(M: int, d: float, seeds: int, epsilon: float = DEFAULT_EPSILON,
                      seed: int = 0, tolerance: float = DEFAULT_TOLERANCE,
                      workers: int = 1) -> np.ndarray:
    """Measured ||F||^2 d / M^(1+eps) over random cluster pairs at distance d."""

    def sample(trial: int) -> float:
        points_a, points_b = cluster_pair_points(M, d, seed, trial)
        value = spectral_norm(cross_channel(points_b, points_a), tolerance).value
        return value ** 2 * d / M ** (1 + epsilon)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return np.array(list(pool.map(sample, range(seeds))))
    return np.array([sample(trial) for trial in range(seeds)])


def calibrate_block_constant(M: int = BLOCK_CALIBRATION_M,
                             distances: Optional[Sequence[float]] = None,
                             seeds: int = BLOCK_CALIBRATION_SEEDS,
                             epsilon: float = DEFAULT_EPSILON,
                             percentile: float = BLOCK_CALIBRATION_PERCENTILE,
                             seed: int = 0, workers: int = 1) -> float:
    """
    Empirical constant c of the off-diagonal block law.

    The 99th percentile of ||F||^2 d / M^(1+eps) over the calibration suite
    (distances spread over [2 sqrt(M), M]); 'higher' interpolation so that at
    least that fraction of the suite satisfies the bound.
    """
    if distances is None:
        distances = np.geomspace(2 * math.sqrt(M), M, 5)
    samples = np.concatenate([
        block_law_samples(M, d, seeds, epsilon, seed=seed + i, workers=workers)
        for i, d in enumerate(distances)
    ])
    value = float(np.percentile(samples, percentile, method='higher'))
    logger.info("calibrated block constant c = %.4f from %d blocks", value, samples.size)
    return value


@dataclass(frozen=True)
class MomentEstimate:
    """Tr((F F^dagger)^ell) and its ell-th root."""

    ell: int
    trace_value: float
    root_value: float = field(init=False)

    def __post_init__(self):
        if self.ell < 1:
            raise InvalidArgumentError("moment order must be >= 1")
        if self.trace_value < 0:
            raise InvalidArgumentError("trace of a PSD power cannot be negative")
        object.__setattr__(self, 'root_value', self.trace_value ** (1.0 / self.ell))


def trace_moment(block: np.ndarray, ell: int) -> MomentEstimate:
    """
    Exact trace moment Tr((F F^dagger)^ell) by repeated matrix products.

    The Gram matrix is formed on the smaller side of F; both sides share
    the same non-zero spectrum.

    Raises:
        InvalidArgumentError: If ell < 1
    """
    if ell < 1:
        raise InvalidArgumentError("moment order must be >= 1")
    F = np.asarray(block, dtype=np.complex128)
    if F.ndim != 2:
        F = F.reshape(1, -1)
    gram = F @ F.conj().T if F.shape[0] <= F.shape[1] else F.conj().T @ F
    power = np.linalg.matrix_power(gram, ell)
    value = max(float(np.trace(power).real), 0.0)
    return MomentEstimate(ell, value)


def moment_sequence(block: np.ndarray, orders: Iterable[int]) -> List[MomentEstimate]:
    return [trace_moment(block, ell) for ell in orders]


def expected_trace_moment(M: int, d: float, ell: int, trials: int,
                          seed: int = 0) -> Tuple[float, float]:
    """
    Monte Carlo estimate of E Tr((F F^dagger)^ell) over random cluster pairs.

    Returns:
        (mean, standard error)
    """
    if trials < 2:
        raise InvalidArgumentError("need at least two trials for a standard error")
    values = np.empty(trials)
    for trial in range(trials):
        points_a, points_b = cluster_pair_points(M, d, seed, trial)
        values[trial] = trace_moment(cross_channel(points_b, points_a), ell).trace_value
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(trials))
