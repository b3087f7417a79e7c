"""Random network geometry, line-of-sight channels and grid clustering."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.sparse.linalg import LinearOperator
from scipy.spatial import ConvexHull, QhullError, cKDTree
from scipy.spatial.distance import cdist

from constants import (
    COINCIDENT_DISTANCE,
    MATRIX_DUMP_DTYPE,
    MIN_NODES,
    NOISE_POWER,
    OPERATOR_CHUNK_ROWS,
    PLACEMENT_CSV_HEADER
)
from errors import (
    DegeneratePlacementError,
    InvalidArgumentError,
    InvalidConfigError,
    InvalidPartitionError,
    ReportWriteError
)

logger = logging.getLogger(__name__)

SEED_MASK = (1 << 64) - 1


def make_rng(seed: int, trial: int = 0) -> np.random.Generator:
    """
    Build the generator for one trial stream.

    Streams are derived as ``seed XOR trial`` so that sweeps can hand
    independent trials to parallel workers and still reproduce every draw.

    Args:
        seed: 64-bit base seed
        trial: Trial index inside the sweep

    Returns:
        PCG64-backed numpy Generator
    """
    return np.random.Generator(np.random.PCG64((int(seed) ^ int(trial)) & SEED_MASK))


@dataclass(frozen=True)
class NetworkConfig:
    """
    Size, power and seed of one network instance.

    Power is given either directly (``power_per_node``) or through the
    low-SNR exponent ``gamma`` with P = n^-gamma. With the unit
    normalization the link SNR at distance one equals P.
    """

    n: int
    power_per_node: Optional[float] = None
    gamma: Optional[float] = None
    seed: int = 0
    noise_power: float = NOISE_POWER

    def __post_init__(self):
        if int(self.n) != self.n or self.n < MIN_NODES:
            raise InvalidConfigError(f"n must be an integer >= {MIN_NODES}, got {self.n}")
        if self.noise_power != NOISE_POWER:
            raise InvalidConfigError("noise_power is fixed at 1 by the unit normalization")

        if self.gamma is not None:
            derived = float(self.n) ** (-float(self.gamma))
            if self.power_per_node is not None and not math.isclose(
                    self.power_per_node, derived, rel_tol=1e-12):
                raise InvalidConfigError(
                    f"power_per_node={self.power_per_node} contradicts gamma={self.gamma}")
            object.__setattr__(self, 'power_per_node', derived)
        elif self.power_per_node is None:
            object.__setattr__(self, 'power_per_node', 1.0)

        if not self.power_per_node > 0:
            raise InvalidConfigError(f"power_per_node must be positive, got {self.power_per_node}")
        object.__setattr__(self, 'n', int(self.n))

    @property
    def P(self) -> float:
        return self.power_per_node

    @property
    def snr_s(self) -> float:
        """SNR of a link at unit distance."""
        return self.power_per_node

    @property
    def side(self) -> float:
        return math.sqrt(self.n)

    def with_seed(self, seed: int) -> 'NetworkConfig':
        return NetworkConfig(self.n, self.power_per_node, self.gamma, seed)


@dataclass(frozen=True)
class NodePlacement:
    """Positions of the n nodes in the sqrt(n) x sqrt(n) square."""

    positions: np.ndarray
    seed: int

    def __post_init__(self):
        positions = np.array(self.positions, dtype=float)
        if positions.ndim != 2 or positions.shape[1] != 2:
            raise InvalidArgumentError("positions must have shape (n, 2)")
        positions.setflags(write=False)
        object.__setattr__(self, 'positions', positions)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def side(self) -> float:
        return math.sqrt(self.n)

    @property
    def x(self) -> np.ndarray:
        return self.positions[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.positions[:, 1]


@dataclass(frozen=True)
class ChannelMatrix:
    """Dense n x n line-of-sight fading matrix with zero diagonal."""

    entries: np.ndarray
    placement_seed: int

    def __post_init__(self):
        self.entries.setflags(write=False)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Sub-matrix between two index sets."""
        return self.entries[np.ix_(rows, cols)]


class LOSOperator(LinearOperator):
    """
    Matrix-free line-of-sight channel operator.

    Rows of H are evaluated chunk by chunk on every product, so memory stays
    O(chunk * n). H is complex symmetric, hence H^dagger x = conj(H conj(x)).
    """

    def __init__(self, positions: np.ndarray, chunk_rows: int = OPERATOR_CHUNK_ROWS):
        self.positions = np.asarray(positions, dtype=float)
        self.chunk_rows = int(chunk_rows)
        n = self.positions.shape[0]
        super().__init__(dtype=np.complex128, shape=(n, n))

    def _matvec(self, x):
        x = np.asarray(x, dtype=np.complex128).reshape(-1)
        out = np.empty(self.shape[0], dtype=np.complex128)
        for start in range(0, self.shape[0], self.chunk_rows):
            stop = min(start + self.chunk_rows, self.shape[0])
            rows = _los_entries(self.positions[start:stop], self.positions, diagonal_offset=start)
            out[start:stop] = rows @ x
        return out

    def _rmatvec(self, x):
        x = np.asarray(x, dtype=np.complex128).reshape(-1)
        return np.conj(self._matvec(np.conj(x)))


def _los_entries(rx_points: np.ndarray, tx_points: np.ndarray,
                 diagonal_offset: Optional[int] = None) -> np.ndarray:
    """exp(2 pi i r) / r between two point sets; diagonal zeroed when requested."""
    r = cdist(rx_points, tx_points)
    if diagonal_offset is not None:
        rows = np.arange(r.shape[0])
        r[rows, rows + diagonal_offset] = np.inf
    # exp(2*pi*i*r)/r with r = inf gives exactly 0
    with np.errstate(invalid='ignore'):
        h = np.exp(2j * np.pi * np.where(np.isinf(r), 0.0, r)) / r
    return h


def _check_distinct(points: np.ndarray, seed: int) -> None:
    if points.shape[0] < 2:
        return
    distances, indices = cKDTree(points).query(points, k=2)
    nearest = distances[:, 1]
    worst = int(np.argmin(nearest))
    if nearest[worst] < COINCIDENT_DISTANCE:
        pair = (worst, int(indices[worst, 1]))
        raise DegeneratePlacementError(
            f"nodes {pair[0]} and {pair[1]} coincide (distance {nearest[worst]:.3e}, seed {seed})",
            pair=pair
        )


def place_nodes(config: NetworkConfig) -> NodePlacement:
    """
    Draw n i.i.d. uniform points in the square of area n.

    Args:
        config: Network configuration; only n and seed are used

    Returns:
        NodePlacement, bit-identical for identical (n, seed)

    Raises:
        InvalidConfigError: If n < 2
    """
    if config.n < MIN_NODES:
        raise InvalidConfigError(f"n must be >= {MIN_NODES}")
    rng = make_rng(config.seed)
    positions = rng.uniform(0.0, math.sqrt(config.n), size=(config.n, 2))
    return NodePlacement(positions, config.seed)


def pairwise_distance(placement: NodePlacement, j: int, k: int) -> float:
    """Euclidean distance between nodes j and k."""
    if j == k:
        return 0.0
    dx, dy = placement.positions[j] - placement.positions[k]
    return math.hypot(dx, dy)


def build_channel_matrix(placement: NodePlacement) -> ChannelMatrix:
    """
    Build the dense LOS fading matrix h_jk = exp(2 pi i r_jk) / r_jk.

    Args:
        placement: Node positions

    Returns:
        ChannelMatrix with an exactly zero diagonal

    Raises:
        DegeneratePlacementError: If two nodes are closer than 1e-9
    """
    _check_distinct(placement.positions, placement.seed)
    entries = _los_entries(placement.positions, placement.positions, diagonal_offset=0)
    logger.debug("built %dx%d channel matrix for seed %d", placement.n, placement.n, placement.seed)
    return ChannelMatrix(entries, placement.seed)


def channel_operator(placement: NodePlacement, chunk_rows: int = OPERATOR_CHUNK_ROWS) -> LOSOperator:
    """Matrix-free counterpart of build_channel_matrix for large n."""
    _check_distinct(placement.positions, placement.seed)
    return LOSOperator(placement.positions, chunk_rows)


def cross_channel(rx_points: np.ndarray, tx_points: np.ndarray) -> np.ndarray:
    """
    Channel block from one point set to another (rows = receivers).

    Raises:
        DegeneratePlacementError: If a receiver coincides with a transmitter
    """
    rx_points = np.asarray(rx_points, dtype=float).reshape(-1, 2)
    tx_points = np.asarray(tx_points, dtype=float).reshape(-1, 2)
    r = cdist(rx_points, tx_points)
    if r.size and r.min() < COINCIDENT_DISTANCE:
        raise DegeneratePlacementError("receiver and transmitter coincide")
    return np.exp(2j * np.pi * r) / r


def cluster_pair_points(cluster_area: float, distance: float,
                        seed: int, trial: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Two axis-aligned square clusters of area M holding M uniform nodes each.

    The first cluster is centred at the origin, the second at (distance, 0).

    Returns:
        (points_a, points_b), each of shape (M, 2)
    """
    m = int(round(cluster_area))
    if m < 1:
        raise InvalidArgumentError("cluster_area must hold at least one node")
    half = math.sqrt(cluster_area) / 2
    rng = make_rng(seed, trial)
    points_a = rng.uniform(-half, half, size=(m, 2))
    points_b = rng.uniform(-half, half, size=(m, 2)) + np.array([distance, 0.0])
    return points_a, points_b


@dataclass(frozen=True)
class ClusterLayout:
    """
    Grid partition of a rectangular region into clusters.

    Cells are half-open [a, b) x [c, d); the last row and column absorb the
    remainder when the side is not a multiple of the cluster side. Clusters
    are numbered row-major from the region's lower-left corner.
    """

    grid_cols: int
    grid_rows: int
    cluster_side: float
    membership: np.ndarray
    centers: np.ndarray
    inter_cluster_distances: np.ndarray
    node_indices: np.ndarray
    origin: Tuple[float, float] = (0.0, 0.0)
    extent: Tuple[float, float] = (0.0, 0.0)
    x_edges: np.ndarray = field(default=None, repr=False)
    y_edges: np.ndarray = field(default=None, repr=False)

    @property
    def cluster_area(self) -> float:
        """Nominal cluster area M."""
        return self.cluster_side ** 2

    @property
    def K(self) -> int:
        return self.grid_cols * self.grid_rows

    def members(self, cluster: int) -> np.ndarray:
        """Global node indices of one cluster."""
        return self.node_indices[self.membership == cluster]

    def counts(self) -> np.ndarray:
        return np.bincount(self.membership, minlength=self.K)

    def neighbors(self, cluster: int) -> np.ndarray:
        """R_j: clusters whose centre lies closer than 2 sqrt(M), the cluster itself included."""
        return np.flatnonzero(self.inter_cluster_distances[cluster] < 2 * self.cluster_side)

    def far_clusters(self, cluster: int) -> np.ndarray:
        """S_j: the complement of R_j."""
        return np.flatnonzero(self.inter_cluster_distances[cluster] >= 2 * self.cluster_side)

    def cell_bounds(self, clusters: np.ndarray) -> Tuple[float, float, float, float]:
        """Bounding rectangle (x0, y0, x1, y1) of a set of cells."""
        clusters = np.asarray(clusters)
        cols = clusters % self.grid_cols
        rows = clusters // self.grid_cols
        return (float(self.x_edges[cols.min()]), float(self.y_edges[rows.min()]),
                float(self.x_edges[cols.max() + 1]), float(self.y_edges[rows.max() + 1]))


def _axis_edges(start: float, length: float, side: float) -> np.ndarray:
    cells = max(1, int(math.floor(length / side + 1e-12)))
    edges = start + side * np.arange(cells + 1, dtype=float)
    edges[-1] = start + length
    return edges


def grid_partition(points: np.ndarray, node_indices: np.ndarray, cluster_side: float,
                   origin: Tuple[float, float], extent: Tuple[float, float]) -> ClusterLayout:
    """
    Partition the points of a rectangular region into square cells.

    Args:
        points: Coordinates of the nodes inside the region
        node_indices: Global indices of those nodes
        cluster_side: Nominal cell side sqrt(M)
        origin: Lower-left corner of the region
        extent: (width, height) of the region

    Returns:
        ClusterLayout over the region

    Raises:
        InvalidPartitionError: If the side is not positive or exceeds the region
    """
    width, height = extent
    if not cluster_side > 0:
        raise InvalidPartitionError(f"cluster_side must be positive, got {cluster_side}")
    if cluster_side > max(width, height) * (1 + 1e-12):
        raise InvalidPartitionError(
            f"cluster_side {cluster_side} exceeds the region ({width} x {height})")

    x_edges = _axis_edges(origin[0], width, cluster_side)
    y_edges = _axis_edges(origin[1], height, cluster_side)
    cols = len(x_edges) - 1
    rows = len(y_edges) - 1

    points = np.asarray(points, dtype=float).reshape(-1, 2)
    col_of = np.clip(np.searchsorted(x_edges, points[:, 0], side='right') - 1, 0, cols - 1)
    row_of = np.clip(np.searchsorted(y_edges, points[:, 1], side='right') - 1, 0, rows - 1)
    membership = row_of * cols + col_of

    cx = (x_edges[:-1] + x_edges[1:]) / 2
    cy = (y_edges[:-1] + y_edges[1:]) / 2
    centers = np.column_stack([np.tile(cx, rows), np.repeat(cy, cols)])
    distances = cdist(centers, centers)

    return ClusterLayout(
        grid_cols=cols,
        grid_rows=rows,
        cluster_side=float(cluster_side),
        membership=membership,
        centers=centers,
        inter_cluster_distances=distances,
        node_indices=np.asarray(node_indices),
        origin=(float(origin[0]), float(origin[1])),
        extent=(float(width), float(height)),
        x_edges=x_edges,
        y_edges=y_edges
    )


def partition_grid(placement: NodePlacement, cluster_side: float) -> ClusterLayout:
    """
    Split the whole network into a grid of clusters of side cluster_side.

    Raises:
        InvalidPartitionError: If cluster_side <= 0 or > sqrt(n)
    """
    side = placement.side
    if not 0 < cluster_side <= side * (1 + 1e-12):
        raise InvalidPartitionError(f"cluster_side must lie in (0, {side}], got {cluster_side}")
    return grid_partition(placement.positions, np.arange(placement.n), cluster_side,
                          (0.0, 0.0), (side, side))


def delta_plus(delta: float) -> float:
    """Upper-tail Chernoff exponent (1+d) ln(1+d) - d."""
    return (1 + delta) * math.log1p(delta) - delta


def delta_minus(delta: float) -> float:
    """Lower-tail Chernoff exponent (1-d) ln(1-d) + d, equal to 1 for d >= 1."""
    if delta >= 1:
        return 1.0
    return (1 - delta) * math.log1p(-delta) + delta


@dataclass(frozen=True)
class OccupancyReport:
    """
    Empirical and analytic probability that some cluster leaves ((1-d)M, (1+d)M).

    The upper tail (a cluster with >= (1+d)M nodes) is compared with
    n/M exp(-Delta_+(d) M), the lower tail (<= (1-d)M nodes) with
    n/M exp(-Delta_-(d) M). ``violation_frequency`` counts either event.
    """

    n: int
    cluster_area: float
    delta: float
    trials: int
    violation_frequency: float
    bound: float
    two_sided_bound: float
    upper_frequency: float = 0.0
    lower_frequency: float = 0.0
    lower_bound: float = 0.0

    def __post_init__(self):
        for name in ('violation_frequency', 'upper_frequency', 'lower_frequency'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidArgumentError(f"{name} must lie in [0, 1]")
        if self.bound < 0 or self.lower_bound < 0:
            raise InvalidArgumentError("bound must be non-negative")

    @property
    def stderr(self) -> float:
        """Monte Carlo standard error of the violation frequency."""
        p = self.violation_frequency
        return math.sqrt(p * (1 - p) / self.trials)

    def _tail_ok(self, frequency: float, bound: float, sigmas: float) -> bool:
        p = min(bound, 1.0)
        margin = sigmas * math.sqrt(p * (1 - p) / self.trials)
        return frequency <= bound + margin

    def upper_within_bound(self, sigmas: float = 3.0) -> bool:
        return self._tail_ok(self.upper_frequency, self.bound, sigmas)

    def lower_within_bound(self, sigmas: float = 3.0) -> bool:
        return self._tail_ok(self.lower_frequency, self.lower_bound, sigmas)

    def within_bound(self, sigmas: float = 3.0) -> bool:
        """Each tail against its own one-sided bound."""
        return self.upper_within_bound(sigmas) and self.lower_within_bound(sigmas)


def occupancy_check(config: NetworkConfig, cluster_area: float, delta: float,
                    trials: int) -> OccupancyReport:
    """
    Estimate how often a cluster's node count leaves ((1-delta)M, (1+delta)M).

    Each trial draws a fresh placement from stream ``seed XOR trial`` and
    counts nodes per grid cell of side sqrt(M).

    Args:
        config: Network size and base seed
        cluster_area: M = n^beta with 0 < beta < 1
        delta: Relative deviation, > 0
        trials: Number of placements

    Returns:
        OccupancyReport with the upper-tail bound n/M exp(-Delta_+(delta) M)
        and the lower-tail bound n/M exp(-Delta_-(delta) M)

    Raises:
        InvalidConfigError: If trials is zero or M, delta are out of range
    """
    if trials <= 0:
        raise InvalidConfigError("trials must be positive")
    if not delta > 0:
        raise InvalidConfigError("delta must be positive")
    if not 1 < cluster_area < config.n:
        raise InvalidConfigError("cluster_area must satisfy 1 < M < n (M = n^beta, 0 < beta < 1)")

    side = config.side
    cell = math.sqrt(cluster_area)
    edges = _axis_edges(0.0, side, cell)
    cells = len(edges) - 1
    low, high = (1 - delta) * cluster_area, (1 + delta) * cluster_area

    violations = upper = lower = 0
    for trial in range(trials):
        points = make_rng(config.seed, trial).uniform(0.0, side, size=(config.n, 2))
        col = np.clip(np.searchsorted(edges, points[:, 0], side='right') - 1, 0, cells - 1)
        row = np.clip(np.searchsorted(edges, points[:, 1], side='right') - 1, 0, cells - 1)
        counts = np.bincount(row * cells + col, minlength=cells * cells)
        over = bool(np.any(counts >= high))
        under = bool(np.any(counts <= low))
        upper += over
        lower += under
        violations += over or under

    clusters = config.n / cluster_area
    bound = clusters * math.exp(-delta_plus(delta) * cluster_area)
    lower_bound = clusters * math.exp(-delta_minus(delta) * cluster_area)
    report = OccupancyReport(config.n, cluster_area, delta, trials,
                             violations / trials, bound, bound + lower_bound,
                             upper / trials, lower / trials, lower_bound)
    logger.info("occupancy n=%d M=%g delta=%g: upper %.4f (bound %.4f), lower %.4f (bound %.4f)",
                config.n, cluster_area, delta, report.upper_frequency, bound,
                report.lower_frequency, lower_bound)
    return report


def export_placement_csv(placement: NodePlacement, path: Path) -> Path:
    """Write the node list as CSV with header ``index,x,y``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        data = np.column_stack([np.arange(placement.n), placement.positions])
        np.savetxt(path, data, delimiter=',', header=PLACEMENT_CSV_HEADER, comments='',
                   fmt=['%d', '%.17g', '%.17g'])
    except OSError as e:
        raise ReportWriteError(f"cannot write {path}: {e}") from e
    return path


def export_matrix_binary(matrix: ChannelMatrix, path: Path) -> Path:
    """Dump the matrix row-major as little-endian complex64 pairs."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        matrix.entries.astype(MATRIX_DUMP_DTYPE).tofile(path)
    except OSError as e:
        raise ReportWriteError(f"cannot write {path}: {e}") from e
    return path


def max_distances_from(placement: NodePlacement, sources: Optional[List[int]] = None) -> np.ndarray:
    """
    Distance from each source to its farthest node.

    The farthest point of a set is always a vertex of its convex hull, so
    only hull vertices are scanned.
    """
    points = placement.positions
    if sources is None:
        sources = np.arange(placement.n)
    sources = np.asarray(sources)
    if placement.n >= 3:
        try:
            hull_points = points[ConvexHull(points).vertices]
        except QhullError:  # collinear input
            hull_points = points
    else:
        hull_points = points
    return cdist(points[sources], hull_points).max(axis=1)
