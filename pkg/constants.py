"""Application-wide constants and configuration."""

import math
from typing import List

# Network model (unit normalization: wavelength 1, G/(N0 W) = 1)
NOISE_POWER = 1.0
MIN_NODES = 2
COINCIDENT_DISTANCE = 1e-9

# Power iteration
DEFAULT_TOLERANCE = 1e-8
SOUNDNESS_TOLERANCE = 1e-6
ITERATION_CAP_FACTOR = 10
MIN_ITERATION_CAP = 1000

# Matrices above this size are applied matrix-free
DENSE_MATRIX_LIMIT = 4096
OPERATOR_CHUNK_ROWS = 512
MOMENT_DENSE_LIMIT = 2048

# Recursive bound
RECURSION_MIN_BLOCK = 64
RECURSION_EXPONENT_GAP = 1e-3
FIXED_POINT_TOLERANCE = 1e-6
FIXED_POINT_MAX_STEPS = 60
EXPONENT_LOW = 0.25
EXPONENT_HIGH = 0.5
NEIGHBOR_BLOCK_FACTOR = 9
FAR_BLOCKS_FORMULA = 'formula'
FAR_BLOCKS_MEASURED = 'measured'

# Calibrated constants, output of `losbroadcast calibrate` with its defaults
BLOCK_CONSTANT_C = 1.18
BLOCK_CALIBRATION_M = 256
BLOCK_CALIBRATION_SEEDS = 200
BLOCK_CALIBRATION_PERCENTILE = 99.0
GAIN_CONSTANT_K1 = 0.73
GAIN_CALIBRATION_PERCENTILE = 5.0
INTERFERENCE_CONSTANT_K2 = 0.039
INTERFERENCE_CALIBRATION_PERCENTILE = 99.0
INTERFERENCE_CALIBRATION_N = 2 ** 16
# Share of receivers whose interference must sit under the K2 bound
INTERFERENCE_BOUND_MIN_FRACTION = 0.98

# Back-and-forth scheme defaults
DEFAULT_C1 = 2.0
DEFAULT_C2 = 1.0
DEFAULT_EPSILON = 0.05
DEFAULT_THETA = 1.0
DEFAULT_TARGET_SIGNAL_POWER = 8.0
# Cycle bursts are sized so that the weakest phase-1 SNR reaches margin * N_C / M
DEFAULT_SNR_MARGIN = 4.0
DEFAULT_NOISE_TRIALS = 64
DEFAULT_SCHEME_SOURCES = 8
BURST_SLOT = 'slot'
BURST_CYCLE = 'cycle'
VALID_BURST_POLICIES: List[str] = [BURST_SLOT, BURST_CYCLE]
MAX_SCHEDULE_PASSES = 8
# Accumulated noise stays below NOISE_GROWTH_FACTOR * (t + 1)
NOISE_GROWTH_FACTOR = 4.0
MAX_ROUNDS = 200
MAX_FEASIBLE_N = 2 ** 30

DIRECTION_LEFT_TO_RIGHT = 'L->R'
DIRECTION_RIGHT_TO_LEFT = 'R->L'

# Method names in bound reports and sweeps
METHOD_POWER_ITER = 'power_iter'
METHOD_GERSHGORIN_M1 = 'gershgorin_M1'
METHOD_GERSHGORIN_BLOCK = 'gershgorin_block'
METHOD_RECURSIVE = 'recursive'
METHOD_MOMENT_PREFIX = 'moment_ell'
METHOD_SCHEME_RATE = 'scheme_rate'
METHOD_SCHEME_GAIN = 'scheme_gain'
METHOD_TDMA_RATE = 'tdma_rate'
METHOD_CAPACITY_BOUND = 'capacity_bound'
METHOD_THEOREM1_RATE = 'theorem1_rate'

NORM_METHODS: List[str] = [
    METHOD_POWER_ITER,
    METHOD_GERSHGORIN_M1,
    METHOD_GERSHGORIN_BLOCK,
    METHOD_RECURSIVE
]

RATE_METHODS: List[str] = [
    METHOD_SCHEME_RATE,
    METHOD_SCHEME_GAIN,
    METHOD_TDMA_RATE,
    METHOD_CAPACITY_BOUND,
    METHOD_THEOREM1_RATE
]

# Acceptance thresholds for fitted log-log slopes
SLOPE_THRESHOLDS = {
    METHOD_POWER_ITER: (0.4, 0.7),
    METHOD_SCHEME_GAIN: (0.3, math.inf)
}
MIN_SCHEME_N = 256
SCHEME_MIN_DECODABLE = 0.9
# Smallest scheme/TDMA rate ratio accepted at the largest checked n
SCHEME_TDMA_MIN_RATIO = 0.05

# CSV / report formats
PLACEMENT_CSV_HEADER = 'index,x,y'
BOUND_CSV_HEADER = 'n,seed,method,value,wall_time_ms'
SWEEP_CSV_HEADER = 'n,seed,method,value,wall_time_ms,status'
TRACE_CSV_HEADER = 'round,direction,signal_power,interference_power,noise_power,min_snr'
FIT_CSV_HEADER = 'method,slope,intercept,stderr,points,excluded,status'
STATUS_OK = 'ok'
STATUS_INFEASIBLE = 'infeasible'
STATUS_FAILED = 'failed'
STATUS_SKIPPED = 'skipped'
MATRIX_DUMP_DTYPE = '<c8'

# Sweep configuration
CONFIG_VERSION = 1
CONFIG_DIR_NAME = '.losbroadcast'
RUNS_DIR_NAME = 'runs'
SWEEP_CSV_NAME = 'sweep.csv'
FIT_CSV_NAME = 'fits.csv'
REPORT_SVG_NAME = 'report.svg'
CONFIG_SNAPSHOT_NAME = 'config.json'
ENV_OUTPUT_DIR = 'LOSBROADCAST_OUT'
ENV_THREADS = 'LOSBROADCAST_THREADS'
ENV_SLOW_TESTS = 'LOSBROADCAST_SLOW_TESTS'

# Logging
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

# Display formatting
SEPARATOR_LIGHT = '=' * 40
SEPARATOR_MEDIUM = '=' * 50
SEPARATOR_HEAVY = '=' * 60

CHECK_PASSED = '[PASS]'
CHECK_FAILED = '[FAIL]'
