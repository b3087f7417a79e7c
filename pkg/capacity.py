"""Cut-set upper bound, TDMA baseline and predicted scheme rate."""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from constants import SOUNDNESS_TOLERANCE
from errors import InvalidArgumentError
from network_model import NetworkConfig, NodePlacement, max_distances_from
from spectral import NormResult

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RateReport:
    """Aggregate rates of one network instance, in bits/s/Hz."""

    n: int
    P: float
    upper_bound: float
    tdma_rate: float
    scheme_rate: float
    optimistic_rate: Optional[float] = None

    def __post_init__(self):
        for name in ('upper_bound', 'tdma_rate', 'scheme_rate'):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be non-negative")

    @property
    def per_user_rate(self) -> float:
        """r_n = R_n / n."""
        return self.scheme_rate / self.n

    @property
    def gain_over_tdma(self) -> float:
        if self.tdma_rate == 0:
            return math.inf
        return self.scheme_rate / self.tdma_rate

    def sandwich_holds(self, tolerance: float = SOUNDNESS_TOLERANCE) -> bool:
        """Both the scheme and the TDMA rate stay below the cut-set bound."""
        limit = self.upper_bound * (1 + tolerance)
        return self.scheme_rate <= limit and self.tdma_rate <= limit


def capacity_upper_bound(P: float, norm: Union[NormResult, float]) -> float:
    """
    Cut-set bound C_n <= P ||H||^2.

    Args:
        P: Power per node, > 0
        norm: ||H|| as a NormResult or a plain (possibly certified) value
    """
    if not P > 0:
        raise InvalidArgumentError("P must be positive")
    value = norm.value if isinstance(norm, NormResult) else float(norm)
    return P * value ** 2


def tdma_baseline_rate(config: NetworkConfig, placement: NodePlacement,
                       sources: Optional[Sequence[int]] = None) -> float:
    """
    Rate of plain TDMA where each source bursts n P in its own slot.

    log2(1 + n P / r_max^2) is evaluated for every source (r_max is its
    farthest receiver) and the worst source sets the rate.

    Args:
        config: Network size and power
        placement: Node positions
        sources: Restrict the minimum to these sources (default: all nodes)
    """
    r_max = max_distances_from(placement, sources)
    rates = np.log1p(config.n * config.P / r_max ** 2) / math.log(2)
    rate = float(rates.min())
    logger.debug("TDMA baseline %.6g (worst r_max %.4g)", rate, float(r_max.max()))
    return rate


def theorem1_predicted_rate(n: int, P: float, epsilon: float) -> float:
    """
    Reference curve n^(1/2 - eps) P of the back-and-forth scheme.

    Powers above n^(-1/2) are clamped to n^(-1/2); extra power buys nothing
    once the final SNR is of order one.
    """
    if not epsilon > 0:
        raise InvalidArgumentError("epsilon must be positive")
    if not P > 0:
        raise InvalidArgumentError("P must be positive")
    return n ** (0.5 - epsilon) * min(P, n ** -0.5)
