import logging
import math
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .errors import InvalidArgumentError, PreconditionError

logger = logging.getLogger(__name__)


@dataclass
class AccessAccumulator:
    """Running sum z' of memory access weights over a dataset."""
    n_keys: int
    z_prime: np.ndarray = None
    examples_seen: int = 0

    def __post_init__(self):
        if self.n_keys < 1:
            raise InvalidArgumentError(f"accumulator needs at least one slot, got {self.n_keys}")
        if self.z_prime is None:
            self.z_prime = np.zeros(self.n_keys, dtype=np.float64)

    def deposit(self, indices: np.ndarray, weights: np.ndarray, examples: int) -> "AccessAccumulator":
        indices = np.asarray(indices, dtype=np.int64).ravel()
        weights = np.asarray(weights, dtype=np.float64).ravel()
        if indices.shape != weights.shape:
            raise InvalidArgumentError("indices and weights must have the same number of entries")
        if indices.size and (indices.min() < 0 or indices.max() >= self.n_keys):
            raise InvalidArgumentError(f"access index out of range [0, {self.n_keys})")
        if np.any(weights < 0):
            raise InvalidArgumentError("access weights must be non-negative")
        np.add.at(self.z_prime, indices, weights)
        self.examples_seen += int(examples)
        return self

    def merge(self, other: "AccessAccumulator") -> "AccessAccumulator":
        if other.n_keys != self.n_keys:
            raise InvalidArgumentError(f"cannot merge accumulators over {self.n_keys} and {other.n_keys} slots")
        return AccessAccumulator(
            self.n_keys, self.z_prime + other.z_prime, self.examples_seen + other.examples_seen
        )


def accumulate_access(acc: AccessAccumulator, record) -> AccessAccumulator:
    """Add every example's per-head softmax weights at the selected slots."""
    indices = record.indices.detach().cpu().numpy()
    weights = record.weights.detach().cpu().numpy()
    return acc.deposit(indices, weights, examples=indices.shape[0])


def usage(acc: AccessAccumulator) -> float:
    """Percentage of memory slots with a nonzero accumulated weight."""
    if acc.examples_seen <= 0:
        raise PreconditionError("usage of an empty accumulator is undefined")
    return 100.0 * np.count_nonzero(acc.z_prime) / acc.n_keys


def kl_uniform(acc: AccessAccumulator) -> float:
    """KL divergence (nats) between normalised accesses and the uniform distribution."""
    total = acc.z_prime.sum()
    if total <= 0:
        raise PreconditionError("KL of an all-zero accumulator is undefined")
    z = acc.z_prime[acc.z_prime > 0] / total
    return max(0.0, math.log(acc.n_keys) + float(np.sum(z * np.log(z))))


def perplexity(total_nll: float, token_count: int) -> float:
    if token_count <= 0:
        raise InvalidArgumentError(f"token count must be positive, got {token_count}")
    return math.exp(total_nll / token_count)


@dataclass
class AccessMonitor:
    """Per-layer access diagnostics collected while a memory runs in eval."""
    accumulator: AccessAccumulator
    overlap_sum: float = 0.0  # per-input overlap summed over inputs
    overlap_examples: int = 0

    @classmethod
    def for_keys(cls, n_keys: int) -> "AccessMonitor":
        return cls(AccessAccumulator(n_keys))

    def observe(self, record) -> None:
        from .memory import head_overlap

        accumulate_access(self.accumulator, record)
        if len(record.heads) > 1:
            examples = record.x.shape[0]
            self.overlap_sum += head_overlap(record) * examples
            self.overlap_examples += examples

    @property
    def overlap(self) -> float:
        return self.overlap_sum / self.overlap_examples if self.overlap_examples else 0.0

    def report(self) -> Dict[str, float]:
        return {
            "usage": usage(self.accumulator),
            "kl": kl_uniform(self.accumulator),
            "overlap": self.overlap,
        }
