"""
Search throughput benchmark for product keys and flat keys.

Throughput is measured for the memory key search in isolation, in queries per
second, where one query is scored against every head. Product rows are also
checked for exactness against a streaming flat oracle.
"""

import logging
import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Union

import torch
from joblib import Parallel, delayed
from torch import Tensor

from .config import worker_count
from .errors import FlatCeilingError
from .schemas import BenchConfig, BenchReport, BenchRow, parse_config
from .search import (
    OpCounter,
    ProductKeyIndex,
    exhaustive_product_search,
    flat_search,
    materialize_keys,
    product_search,
)

logger = logging.getLogger(__name__)


@contextmanager
def torch_threads(n: int) -> Iterator[None]:
    previous = torch.get_num_threads()
    torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


@dataclass
class _Workload:
    n_sub: int
    indexes: List[ProductKeyIndex]
    flat_keys: Optional[List[Tensor]]
    queries: Tensor  # (Q, dq)

    @property
    def n_keys(self) -> int:
        return self.n_sub * self.n_sub


def _search_block(workload: _Workload, block: Tensor, mode: str, k: int) -> None:
    for h, index in enumerate(workload.indexes):
        if mode == "product":
            product_search(block, index, k)
        else:
            flat_search(block, workload.flat_keys[h], k)


def _time_search(workload: _Workload, mode: str, k: int, block: int, threads: int, repeats: int) -> float:
    """Median wall time of one pass over all queries, after a warm-up pass."""
    blocks = list(workload.queries.split(block))

    def run_pass():
        if threads == 1:
            for b in blocks:
                _search_block(workload, b, mode, k)
        else:
            Parallel(n_jobs=threads, backend="threading")(
                delayed(_search_block)(workload, b, mode, k) for b in blocks
            )

    with torch_threads(1), torch.no_grad():
        run_pass()
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            run_pass()
            times.append(time.perf_counter() - start)
    return statistics.median(times)


def count_ops(workload: _Workload, mode: str, k: int) -> OpCounter:
    """Scalar operations for a single query across all heads."""
    counter = OpCounter()
    query = workload.queries[:1]
    for h, index in enumerate(workload.indexes):
        if mode == "product":
            product_search(query, index, k, counter=counter)
        else:
            flat_search(query, workload.flat_keys[h], k, counter=counter)
    return counter


def check_exactness(indexes: List[ProductKeyIndex], queries: Tensor, k: int) -> bool:
    """True when product search selects exactly the oracle's indices for every query and head.

    Compared in double precision so that summation order cannot flip near-ties.
    """
    queries = queries.double()
    for index in indexes:
        index = ProductKeyIndex.from_tensors(index.codebook_1.vectors.double(), index.codebook_2.vectors.double())
        fast = product_search(queries, index, k)
        oracle = exhaustive_product_search(queries, index, k)
        if not torch.equal(fast.indices, oracle.indices):
            mismatches = int((fast.indices != oracle.indices).any(dim=-1).sum())
            logger.error(f"Product search disagrees with the oracle on {mismatches} queries at |K|={index.key_count}")
            return False
    return True


def _modes_for(config: BenchConfig, n_keys: int) -> List[str]:
    modes = ["product", "flat"] if config.mode == "both" else [config.mode]
    if "flat" in modes and n_keys > config.flat_ceiling:
        if config.mode == "flat":
            raise FlatCeilingError(
                f"flat search over {n_keys} keys exceeds the ceiling of {config.flat_ceiling}; "
                f"raise PKM_FLAT_CEILING or use --mode product"
            )
        logger.warning(f"Skipping flat search at |K|={n_keys}: above the ceiling of {config.flat_ceiling}")
        modes.remove("flat")
    return modes


def run_bench(config: Union[BenchConfig, Dict[str, Any]], progress: bool = False) -> BenchReport:
    config = parse_config(BenchConfig, config)
    thread_counts = config.threads or sorted({1, worker_count()})
    generator = torch.Generator().manual_seed(config.seed)
    report = BenchReport(exactness_queries=config.exactness_queries)

    # Validate every size before spending time on any of them
    plans = [(n_sub, _modes_for(config, n_sub * n_sub)) for n_sub in config.subkeys]
    for n_sub, modes in plans:
        indexes = [
            ProductKeyIndex.random(n_sub, config.dq, generator=generator, dtype=config.dtype)
            for _ in range(config.heads)
        ]
        queries = torch.randn(config.queries, config.dq, generator=generator, dtype=config.dtype)
        flat_keys = [materialize_keys(index) for index in indexes] if "flat" in modes else None
        workload = _Workload(n_sub, indexes, flat_keys, queries)

        exact = None
        if "product" in modes:
            samples = torch.randn(config.exactness_queries, config.dq, generator=generator, dtype=config.dtype)
            exact = check_exactness(indexes, samples, config.k)

        for mode in modes:
            ops = count_ops(workload, mode, config.k)
            for threads in thread_counts:
                seconds = _time_search(workload, mode, config.k, config.query_block, threads, config.repeats)
                row = BenchRow(
                    n_sub=n_sub,
                    n_keys=workload.n_keys,
                    dq=config.dq,
                    k=config.k,
                    heads=config.heads,
                    mode=mode,
                    threads=threads,
                    queries_per_sec=config.queries / max(seconds, 1e-9),
                    mul_adds=ops.mul_adds,
                    adds=ops.adds,
                    exact=exact if mode == "product" else None,
                )
                report.rows.append(row)
                if progress:
                    logger.info(
                        f"|K|={row.n_keys} mode={mode} threads={threads} "
                        f"qps={row.queries_per_sec:.0f} exact={row.exact}"
                    )
    return report
