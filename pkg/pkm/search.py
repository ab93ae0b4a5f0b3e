"""
Exact top-k maximum inner product search over product keys.

A product key set is never materialised: a query is split into two halves,
each half is scored against its own sub-key codebook, and the k x k
candidate pairs built from the two sub-selections are guaranteed to contain
the exact top-k product keys. Ties are broken by lower flat index everywhere,
which makes `product_search` and `flat_search` agree on selected indices.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence, Tuple, Union

import torch
from torch import Tensor

from .errors import InvalidArgumentError, InvalidInputError

logger = logging.getLogger(__name__)

IndexLike = Union[int, Tensor]


@dataclass
class OpCounter:
    """Scalar operation tally for instrumented searches."""
    mul_adds: int = 0
    adds: int = 0

    def reset(self) -> None:
        self.mul_adds = 0
        self.adds = 0

    def count(self, mul_adds: int = 0, adds: int = 0) -> None:
        self.mul_adds += int(mul_adds)
        self.adds += int(adds)


@dataclass(frozen=True)
class SubKeyCodebook:
    vectors: Tensor

    def __post_init__(self):
        if self.vectors.dim() != 2 or self.vectors.shape[0] < 1 or self.vectors.shape[1] < 1:
            raise InvalidArgumentError(
                f"sub-key codebook must be a non-empty 2-D array, got shape {tuple(self.vectors.shape)}"
            )
        if not torch.isfinite(self.vectors).all():
            raise InvalidInputError("sub-key codebook contains non-finite entries")

    @property
    def n_sub(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class ProductKeyIndex:
    codebook_1: SubKeyCodebook
    codebook_2: SubKeyCodebook

    def __post_init__(self):
        if self.codebook_1.dim != self.codebook_2.dim:
            raise InvalidArgumentError(
                f"codebooks disagree on sub-dimension: {self.codebook_1.dim} vs {self.codebook_2.dim}"
            )

    @classmethod
    def from_tensors(cls, sub_keys_1: Tensor, sub_keys_2: Tensor) -> "ProductKeyIndex":
        return cls(SubKeyCodebook(sub_keys_1), SubKeyCodebook(sub_keys_2))

    @classmethod
    def random(
        cls,
        n_sub: int,
        dq: int,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float32,
        n_sub_2: Optional[int] = None,
    ) -> "ProductKeyIndex":
        """Two codebooks drawn uniform in +-1/sqrt(dq/2)."""
        if dq < 2 or dq % 2:
            raise InvalidArgumentError(f"query dimension must be even and >= 2, got {dq}")
        half = dq // 2
        bound = 1.0 / math.sqrt(half)
        sizes = (n_sub, n_sub if n_sub_2 is None else n_sub_2)
        books = [
            torch.empty(size, half, dtype=dtype).uniform_(-bound, bound, generator=generator)
            for size in sizes
        ]
        return cls.from_tensors(*books)

    @property
    def key_count(self) -> int:
        return self.codebook_1.n_sub * self.codebook_2.n_sub

    @property
    def sub_dim(self) -> int:
        return self.codebook_1.dim

    @property
    def query_dim(self) -> int:
        return 2 * self.codebook_1.dim


@dataclass(frozen=True)
class TopKSelection:
    """Selected indices and their scores, best first. Shapes (..., k)."""
    indices: Tensor
    scores: Tensor

    @property
    def k(self) -> int:
        return self.indices.shape[-1]

    def tolist(self) -> Tuple[list, list]:
        return self.indices.tolist(), self.scores.tolist()


def top_k(scores: Union[Tensor, Sequence[float]], k: int) -> TopKSelection:
    """k largest scores along the last axis, ties resolved by lower index."""
    scores = torch.as_tensor(scores)
    if scores.dim() == 0:
        raise InvalidArgumentError("scores must have at least one axis")
    n = scores.shape[-1]
    if k < 1 or k > n:
        raise InvalidArgumentError(f"k must be in [1, {n}], got {k}")
    if not torch.isfinite(scores).all():
        raise InvalidInputError("scores contain non-finite values")
    # A stable descending sort keeps equal scores in ascending index order
    order = torch.sort(scores, dim=-1, descending=True, stable=True).indices[..., :k]
    return TopKSelection(order, scores.gather(-1, order))


def _top_k_by_flat_index(indices: Tensor, scores: Tensor, k: int) -> TopKSelection:
    """Top-k of candidates whose positions are not in flat-index order."""
    order = torch.argsort(indices, dim=-1)
    indices = indices.gather(-1, order)
    scores = scores.gather(-1, order)
    best = top_k(scores, k)
    return TopKSelection(indices.gather(-1, best.indices), best.scores)


def _check_query(query: Tensor, dim: int) -> Tensor:
    query = torch.as_tensor(query)
    if query.dim() == 0 or query.shape[-1] != dim:
        raise InvalidArgumentError(
            f"query dimension {tuple(query.shape)[-1:] or ()} does not match key dimension {dim}"
        )
    if not torch.isfinite(query).all():
        raise InvalidInputError("query contains non-finite values")
    return query


def _query_count(query: Tensor) -> int:
    return int(query.numel() // query.shape[-1])


def _stream_top_k(
    query: Tensor,
    chunks: Iterable[Tuple[int, Tensor]],
    k: int,
    counter: Optional[OpCounter] = None,
) -> TopKSelection:
    """Merge partial top-k lists over (offset, key block) chunks."""
    best: Optional[TopKSelection] = None
    seen = 0
    for offset, block in chunks:
        scores = query @ block.T
        if counter is not None:
            counter.count(mul_adds=_query_count(query) * block.shape[0] * block.shape[1])
        local = top_k(scores, min(k, block.shape[0]))
        chunk = TopKSelection(local.indices + offset, local.scores)
        seen += block.shape[0]
        if best is None:
            best = chunk
        else:
            best = _top_k_by_flat_index(
                torch.cat([best.indices, chunk.indices], dim=-1),
                torch.cat([best.scores, chunk.scores], dim=-1),
                min(k, best.k + chunk.k),
            )
    if best is None or seen < k:
        raise InvalidArgumentError(f"k must be in [1, {seen}], got {k}")
    return best


def flat_search(
    query: Tensor,
    keys: Tensor,
    k: int,
    counter: Optional[OpCounter] = None,
    chunk_size: Optional[int] = None,
) -> TopKSelection:
    """Exhaustive inner-product top-k over an explicit key matrix (n, dq)."""
    keys = torch.as_tensor(keys)
    if keys.dim() != 2:
        raise InvalidArgumentError(f"keys must be 2-D, got shape {tuple(keys.shape)}")
    query = _check_query(query, keys.shape[1])
    n = keys.shape[0]
    if k < 1 or k > n:
        raise InvalidArgumentError(f"k must be in [1, {n}], got {k}")
    if not torch.isfinite(keys).all():
        raise InvalidInputError("keys contain non-finite values")
    if chunk_size is not None and chunk_size < n:
        chunks = ((start, keys[start:start + chunk_size]) for start in range(0, n, chunk_size))
        return _stream_top_k(query, chunks, k, counter)
    if counter is not None:
        counter.count(mul_adds=_query_count(query) * n * keys.shape[1])
    return top_k(query @ keys.T, k)


def product_search(
    query: Tensor,
    index: ProductKeyIndex,
    k: int,
    counter: Optional[OpCounter] = None,
) -> TopKSelection:
    """Exact top-k product keys for one query (dq,) or a batch (..., dq)."""
    query = _check_query(query, index.query_dim)
    n1, n2 = index.codebook_1.n_sub, index.codebook_2.n_sub
    if k < 1 or k > min(n1, n2):
        raise InvalidArgumentError(
            f"k={k} cannot form a candidate set from codebooks of size {n1} and {n2}"
        )
    half = index.sub_dim
    q1, q2 = query[..., :half], query[..., half:]

    sub_1 = top_k(q1 @ index.codebook_1.vectors.T, k)
    sub_2 = top_k(q2 @ index.codebook_2.vectors.T, k)

    # k x k candidates, scored by re-adding sub-scores
    cand_scores = sub_1.scores[..., :, None] + sub_2.scores[..., None, :]
    cand_indices = sub_1.indices[..., :, None] * n2 + sub_2.indices[..., None, :]
    cand_scores = cand_scores.flatten(-2)
    cand_indices = cand_indices.flatten(-2)

    if counter is not None:
        queries = _query_count(query)
        counter.count(mul_adds=queries * (n1 + n2) * half, adds=queries * k * k)
    return _top_k_by_flat_index(cand_indices, cand_scores, k)


def compose_index(i: IndexLike, j: IndexLike, index: ProductKeyIndex) -> IndexLike:
    """Row-major flat number of the product key (c_i, c'_j)."""
    n1, n2 = index.codebook_1.n_sub, index.codebook_2.n_sub
    if not (_in_range(i, n1) and _in_range(j, n2)):
        raise InvalidArgumentError(f"sub-key indices out of range for codebooks of size {n1}, {n2}")
    return i * n2 + j


def decompose_index(flat: IndexLike, index: ProductKeyIndex) -> Tuple[IndexLike, IndexLike]:
    if not _in_range(flat, index.key_count):
        raise InvalidArgumentError(f"flat index out of range [0, {index.key_count})")
    n2 = index.codebook_2.n_sub
    return flat // n2, flat % n2


def _in_range(value: IndexLike, upper: int) -> bool:
    if isinstance(value, Tensor):
        return bool(((value >= 0) & (value < upper)).all())
    return 0 <= value < upper


def materialize_keys(index: ProductKeyIndex) -> Tensor:
    """All |K| product keys as an explicit (|K|, dq) matrix, row-major."""
    c1, c2 = index.codebook_1.vectors, index.codebook_2.vectors
    return torch.cat([c1.repeat_interleave(c2.shape[0], dim=0), c2.repeat(c1.shape[0], 1)], dim=1)


def iter_product_key_chunks(index: ProductKeyIndex, chunk_rows: int) -> Iterator[Tuple[int, Tensor]]:
    """Materialise product keys block by block as (flat offset, keys)."""
    c1, c2 = index.codebook_1.vectors, index.codebook_2.vectors
    n2 = c2.shape[0]
    step = max(1, chunk_rows // n2)
    for start in range(0, c1.shape[0], step):
        block = c1[start:start + step]
        yield start * n2, torch.cat(
            [block.repeat_interleave(n2, dim=0), c2.repeat(block.shape[0], 1)], dim=1
        )


def exhaustive_product_search(
    query: Tensor,
    index: ProductKeyIndex,
    k: int,
    chunk_rows: int = 65536,
    counter: Optional[OpCounter] = None,
) -> TopKSelection:
    """Flat oracle over the product key set without materialising it at once."""
    query = _check_query(query, index.query_dim)
    if k < 1 or k > index.key_count:
        raise InvalidArgumentError(f"k must be in [1, {index.key_count}], got {k}")
    return _stream_top_k(query, iter_product_key_chunks(index, chunk_rows), k, counter)
