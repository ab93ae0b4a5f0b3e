"""
Product-key memory layer.

Each head owns a linear query network (optionally batch-normalised) and its
own pair of sub-key codebooks; all heads read from one shared value table.
The forward pass, the backward pass and the sparse value gradients are
written out explicitly so they can be checked against finite differences;
`ProductKeyMemory.forward` plugs them into autograd for use inside a model.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple

import torch
from torch import Tensor, nn
from torch.autograd.function import once_differentiable

from .config import BN_EPSILON, BN_MOMENTUM
from .errors import DegenerateBatchError, InvalidArgumentError, InvalidInputError
from .search import (
    OpCounter,
    ProductKeyIndex,
    TopKSelection,
    decompose_index,
    flat_search,
    materialize_keys,
    product_search,
)

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]
KeyMode = Literal["product", "flat"]


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON
    mode: Mode = "train"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise InvalidArgumentError(f"batch norm epsilon must be positive, got {self.epsilon}")


@dataclass
class QueryNetwork:
    weight: Tensor  # (dq, d)
    bias: Tensor  # (dq,)
    bn: Optional[BatchNormState] = None

    def __post_init__(self):
        if self.weight.dim() != 2 or self.bias.shape != self.weight.shape[:1]:
            raise InvalidArgumentError(
                f"query network shapes disagree: weight {tuple(self.weight.shape)}, bias {tuple(self.bias.shape)}"
            )
        if self.weight.shape[0] % 2:
            raise InvalidArgumentError(f"query dimension must be even, got {self.weight.shape[0]}")

    @property
    def dq(self) -> int:
        return self.weight.shape[0]

    @property
    def d(self) -> int:
        return self.weight.shape[1]


@dataclass
class _QueryCache:
    x_hat: Optional[Tensor]
    inv_std: Optional[Tensor]
    query: Tensor


def _query_forward(x: Tensor, net: QueryNetwork, mode: Mode) -> _QueryCache:
    if net.bn is not None and net.bn.mode != mode:
        raise InvalidArgumentError(f"mode {mode!r} disagrees with batch norm mode {net.bn.mode!r}")
    z = x @ net.weight.T + net.bias
    bn = net.bn
    if bn is None:
        return _QueryCache(x_hat=None, inv_std=None, query=z)

    if mode == "train":
        n = z.shape[0]
        if n < 2:
            raise DegenerateBatchError("train-mode batch norm needs at least two rows")
        mean = z.mean(0)
        var = z.var(0, unbiased=False)
        inv_std = torch.rsqrt(var + bn.epsilon)
        x_hat = (z - mean) * inv_std
        with torch.no_grad():
            bn.running_mean.mul_(1 - bn.momentum).add_(mean, alpha=bn.momentum)
            bn.running_var.mul_(1 - bn.momentum).add_(var * n / (n - 1), alpha=bn.momentum)
    else:
        inv_std = torch.rsqrt(bn.running_var + bn.epsilon)
        x_hat = (z - bn.running_mean) * inv_std
    return _QueryCache(x_hat=x_hat, inv_std=inv_std, query=bn.gamma * x_hat + bn.beta)


def query_forward(x: Tensor, net: QueryNetwork, mode: Mode = "train") -> Tensor:
    """q(x) = BN(Wx + b), or Wx + b without batch norm."""
    x = torch.as_tensor(x, dtype=net.weight.dtype)
    single = x.dim() == 1
    batch = x.unsqueeze(0) if single else x
    if batch.dim() != 2 or batch.shape[1] != net.d:
        raise InvalidArgumentError(f"expected inputs of dimension {net.d}, got shape {tuple(x.shape)}")
    if not torch.isfinite(batch).all():
        raise InvalidInputError("query network input contains non-finite values")
    query = _query_forward(batch, net, mode).query
    return query[0] if single else query


def _query_backward(
    grad_query: Tensor, x: Tensor, net: QueryNetwork, cache: _QueryCache, mode: Mode
) -> Tuple[Tensor, Tensor, Tensor, Optional[Tensor], Optional[Tensor]]:
    bn = net.bn
    grad_gamma = grad_beta = None
    if bn is None:
        grad_z = grad_query
    else:
        grad_gamma = (grad_query * cache.x_hat).sum(0)
        grad_beta = grad_query.sum(0)
        g = grad_query * bn.gamma
        if mode == "train":
            n = g.shape[0]
            grad_z = cache.inv_std / n * (n * g - g.sum(0) - cache.x_hat * (g * cache.x_hat).sum(0))
        else:
            grad_z = g * cache.inv_std
    return grad_z @ net.weight, grad_z.T @ x, grad_z.sum(0), grad_gamma, grad_beta


@dataclass
class HeadRecord:
    net: QueryNetwork
    cache: _QueryCache
    selection: TopKSelection
    sub_indices: Optional[Tuple[Tensor, Tensor]]
    weights: Tensor  # (B, k)

    @property
    def query(self) -> Tensor:
        return self.cache.query


@dataclass
class MemoryForwardRecord:
    layer: "ProductKeyMemory"
    x: Tensor
    mode: Mode
    heads: List[HeadRecord]

    @property
    def indices(self) -> Tensor:
        """Selected flat slots, shape (B, H, k)."""
        return torch.stack([head.selection.indices for head in self.heads], dim=1)

    @property
    def weights(self) -> Tensor:
        return torch.stack([head.weights for head in self.heads], dim=1)


@dataclass
class MemoryGradients:
    x: Tensor
    query_weight: Tensor
    query_bias: Tensor
    bn_gamma: Optional[Tensor]
    bn_beta: Optional[Tensor]
    keys: Tensor
    value_rows: Tensor  # unique touched rows, ascending
    value_grads: Tensor  # (rows, d)
    n_keys: int

    def values_sparse(self) -> Tensor:
        return torch.sparse_coo_tensor(
            self.value_rows.unsqueeze(0),
            self.value_grads,
            (self.n_keys, self.value_grads.shape[1]),
            check_invariants=False,
            is_coalesced=True,
        )

    def values_dense(self) -> Tensor:
        dense = self.value_grads.new_zeros(self.n_keys, self.value_grads.shape[1])
        dense[self.value_rows] = self.value_grads
        return dense


def _softmax(scores: Tensor) -> Tensor:
    shifted = torch.exp(scores - scores.max(dim=-1, keepdim=True).values)
    return shifted / shifted.sum(dim=-1, keepdim=True)


def memory_forward(
    x: Tensor,
    layer: "ProductKeyMemory",
    mode: Optional[Mode] = None,
    exhaustive: bool = False,
    counter: Optional[OpCounter] = None,
) -> Tuple[Tensor, MemoryForwardRecord]:
    """m(x) = sum over heads of softmax-weighted selected values.

    With `exhaustive=True` product-key heads are searched with `flat_search`
    over their materialised key matrix instead of `product_search`.
    """
    if mode is None:
        mode = "train" if layer.training else "eval"
    if x.dim() != 2 or x.shape[1] != layer.d:
        raise InvalidArgumentError(f"expected a batch of {layer.d}-dim inputs, got shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise InvalidInputError("memory input contains non-finite values")

    output = x.new_zeros(x.shape[0], layer.d)
    heads = []
    for h in range(layer.heads):
        net = layer.query_network(h, mode)
        cache = _query_forward(x, net, mode)
        if not torch.isfinite(cache.query).all():
            raise InvalidInputError(f"head {h} produced a non-finite query")

        sub_indices = None
        if layer.key_mode == "product":
            index = layer.index(h)
            if exhaustive:
                selection = flat_search(cache.query, materialize_keys(index), layer.k, counter)
            else:
                selection = product_search(cache.query, index, layer.k, counter)
            sub_indices = decompose_index(selection.indices, index)
        else:
            selection = flat_search(cache.query, layer.keys[h], layer.k, counter)

        weights = _softmax(selection.scores)
        output += torch.einsum("bk,bkd->bd", weights, layer.values[selection.indices])
        heads.append(HeadRecord(net, cache, selection, sub_indices, weights))
    return output, MemoryForwardRecord(layer=layer, x=x, mode=mode, heads=heads)


def memory_backward(record: MemoryForwardRecord, grad_out: Tensor) -> MemoryGradients:
    """Exact gradients through the selected scores; selection is constant."""
    layer, x = record.layer, record.x
    if grad_out.shape != (x.shape[0], layer.d):
        raise InvalidArgumentError(
            f"gradient shape {tuple(grad_out.shape)} does not match output shape {(x.shape[0], layer.d)}"
        )

    grad_x = torch.zeros_like(x)
    grad_weight = torch.zeros_like(layer.query_weight)
    grad_bias = torch.zeros_like(layer.query_bias)
    grad_gamma = torch.zeros_like(layer.bn_gamma) if layer.batch_norm else None
    grad_beta = torch.zeros_like(layer.bn_beta) if layer.batch_norm else None
    grad_keys = torch.zeros_like(layer.keys)
    rows, row_grads = [], []

    for h, head in enumerate(record.heads):
        indices, weights, query = head.selection.indices, head.weights, head.query
        selected = layer.values[indices]
        grad_w = torch.einsum("bd,bkd->bk", grad_out, selected)
        grad_scores = weights * (grad_w - (weights * grad_w).sum(-1, keepdim=True))

        rows.append(indices.reshape(-1))
        row_grads.append((weights.unsqueeze(-1) * grad_out.unsqueeze(1)).reshape(-1, layer.d))

        if layer.key_mode == "product":
            half = layer.dq // 2
            i, j = head.sub_indices
            sub_1, sub_2 = layer.keys[h, 0], layer.keys[h, 1]
            grad_query = torch.cat(
                [
                    torch.einsum("bk,bkh->bh", grad_scores, sub_1[i]),
                    torch.einsum("bk,bkh->bh", grad_scores, sub_2[j]),
                ],
                dim=-1,
            )
            weighted = grad_scores.unsqueeze(-1)
            grad_keys[h, 0].index_add_(0, i.reshape(-1), (weighted * query[:, None, :half]).reshape(-1, half))
            grad_keys[h, 1].index_add_(0, j.reshape(-1), (weighted * query[:, None, half:]).reshape(-1, half))
        else:
            grad_query = torch.einsum("bk,bkq->bq", grad_scores, layer.keys[h][indices])
            grad_keys[h].index_add_(
                0, indices.reshape(-1), (grad_scores.unsqueeze(-1) * query[:, None, :]).reshape(-1, layer.dq)
            )

        dx, dw, db, dgamma, dbeta = _query_backward(grad_query, x, head.net, head.cache, record.mode)
        grad_x += dx
        grad_weight[h] = dw
        grad_bias[h] = db
        if grad_gamma is not None:
            grad_gamma[h] = dgamma
            grad_beta[h] = dbeta

    touched, inverse = torch.unique(torch.cat(rows), return_inverse=True)
    value_grads = x.new_zeros(touched.shape[0], layer.d).index_add_(0, inverse, torch.cat(row_grads))
    return MemoryGradients(
        x=grad_x,
        query_weight=grad_weight,
        query_bias=grad_bias,
        bn_gamma=grad_gamma,
        bn_beta=grad_beta,
        keys=grad_keys,
        value_rows=touched,
        value_grads=value_grads,
        n_keys=layer.n_keys,
    )


def head_overlap(record: MemoryForwardRecord) -> float:
    """Mean per-input share of distinct selected slots picked by two or more heads."""
    flat = record.indices.reshape(record.x.shape[0], -1).sort(dim=-1).values
    repeat = flat[:, 1:] == flat[:, :-1]
    first_repeat = repeat.clone()
    first_repeat[:, 1:] &= ~repeat[:, :-1]
    distinct = flat.shape[1] - repeat.sum(-1)
    return float((first_repeat.sum(-1).double() / distinct.double()).mean())


class _MemoryFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, layer, query_weight, query_bias, bn_gamma, bn_beta, keys, values):
        output, record = memory_forward(x, layer)
        ctx.record = record
        if layer.monitor is not None:
            layer.monitor.observe(record)
        return output

    @staticmethod
    @once_differentiable
    def backward(ctx, grad_out):
        grads = memory_backward(ctx.record, grad_out.contiguous())
        ctx.record = None
        return (
            grads.x,
            None,
            grads.query_weight,
            grads.query_bias,
            grads.bn_gamma,
            grads.bn_beta,
            grads.keys,
            grads.values_sparse(),
        )


class ProductKeyMemory(nn.Module):
    """Multi-head key-value memory; a drop-in replacement for a transformer FFN.

    Arguments
    ---------
        d: int, input and value dimension
        dq: int, query dimension (even)
        n_sub: int, sub-keys per codebook, giving n_sub**2 memory slots
        heads: int, number of memory heads sharing the value table
        k: int, slots selected per head
        batch_norm: bool, batch-normalise queries
        key_mode: "product" for sub-key codebooks, "flat" for explicit keys
    """

    def __init__(
        self,
        d: int,
        dq: int,
        n_sub: int,
        heads: int = 4,
        k: int = 32,
        batch_norm: bool = True,
        key_mode: KeyMode = "product",
        generator: Optional[torch.Generator] = None,
        dtype: Optional[torch.dtype] = None,
    ):
        super().__init__()
        if d < 1 or heads < 1 or n_sub < 1:
            raise InvalidArgumentError(f"invalid memory shape d={d}, heads={heads}, n_sub={n_sub}")
        if dq < 2 or dq % 2:
            raise InvalidArgumentError(f"query dimension must be even and >= 2, got {dq}")
        if key_mode not in ("product", "flat"):
            raise InvalidArgumentError(f"unknown key mode {key_mode!r}")
        if not 1 <= k <= n_sub:
            raise InvalidArgumentError(f"k must be in [1, {n_sub}], got {k}")

        self.d, self.dq, self.n_sub = d, dq, n_sub
        self.heads, self.k = heads, k
        self.batch_norm = batch_norm
        self.key_mode = key_mode
        self.n_keys = n_sub * n_sub
        self.momentum, self.epsilon = BN_MOMENTUM, BN_EPSILON
        self.monitor = None

        factory = {"dtype": dtype or torch.get_default_dtype()}
        self.query_weight = nn.Parameter(torch.empty(heads, dq, d, **factory))
        self.query_bias = nn.Parameter(torch.empty(heads, dq, **factory))
        if batch_norm:
            self.bn_gamma = nn.Parameter(torch.ones(heads, dq, **factory))
            self.bn_beta = nn.Parameter(torch.zeros(heads, dq, **factory))
            self.register_buffer("running_mean", torch.zeros(heads, dq, **factory))
            self.register_buffer("running_var", torch.ones(heads, dq, **factory))
        else:
            self.register_parameter("bn_gamma", None)
            self.register_parameter("bn_beta", None)
        if key_mode == "product":
            self.keys = nn.Parameter(torch.empty(heads, 2, n_sub, dq // 2, **factory))
        else:
            self.keys = nn.Parameter(torch.empty(heads, self.n_keys, dq, **factory))
        self.values = nn.Parameter(torch.empty(self.n_keys, d, **factory))
        self.reset_parameters(generator)

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        fan_in = 1.0 / math.sqrt(self.d)
        key_bound = 1.0 / math.sqrt(self.dq // 2 if self.key_mode == "product" else self.dq)
        for h in range(self.heads):
            self.query_weight[h].uniform_(-fan_in, fan_in, generator=generator)
            self.query_bias[h].uniform_(-fan_in, fan_in, generator=generator)
            self.keys[h].uniform_(-key_bound, key_bound, generator=generator)
        self.values.uniform_(-fan_in, fan_in, generator=generator)
        if self.batch_norm:
            self.bn_gamma.fill_(1.0)
            self.bn_beta.zero_()
            self.running_mean.zero_()
            self.running_var.fill_(1.0)

    def query_network(self, head: int, mode: Mode = "train") -> QueryNetwork:
        bn = None
        if self.batch_norm:
            bn = BatchNormState(
                gamma=self.bn_gamma[head],
                beta=self.bn_beta[head],
                running_mean=self.running_mean[head],
                running_var=self.running_var[head],
                momentum=self.momentum,
                epsilon=self.epsilon,
                mode=mode,
            )
        return QueryNetwork(self.query_weight[head], self.query_bias[head], bn)

    def index(self, head: int) -> ProductKeyIndex:
        if self.key_mode != "product":
            raise InvalidArgumentError("flat-key memories have no product index")
        return ProductKeyIndex.from_tensors(self.keys[head, 0], self.keys[head, 1])

    def value_parameters(self) -> List[nn.Parameter]:
        return [self.values]

    def forward(self, x: Tensor) -> Tensor:
        shape = x.shape
        flat = x.reshape(-1, self.d)
        output = _MemoryFunction.apply(
            flat, self, self.query_weight, self.query_bias,
            self.bn_gamma, self.bn_beta, self.keys, self.values,
        )
        return output.reshape(shape)

    def extra_repr(self) -> str:
        return (
            f"d={self.d}, dq={self.dq}, n_sub={self.n_sub}, n_keys={self.n_keys}, heads={self.heads}, "
            f"k={self.k}, batch_norm={self.batch_norm}, key_mode={self.key_mode}"
        )


def init_memory(
    seed: int,
    d: int,
    dq: int,
    n_sub: int,
    heads: int,
    k: int,
    batch_norm: bool = True,
    key_mode: KeyMode = "product",
    dtype: torch.dtype = torch.float32,
) -> ProductKeyMemory:
    """Deterministically initialised memory layer."""
    generator = torch.Generator().manual_seed(seed)
    return ProductKeyMemory(
        d, dq, n_sub, heads=heads, k=k, batch_norm=batch_norm,
        key_mode=key_mode, generator=generator, dtype=dtype,
    )
