"""
Optimizers for memory training.

Memory values receive sparse gradients and are updated with a lazy Adam:
only rows touched in the current step have their moments and step counters
advanced. Everything else uses a dense Adam on an inverse-sqrt warmup
schedule.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Tuple

import torch
from torch import Tensor

from .config import ADAM_BETAS, LR_VALUES, VALUE_ADAM_EPS
from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass
class ValueTable:
    values: Tensor  # (|K|, d)
    exp_avg: Tensor
    exp_avg_sq: Tensor
    steps: Tensor  # (|K|,) int64, one Adam step counter per row

    @classmethod
    def zeros_like(cls, values: Tensor) -> "ValueTable":
        return cls(
            values=values,
            exp_avg=torch.zeros_like(values),
            exp_avg_sq=torch.zeros_like(values),
            steps=torch.zeros(values.shape[0], dtype=torch.int64, device=values.device),
        )

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]


def sparse_value_update(
    table: ValueTable,
    rows: Tensor,
    grads: Tensor,
    lr: float = LR_VALUES,
    betas: Tuple[float, float] = ADAM_BETAS,
    eps: float = VALUE_ADAM_EPS,
) -> ValueTable:
    """One lazy Adam step on the touched rows of `table`, in place."""
    rows = torch.as_tensor(rows, dtype=torch.int64)
    if rows.dim() != 1 or grads.shape != (rows.shape[0], table.values.shape[1]):
        raise InvalidArgumentError(
            f"gradient shape {tuple(grads.shape)} does not match {rows.shape[0]} rows of width {table.values.shape[1]}"
        )
    if rows.numel() == 0:
        return table
    if int(rows.min()) < 0 or int(rows.max()) >= table.n_rows:
        raise InvalidArgumentError(f"value row index out of range [0, {table.n_rows})")

    # The update is non-linear, so duplicate rows are summed first
    rows, inverse = torch.unique(rows, return_inverse=True)
    grads = grads.new_zeros(rows.shape[0], grads.shape[1]).index_add_(0, inverse, grads)

    beta1, beta2 = betas
    table.steps[rows] += 1
    step = table.steps[rows].to(grads.dtype).unsqueeze(1)
    exp_avg = table.exp_avg[rows].mul_(beta1).add_(grads, alpha=1 - beta1)
    exp_avg_sq = table.exp_avg_sq[rows].mul_(beta2).addcmul_(grads, grads, value=1 - beta2)
    table.exp_avg[rows] = exp_avg
    table.exp_avg_sq[rows] = exp_avg_sq

    m_hat = exp_avg / (1 - beta1 ** step)
    v_hat = exp_avg_sq / (1 - beta2 ** step)
    table.values[rows] -= lr * m_hat / (v_hat.sqrt() + eps)
    return table


class SparseValueAdam(torch.optim.Optimizer):
    """Lazy Adam for memory value tables with sparse gradients.

    # Parameters
    params : iterable of value-table parameters
    lr : float, default 1e-3
    betas : Tuple[float, float], default (0.9, 0.98)
    eps : float, default 1e-8
    """

    def __init__(self, params, lr: float = LR_VALUES, betas=ADAM_BETAS, eps: float = VALUE_ADAM_EPS):
        if not 0.0 <= lr:
            raise InvalidArgumentError(f"Invalid learning rate: {lr}")
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise InvalidArgumentError(f"Invalid beta parameters: {betas}")
        super().__init__(params, dict(lr=lr, betas=tuple(betas), eps=eps))
        self.rows_updated = 0

    def table(self, p: Tensor) -> ValueTable:
        state = self.state[p]
        if len(state) == 0:
            state["exp_avg"] = torch.zeros_like(p.data)
            state["exp_avg_sq"] = torch.zeros_like(p.data)
            state["steps"] = torch.zeros(p.shape[0], dtype=torch.int64, device=p.device)
        return ValueTable(p.data, state["exp_avg"], state["exp_avg_sq"], state["steps"])

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                if grad.is_sparse:
                    grad = grad.coalesce()
                    rows, values = grad.indices()[0], grad.values()
                else:
                    rows = grad.abs().sum(1).nonzero().squeeze(1)
                    values = grad[rows]
                sparse_value_update(self.table(p), rows, values, group["lr"], group["betas"], group["eps"])
                self.rows_updated += int(rows.numel())
        return loss


def inverse_sqrt_factor(step: int, warmup: int) -> float:
    """Linear warmup to 1.0 at `warmup`, then decay as sqrt(warmup / step)."""
    step = max(1, step)
    warmup = max(1, warmup)
    return min(step / warmup, math.sqrt(warmup / step))


def grad_global_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is None:
            continue
        grad = p.grad.coalesce().values() if p.grad.is_sparse else p.grad
        total += float(grad.double().pow(2).sum())
    return math.sqrt(total)


@torch.no_grad()
def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Global-norm clipping that also handles sparse value gradients."""
    params: List[Tensor] = [p for p in params if p.grad is not None]
    norm = grad_global_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad.is_sparse:
                p.grad = p.grad.coalesce() * scale
            else:
                p.grad.mul_(scale)
    return norm
