"""
Decoder-only transformer whose FFN blocks can be replaced by memories.

Blocks are pre-norm residual: x <- x + Attn(LN(x)), then
x <- x + FFN(LN(x)), or x <- x + PKM(LN(x)) at memory positions.
"""

import logging
import math
from typing import Any, Dict, List, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InvalidArgumentError
from .memory import ProductKeyMemory
from .schemas import ModelConfig, parse_config

logger = logging.getLogger(__name__)


def interspersed_positions(n_layers: int, n_memories: int) -> List[int]:
    """Memories at regular intervals, 1-indexed (16 layers, 2 memories -> [6, 12])."""
    if n_memories < 0 or n_memories > n_layers:
        raise InvalidArgumentError(f"cannot place {n_memories} memories in {n_layers} layers")
    if n_memories == 0:
        return []
    step = n_layers // (n_memories + 1) + 1
    positions = [min(n_layers, step * i) for i in range(1, n_memories + 1)]
    if len(set(positions)) != n_memories:
        positions = list(range(n_layers - n_memories + 1, n_layers + 1))
    return positions


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, context: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        mask = torch.tril(torch.ones(context, context, dtype=torch.bool))
        self.register_buffer("mask", mask, persistent=False)

    def forward(self, x: Tensor) -> Tensor:
        B, T, C = x.shape
        q, k, v = self.qkv(x).split(C, dim=-1)
        q, k, v = (t.view(B, T, self.n_heads, self.head_dim).transpose(1, 2) for t in (q, k, v))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        att = att.masked_fill(~self.mask[:T, :T], float("-inf"))
        y = F.softmax(att, dim=-1) @ v
        return self.proj(y.transpose(1, 2).reshape(B, T, C))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, mult: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, mult * d_model),
            nn.GELU(),
            nn.Linear(mult * d_model, d_model),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class Block(nn.Module):
    def __init__(self, config: ModelConfig, use_memory: bool):
        super().__init__()
        d = config.d_model
        self.ln1 = nn.LayerNorm(d)
        self.attn = CausalSelfAttention(d, config.n_heads, config.context)
        self.ln2 = nn.LayerNorm(d)
        if use_memory:
            mem = config.memory
            self.mixer = ProductKeyMemory(
                d, mem.dq, mem.n_sub, heads=mem.heads, k=mem.k,
                batch_norm=mem.batch_norm, key_mode=mem.key_mode,
            )
        else:
            self.mixer = FeedForward(d, config.ffn_mult)

    @property
    def has_memory(self) -> bool:
        return isinstance(self.mixer, ProductKeyMemory)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mixer(self.ln2(x))


class TransformerLM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.tok_emb = nn.Embedding(config.vocab_size, d)
        self.pos_emb = nn.Embedding(config.context, d)
        positions = set(config.memory_positions)
        self.blocks = nn.ModuleList(Block(config, i + 1 in positions) for i in range(config.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.vocab_size, bias=False)
        self._init_embeddings()

    @torch.no_grad()
    def _init_embeddings(self) -> None:
        for weight in (self.tok_emb.weight, self.pos_emb.weight, self.head.weight):
            nn.init.normal_(weight, mean=0.0, std=0.02)

    def memories(self) -> Dict[int, ProductKeyMemory]:
        """Memory layers keyed by their 1-indexed position."""
        return {i + 1: block.mixer for i, block in enumerate(self.blocks) if block.has_memory}

    def value_parameters(self) -> List[nn.Parameter]:
        return [p for mem in self.memories().values() for p in mem.value_parameters()]

    def dense_parameters(self) -> List[nn.Parameter]:
        values = {id(p) for p in self.value_parameters()}
        return [p for p in self.parameters() if id(p) not in values]

    def forward(self, idx: Tensor) -> Tensor:
        B, T = idx.shape
        if T > self.config.context:
            raise InvalidArgumentError(f"sequence length {T} exceeds context {self.config.context}")
        pos = torch.arange(T, device=idx.device)
        x = self.tok_emb(idx) + self.pos_emb(pos)
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))

    def loss(self, batch: Tensor, reduction: str = "mean") -> Tensor:
        """Next-token cross-entropy over a (B, T + 1) batch."""
        logits = self(batch[:, :-1])
        return F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), batch[:, 1:].reshape(-1), reduction=reduction
        )


def build_model(config: Union[ModelConfig, Dict[str, Any]]) -> TransformerLM:
    config = parse_config(ModelConfig, config)
    torch.manual_seed(config.seed)
    model = TransformerLM(config).to(config.dtype)
    logger.info(
        f"Built model: layers={config.n_layers}, d={config.d_model}, "
        f"memories at {config.memory_positions}, params={sum(p.numel() for p in model.parameters())}"
    )
    return model


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count of `build_model(config)`."""
    d, V, T, L = config.d_model, config.vocab_size, config.context, config.n_layers
    mem = config.memory
    attention = 3 * d * d + 3 * d + d * d + d
    ffn = 2 * config.ffn_mult * d * d + config.ffn_mult * d + d
    norms = 4 * d
    keys = 2 * mem.heads * mem.n_sub * mem.dq // 2 if mem.key_mode == "product" else mem.heads * mem.n_keys * mem.dq
    query_nets = mem.heads * (mem.dq * d + mem.dq + (2 * mem.dq if mem.batch_norm else 0))
    memory = keys + mem.n_keys * d + query_nets
    n_mem = len(config.memory_positions)
    return V * d + T * d + L * (attention + norms) + (L - n_mem) * ffn + n_mem * memory + 2 * d + d * V
