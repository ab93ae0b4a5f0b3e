from typing import Any, Dict, List, Literal, Optional, Type, TypeVar

import torch
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .config import ADAM_BETAS, CLIP_NORM, LR_MAIN, LR_VALUES, PKM_FLAT_CEILING, WARMUP_STEPS
from .errors import InvalidArgumentError

Precision = Literal["f32", "f64"]

DTYPES = {"f32": torch.float32, "f64": torch.float64}

ConfigT = TypeVar("ConfigT", bound=BaseModel)


def parse_config(cls: Type[ConfigT], data: Any) -> ConfigT:
    """Validate `data` into `cls`, surfacing failures as InvalidArgumentError."""
    if isinstance(data, cls):
        data = data.model_dump()
    try:
        return cls.model_validate(data)
    except ValidationError as e:
        raise InvalidArgumentError(f"invalid {cls.__name__}: {e}") from e


class MemoryConfig(BaseModel):
    n_sub: int = Field(64, ge=1)  # |C| = |C'|
    heads: int = Field(4, ge=1)
    k: int = Field(32, ge=1)
    dq: int = Field(32, ge=2)
    batch_norm: bool = True
    key_mode: Literal["product", "flat"] = "product"

    @field_validator("dq")
    @classmethod
    def dq_even(cls, v: int) -> int:
        if v % 2:
            raise ValueError(f"query dimension must be even, got {v}")
        return v

    @model_validator(mode="after")
    def k_fits_codebook(self):
        if self.k > self.n_sub:
            raise ValueError(f"k={self.k} exceeds codebook size {self.n_sub}")
        return self

    @property
    def n_keys(self) -> int:
        return self.n_sub * self.n_sub


class ModelConfig(BaseModel):
    vocab_size: int = Field(..., ge=2)
    n_layers: int = Field(6, ge=1)
    d_model: int = Field(64, ge=1)
    n_heads: int = Field(4, ge=1)
    context: int = Field(64, ge=1)
    ffn_mult: int = Field(4, ge=1)
    memory_positions: Optional[List[int]] = None  # 1-indexed layers; None picks layer L-1
    memory: MemoryConfig = Field(default_factory=MemoryConfig)
    seed: int = 0
    precision: Precision = "f32"

    @model_validator(mode="after")
    def check_shapes(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.memory_positions is None:
            self.memory_positions = [max(1, self.n_layers - 1)]
        positions = sorted(set(self.memory_positions))
        if len(positions) != len(self.memory_positions):
            raise ValueError(f"duplicate memory positions {self.memory_positions}")
        if positions and (positions[0] < 1 or positions[-1] > self.n_layers):
            raise ValueError(f"memory positions {positions} outside [1, {self.n_layers}]")
        self.memory_positions = positions
        return self

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.precision]


class TrainConfig(BaseModel):
    steps: int = Field(1000, ge=0)
    batch_size: int = Field(16, ge=1)
    eval_batch_size: int = Field(16, ge=1)
    lr_main: float = Field(LR_MAIN, gt=0)
    lr_values: float = Field(LR_VALUES, gt=0)
    betas: List[float] = Field(default_factory=lambda: list(ADAM_BETAS))
    warmup: int = Field(WARMUP_STEPS, ge=1)
    clip_norm: Optional[float] = CLIP_NORM
    log_every: int = Field(50, ge=1)
    checkpoint_every: int = Field(0, ge=0)  # 0 disables periodic checkpoints


class MemoryReport(BaseModel):
    position: int
    n_keys: int
    usage: float
    kl: float
    overlap: float


class EvalReport(BaseModel):
    split: str
    perplexity: float
    nll: float
    tokens: int
    memories: List[MemoryReport] = Field(default_factory=list)


class BenchRow(BaseModel):
    n_sub: int
    n_keys: int
    dq: int
    k: int
    heads: int
    mode: Literal["product", "flat"]
    threads: int
    queries_per_sec: float = Field(..., gt=0)
    mul_adds: int
    adds: int
    exact: Optional[bool] = None


class BenchReport(BaseModel):
    rows: List[BenchRow] = Field(default_factory=list)
    exactness_queries: int = 0

    @property
    def all_exact(self) -> bool:
        return all(row.exact for row in self.rows if row.mode == "product")

    def records(self) -> List[Dict[str, Any]]:
        return [row.model_dump() for row in self.rows]


class BenchConfig(BaseModel):
    subkeys: List[int] = Field(default_factory=lambda: [128, 256, 512])
    dq: int = Field(64, ge=2)
    k: int = Field(16, ge=1)
    heads: int = Field(1, ge=1)
    mode: Literal["product", "flat", "both"] = "both"
    queries: int = Field(512, ge=1)  # timed queries per repeat
    query_block: int = Field(64, ge=1)
    repeats: int = Field(5, ge=1)
    exactness_queries: int = Field(256, ge=256)
    seed: int = 0
    precision: Precision = "f32"
    flat_ceiling: int = Field(PKM_FLAT_CEILING, ge=1)
    threads: Optional[List[int]] = None  # None runs single-threaded and worker_count()

    @model_validator(mode="after")
    def check_grid(self):
        if not self.subkeys or min(self.subkeys) < 1:
            raise ValueError(f"subkey sizes must be positive, got {self.subkeys}")
        if self.dq % 2:
            raise ValueError(f"query dimension must be even, got {self.dq}")
        if self.k > min(self.subkeys):
            raise ValueError(f"k={self.k} exceeds the smallest codebook {min(self.subkeys)}")
        if self.threads is not None and (not self.threads or min(self.threads) < 1):
            raise ValueError(f"thread counts must be positive, got {self.threads}")
        return self

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.precision]
