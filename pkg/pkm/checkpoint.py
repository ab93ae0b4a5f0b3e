"""
Binary checkpoint format.

    magic       8 bytes  b"PKMCKPT1"
    count       u32      number of sections
    table       count x (u32 name_len, name, u32 kind, u32 offset, u32 length, u32 crc32)
    table_crc   u32      CRC-32 of the table bytes
    payloads    concatenated section payloads; offsets are relative to here

JSON sections hold a u32 length prefix followed by UTF-8 text. Tensor
sections hold a u32 dtype code, u32 ndim, ndim x u32 dims, then the
row-major little-endian data. All integers are little-endian.
"""

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor

from .errors import BadMagicError, ChecksumError, CheckpointError, ShapeMismatchError
from .schemas import ModelConfig, TrainConfig, parse_config
from .trainer import TrainState, build_state

logger = logging.getLogger(__name__)

MAGIC = b"PKMCKPT1"
KIND_JSON = 0
KIND_TENSOR = 1

_U32 = struct.Struct("<I")
_ENTRY = struct.Struct("<IIII")  # kind, offset, length, crc32

# dtype code -> (torch dtype, numpy little-endian dtype)
DTYPE_CODES: Dict[int, Tuple[torch.dtype, str]] = {
    0: (torch.float32, "<f4"),
    1: (torch.float64, "<f8"),
    2: (torch.int64, "<i8"),
    3: (torch.uint8, "|u1"),
}
_CODE_OF = {torch_dtype: code for code, (torch_dtype, _) in DTYPE_CODES.items()}

_OPTIMIZERS = ("dense_adam", "value_adam")


@dataclass
class Checkpoint:
    """Everything needed to resume training bit-for-bit."""
    config: Dict[str, Any]
    tensors: Dict[str, Tensor] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tuple(t.shape) for name, t in self.tensors.items()}


def _tensor_bytes(tensor: Tensor) -> bytes:
    if tensor.dtype not in _CODE_OF:
        raise CheckpointError(f"unsupported tensor dtype {tensor.dtype}")
    _, np_dtype = DTYPE_CODES[_CODE_OF[tensor.dtype]]
    return tensor.detach().cpu().contiguous().numpy().astype(np_dtype, copy=False).tobytes()


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    """Bitwise comparison: same config, metadata, tensor names, dtypes, shapes and bytes."""
    if a.config != b.config or a.meta != b.meta or list(a.tensors) != list(b.tensors):
        return False
    for name, x in a.tensors.items():
        y = b.tensors[name]
        if x.dtype != y.dtype or x.shape != y.shape or _tensor_bytes(x) != _tensor_bytes(y):
            return False
    return True


# ---------------------------------------------------------------------------
# Encoding


def _encode_json(obj: Any) -> bytes:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _U32.pack(len(text)) + text


def _encode_tensor(tensor: Tensor) -> bytes:
    data = _tensor_bytes(tensor)
    header = _U32.pack(_CODE_OF[tensor.dtype]) + _U32.pack(tensor.dim())
    header += b"".join(_U32.pack(n) for n in tensor.shape)
    return header + data


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    path = Path(path)
    sections = [("config", KIND_JSON, _encode_json(ckpt.config)), ("meta", KIND_JSON, _encode_json(ckpt.meta))]
    sections += [(name, KIND_TENSOR, _encode_tensor(t)) for name, t in ckpt.tensors.items()]

    table = bytearray()
    offset = 0
    for name, kind, payload in sections:
        encoded = name.encode("utf-8")
        table += _U32.pack(len(encoded)) + encoded
        table += _ENTRY.pack(kind, offset, len(payload), zlib.crc32(payload))
        offset += len(payload)

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(_U32.pack(len(sections)))
        f.write(table)
        f.write(_U32.pack(zlib.crc32(bytes(table))))
        for _, _, payload in sections:
            f.write(payload)
    tmp.replace(path)
    logger.info(f"Saved checkpoint {path} ({len(ckpt.tensors)} tensors, step {ckpt.step})")
    return path


# ---------------------------------------------------------------------------
# Decoding


class _Reader:
    def __init__(self, data: bytes, section: str):
        self.data = data
        self.pos = 0
        self.section = section

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ChecksumError(f"section {self.section!r} is truncated", self.section)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def _decode_json(payload: bytes, name: str) -> Any:
    reader = _Reader(payload, name)
    text = reader.take(reader.u32())
    try:
        return json.loads(text.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"section {name!r} is not valid JSON", name) from e


def _decode_tensor(payload: bytes, name: str) -> Tensor:
    reader = _Reader(payload, name)
    code = reader.u32()
    if code not in DTYPE_CODES:
        raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}", name)
    torch_dtype, np_dtype = DTYPE_CODES[code]
    shape = tuple(reader.u32() for _ in range(reader.u32()))
    count = int(np.prod(shape, dtype=np.int64))
    data = reader.take(count * np.dtype(np_dtype).itemsize)
    if reader.pos != len(payload):
        raise CheckpointError(f"tensor {name!r} has trailing bytes after its data", name)
    array = np.frombuffer(data, dtype=np_dtype, count=count).reshape(shape)
    return torch.from_numpy(array.copy()).to(torch_dtype)


def check_shapes(
    found: Mapping[str, Tuple[int, ...]],
    expected: Mapping[str, Tuple[int, ...]],
    strict: bool = True,
) -> None:
    """Raise ShapeMismatchError naming the first tensor that does not line up."""
    for name, shape in expected.items():
        if name not in found:
            raise ShapeMismatchError(f"tensor {name!r} is missing from the checkpoint", name)
        if tuple(found[name]) != tuple(shape):
            raise ShapeMismatchError(
                f"tensor {name!r} has shape {tuple(found[name])}, expected {tuple(shape)}", name
            )
    extra = [name for name in found if name not in expected]
    if strict and extra:
        raise ShapeMismatchError(f"tensor {extra[0]!r} is not part of this model", extra[0])


def load_checkpoint(
    path: Union[str, Path],
    expected_shapes: Optional[Mapping[str, Tuple[int, ...]]] = None,
) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path} is not a checkpoint (bad magic {data[:len(MAGIC)]!r})", "header")

    header = _Reader(data, "table")
    header.take(len(MAGIC))
    count = header.u32()
    table_start = header.pos
    entries = []
    for _ in range(count):
        name = header.take(header.u32()).decode("utf-8", errors="replace")
        entries.append((name,) + _ENTRY.unpack(header.take(_ENTRY.size)))
    table = data[table_start:header.pos]
    if header.u32() != zlib.crc32(table):
        raise ChecksumError(f"section table of {path} fails its checksum", "table")

    base = header.pos
    config: Optional[Dict[str, Any]] = None
    meta: Dict[str, Any] = {}
    tensors: Dict[str, Tensor] = {}
    for name, kind, offset, length, crc in entries:
        payload = data[base + offset:base + offset + length]
        if len(payload) != length:
            raise ChecksumError(f"section {name!r} is truncated", name)
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"section {name!r} fails its checksum", name)
        if kind == KIND_JSON:
            if name == "config":
                config = _decode_json(payload, name)
            elif name == "meta":
                meta = _decode_json(payload, name)
            else:
                raise CheckpointError(f"unknown JSON section {name!r}", name)
        elif kind == KIND_TENSOR:
            tensors[name] = _decode_tensor(payload, name)
        else:
            raise CheckpointError(f"section {name!r} has unknown kind {kind}", name)
    if config is None:
        raise CheckpointError(f"{path} has no config section", "config")

    ckpt = Checkpoint(config, tensors, meta)
    if expected_shapes is not None:
        check_shapes(ckpt.shapes(), expected_shapes, strict=False)
    logger.info(f"Loaded checkpoint {path} ({len(tensors)} tensors, step {ckpt.step})")
    return ckpt


# ---------------------------------------------------------------------------
# Train state <-> checkpoint


def _optimizer_tensors(prefix: str, optimizer: torch.optim.Optimizer) -> Tuple[Dict[str, Tensor], list]:
    state_dict = optimizer.state_dict()
    tensors = {}
    for idx in sorted(state_dict["state"]):
        for key, value in sorted(state_dict["state"][idx].items()):
            if not isinstance(value, Tensor):
                value = torch.tensor(value, dtype=torch.float64 if isinstance(value, float) else torch.int64)
            tensors[f"{prefix}/{idx}/{key}"] = value.detach().clone()
    return tensors, state_dict["param_groups"]


def _optimizer_params(optimizer: torch.optim.Optimizer) -> Sequence[Tensor]:
    return [p for group in optimizer.param_groups for p in group["params"]]


def _restore_optimizer(prefix: str, optimizer: torch.optim.Optimizer, ckpt: Checkpoint, groups: list) -> None:
    if len(groups) != len(optimizer.param_groups):
        raise ShapeMismatchError(f"{prefix} has {len(groups)} parameter groups", prefix)
    for target, saved in zip(optimizer.param_groups, groups):
        if len(saved["params"]) != len(target["params"]):
            raise ShapeMismatchError(f"{prefix} parameter group sizes differ", prefix)
        for key, value in saved.items():
            if key != "params":
                target[key] = tuple(value) if key == "betas" else value
    params = _optimizer_params(optimizer)
    optimizer.state.clear()
    marker = f"{prefix}/"
    for name, tensor in ckpt.tensors.items():
        if not name.startswith(marker):
            continue
        idx, key = name[len(marker):].split("/", 1)
        optimizer.state[params[int(idx)]][key] = tensor.clone()


def checkpoint_from_state(state: TrainState) -> Checkpoint:
    tensors = {f"model/{name}": t.detach().clone() for name, t in state.model.state_dict().items()}
    meta: Dict[str, Any] = {"step": state.step, "history": list(state.history)}
    for prefix, optimizer in zip(_OPTIMIZERS, (state.dense_optimizer, state.value_optimizer)):
        opt_tensors, groups = _optimizer_tensors(prefix, optimizer)
        tensors.update(opt_tensors)
        meta[f"{prefix}_groups"] = groups
    meta["rows_updated"] = state.value_optimizer.rows_updated
    tensors["rng/generator"] = state.generator.get_state().clone()
    config = {"model": state.config.model_dump(), "train": state.train_config.model_dump()}
    # Normalise through JSON so an in-memory checkpoint equals its reloaded copy
    return Checkpoint(json.loads(json.dumps(config)), tensors, json.loads(json.dumps(meta)))


def expected_model_shapes(state: TrainState) -> Dict[str, Tuple[int, ...]]:
    return {f"model/{name}": tuple(t.shape) for name, t in state.model.state_dict().items()}


def _check_optimizer_shapes(prefix: str, optimizer: torch.optim.Optimizer, ckpt: Checkpoint) -> None:
    params = _optimizer_params(optimizer)
    marker = f"{prefix}/"
    for name, tensor in ckpt.tensors.items():
        if not name.startswith(marker):
            continue
        idx, key = name[len(marker):].split("/", 1)
        if int(idx) >= len(params):
            raise ShapeMismatchError(f"tensor {name!r} refers to a parameter this model lacks", name)
        param = params[int(idx)]
        if key in ("exp_avg", "exp_avg_sq") and tuple(tensor.shape) != tuple(param.shape):
            raise ShapeMismatchError(
                f"tensor {name!r} has shape {tuple(tensor.shape)}, expected {tuple(param.shape)}", name
            )
        if key == "steps" and tuple(tensor.shape) != (param.shape[0],):
            raise ShapeMismatchError(
                f"tensor {name!r} has shape {tuple(tensor.shape)}, expected {(param.shape[0],)}", name
            )


def restore_state(ckpt: Checkpoint, state: Optional[TrainState] = None) -> TrainState:
    """Load `ckpt` into `state`, or into a fresh state built from its own config."""
    if state is None:
        model_config = parse_config(ModelConfig, ckpt.config.get("model", {}))
        train_config = parse_config(TrainConfig, ckpt.config.get("train", {}))
        state = build_state(model_config, train_config)

    expected = expected_model_shapes(state)
    found = {name: shape for name, shape in ckpt.shapes().items() if name.startswith("model/")}
    check_shapes(found, expected)
    for prefix, optimizer in zip(_OPTIMIZERS, (state.dense_optimizer, state.value_optimizer)):
        _check_optimizer_shapes(prefix, optimizer, ckpt)

    model_state = {name[len("model/"):]: t for name, t in ckpt.tensors.items() if name.startswith("model/")}
    state.model.load_state_dict(model_state)
    for prefix, optimizer in zip(_OPTIMIZERS, (state.dense_optimizer, state.value_optimizer)):
        _restore_optimizer(prefix, optimizer, ckpt, ckpt.meta.get(f"{prefix}_groups", []))
    state.value_optimizer.rows_updated = int(ckpt.meta.get("rows_updated", 0))
    if "rng/generator" in ckpt.tensors:
        state.generator.set_state(ckpt.tensors["rng/generator"].clone())
    state.step = ckpt.step
    state.history = list(ckpt.meta.get("history", []))
    return state
