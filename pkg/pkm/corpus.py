import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

TokenMode = Literal["char", "whitespace"]
SPLITS = ("train", "valid", "test")
UNK = "<unk>"
BOS = "<bos>"
DEFAULT_FRACTIONS = (0.90, 0.05, 0.05)


@dataclass(frozen=True)
class Vocabulary:
    symbols: Tuple[str, ...]
    _index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})

    @classmethod
    def build(cls, train_symbols: Sequence[str]) -> "Vocabulary":
        return cls(tuple(sorted(set(train_symbols) - {UNK, BOS})) + (UNK, BOS))

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    def encode(self, symbols: Sequence[str]) -> np.ndarray:
        unk = self.unk_id
        return np.fromiter((self._index.get(s, unk) for s in symbols), dtype=np.int64, count=len(symbols))

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.symbols[i] for i in ids]


@dataclass
class TokenizedCorpus:
    ids: np.ndarray
    vocab: Vocabulary
    boundaries: Tuple[int, int]  # token offsets where valid and test start
    mode: TokenMode = "char"

    def split(self, name: str) -> np.ndarray:
        valid_start, test_start = self.boundaries
        spans = {"train": (0, valid_start), "valid": (valid_start, test_start), "test": (test_start, len(self.ids))}
        if name not in spans:
            raise InvalidArgumentError(f"unknown split {name!r}; expected one of {SPLITS}")
        start, end = spans[name]
        return self.ids[start:end]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)


def _symbols(text: str, mode: TokenMode) -> List[str]:
    if mode == "char":
        return list(text)
    if mode == "whitespace":
        return text.split()
    raise InvalidArgumentError(f"unknown tokenization mode {mode!r}")


def default_offsets(n_bytes: int) -> Tuple[int, int, int]:
    train, valid, _ = DEFAULT_FRACTIONS
    return int(n_bytes * train), int(n_bytes * (train + valid)), n_bytes


def read_split_manifest(path: Union[str, Path]) -> Tuple[int, int, int]:
    """Three lines of byte offsets: valid start, test start, end."""
    lines = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if len(lines) != 3:
        raise InvalidArgumentError(f"split manifest {path} must have three lines, found {len(lines)}")
    try:
        valid_start, test_start, end = (int(line) for line in lines)
    except ValueError as e:
        raise InvalidArgumentError(f"split manifest {path} holds a non-integer offset") from e
    return valid_start, test_start, end


def tokenize_corpus(
    text: str,
    mode: TokenMode = "char",
    offsets: Optional[Tuple[int, int, int]] = None,
) -> TokenizedCorpus:
    """Deterministic tokenization; vocabulary comes from the train split only."""
    if not text:
        raise InvalidArgumentError("cannot tokenize an empty corpus")
    data = text.encode("utf-8")
    valid_start, test_start, end = offsets or default_offsets(len(data))
    if not 0 <= valid_start <= test_start <= end <= len(data):
        raise InvalidArgumentError(
            f"split offsets ({valid_start}, {test_start}, {end}) are not ordered within {len(data)} bytes"
        )
    pieces = [
        data[0:valid_start].decode("utf-8", errors="ignore"),
        data[valid_start:test_start].decode("utf-8", errors="ignore"),
        data[test_start:end].decode("utf-8", errors="ignore"),
    ]
    symbols = [_symbols(piece, mode) for piece in pieces]
    vocab = Vocabulary.build(symbols[0])

    encoded = [np.concatenate([[vocab.bos_id], vocab.encode(s)]).astype(np.int64) for s in symbols]
    valid_at = len(encoded[0])
    test_at = valid_at + len(encoded[1])
    logger.info(
        f"Tokenized corpus: mode={mode}, vocab={len(vocab)}, "
        f"train={len(encoded[0])}, valid={len(encoded[1])}, test={len(encoded[2])}"
    )
    return TokenizedCorpus(np.concatenate(encoded), vocab, (valid_at, test_at), mode)


def read_corpus_text(path: Union[str, Path]) -> str:
    """A UTF-8 file, or a directory of documents joined by newlines."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus not found: {path}")
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.is_file() and p.suffix != ".manifest")
        return "\n".join(p.read_text(encoding="utf-8") for p in files)
    return path.read_text(encoding="utf-8")


def load_corpus(
    path: Union[str, Path],
    mode: TokenMode = "char",
    manifest: Optional[Union[str, Path]] = None,
) -> TokenizedCorpus:
    offsets = read_split_manifest(manifest) if manifest else None
    return tokenize_corpus(read_corpus_text(path), mode, offsets)


def sample_batch(ids: np.ndarray, batch_size: int, context: int, generator: torch.Generator) -> torch.Tensor:
    """Random windows of context + 1 tokens, shape (batch_size, context + 1)."""
    span = context + 1
    if len(ids) < span:
        raise InvalidArgumentError(f"split of {len(ids)} tokens is shorter than one window of {span}")
    starts = torch.randint(0, len(ids) - span + 1, (batch_size,), generator=generator)
    tokens = torch.from_numpy(ids)
    return torch.stack([tokens[s:s + span] for s in starts.tolist()])


def iter_windows(ids: np.ndarray, context: int, batch_size: int) -> Iterator[torch.Tensor]:
    """Consecutive windows covering every next-token target exactly once."""
    tokens = torch.from_numpy(ids)
    starts = list(range(0, len(ids) - 1, context))
    full = [s for s in starts if s + context + 1 <= len(ids)]
    for i in range(0, len(full), batch_size):
        yield torch.stack([tokens[s:s + context + 1] for s in full[i:i + batch_size]])
    tail = [s for s in starts if s + context + 1 > len(ids)]
    for s in tail:
        yield tokens[s:].unsqueeze(0)
