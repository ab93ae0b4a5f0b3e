"""
Desk-scale ablation sweeps over the memory layer.

Each axis expands into a grid of cells. A cell trains a small language model
from scratch, evaluates it on the validation split and yields one record with
perplexity, memory usage, KL, head overlap and eval throughput.
"""

import logging
import time
from typing import Any, Dict, Iterable, List, Optional, Sequence

import torch
from joblib import Parallel, delayed

from .config import worker_count
from .corpus import TokenizedCorpus
from .errors import InvalidArgumentError
from .schemas import ModelConfig, TrainConfig, parse_config
from .trainer import build_state, evaluate, train

logger = logging.getLogger(__name__)

AXES = ("size", "bn", "position", "heads_knn", "flat_vs_product")
SIZE_GRID = (4, 16, 64)
LARGEST_DESK_SUBKEYS = 64
HEADS_KNN_GRID = ((1, 64), (2, 32), (4, 16), (8, 8))
FLAT_GRID = (4, 16)


def _memory(base: ModelConfig, **overrides) -> Dict[str, Any]:
    memory = base.memory.model_dump()
    memory.update(overrides)
    memory["k"] = min(memory["k"], memory["n_sub"])
    return memory


def ablation_cells(axis: str, base: ModelConfig) -> List[Dict[str, Any]]:
    """Model-config overrides for every cell of `axis`, labelled for the record."""
    if axis == "size":
        return [
            {"labels": {"n_sub": n}, "memory": _memory(base, n_sub=n)}
            for n in SIZE_GRID
        ]
    if axis == "bn":
        return [
            {"labels": {"bn": on}, "memory": _memory(base, n_sub=LARGEST_DESK_SUBKEYS, batch_norm=on)}
            for on in (False, True)
        ]
    if axis == "position":
        return [
            {"labels": {"position": p}, "memory_positions": [p], "memory": _memory(base)}
            for p in range(1, base.n_layers + 1)
        ]
    if axis == "heads_knn":
        return [
            {"labels": {"mem_heads": h, "knn": k}, "memory": _memory(base, n_sub=LARGEST_DESK_SUBKEYS, heads=h, k=k)}
            for h, k in HEADS_KNN_GRID
        ]
    if axis == "flat_vs_product":
        return [
            {"labels": {"key_mode": mode, "n_sub": n}, "memory": _memory(base, n_sub=n, key_mode=mode)}
            for n in FLAT_GRID
            for mode in ("product", "flat")
        ]
    raise InvalidArgumentError(f"unknown ablation axis {axis!r}; expected one of {', '.join(AXES)}")


def run_cell(
    axis: str,
    cell: Dict[str, Any],
    base: ModelConfig,
    train_config: TrainConfig,
    corpus: TokenizedCorpus,
    seed: int,
) -> Dict[str, Any]:
    config = base.model_dump()
    config["memory"] = cell["memory"]
    config["seed"] = seed
    if "memory_positions" in cell:
        config["memory_positions"] = cell["memory_positions"]
    elif not config["memory_positions"]:
        config["memory_positions"] = None
    model_config = parse_config(ModelConfig, config)

    state = build_state(model_config, train_config)
    train(state, corpus, progress=False)
    start = time.perf_counter()
    report = evaluate(state, corpus, "valid")
    elapsed = time.perf_counter() - start

    memory = model_config.memory
    record: Dict[str, Any] = {"kind": "ablate", "axis": axis, "seed": seed}
    record.update(cell["labels"])
    record.update(
        n_keys=memory.n_keys,
        heads=memory.heads,
        k=memory.k,
        steps=train_config.steps,
        perplexity=report.perplexity,
    )
    # Single-memory cells report that memory; the first one otherwise
    mem = report.memories[0] if report.memories else None
    record.update(
        usage=mem.usage if mem else None,
        kl=mem.kl if mem else None,
        overlap=mem.overlap if mem else None,
        tokens_per_sec=report.tokens / max(elapsed, 1e-9),
    )
    return record


def _run_cell_in_worker(*args) -> Dict[str, Any]:
    torch.set_num_threads(1)
    return run_cell(*args)


def run_ablation(
    axis: str,
    base: ModelConfig,
    train_config: TrainConfig,
    corpus: TokenizedCorpus,
    seeds: Sequence[int] = (0,),
    n_jobs: Optional[int] = None,
) -> List[Dict[str, Any]]:
    """All cells of `axis` for every seed, in grid order."""
    cells = ablation_cells(axis, base)
    jobs = [(cell, seed) for seed in seeds for cell in cells]
    n_jobs = min(n_jobs or worker_count(), len(jobs))
    logger.info(f"Ablation {axis}: {len(cells)} cells x {len(seeds)} seeds on {n_jobs} workers")
    if n_jobs == 1:
        return [run_cell(axis, cell, base, train_config, corpus, seed) for cell, seed in jobs]
    return Parallel(n_jobs=n_jobs, prefer="processes")(
        delayed(_run_cell_in_worker)(axis, cell, base, train_config, corpus, seed) for cell, seed in jobs
    )


def usage_band(records: Iterable[Dict[str, Any]]) -> float:
    """Spread (max - min) of the usage values across records."""
    values = [r["usage"] for r in records if r.get("usage") is not None]
    return max(values) - min(values) if values else 0.0
