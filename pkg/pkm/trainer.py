import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import torch
from tqdm import tqdm

from .config import ADAM_EPS
from .corpus import TokenizedCorpus, iter_windows, sample_batch
from .errors import DegenerateBatchError, InvalidArgumentError, InvalidInputError, TrainingDivergedError
from .metrics import AccessMonitor, perplexity
from .model import TransformerLM, build_model
from .optim import SparseValueAdam, clip_grad_norm, inverse_sqrt_factor
from .schemas import EvalReport, MemoryReport, ModelConfig, TrainConfig, parse_config

logger = logging.getLogger(__name__)


@dataclass
class TrainState:
    model: TransformerLM
    train_config: TrainConfig
    dense_optimizer: torch.optim.Adam
    value_optimizer: SparseValueAdam
    generator: torch.Generator
    step: int = 0
    history: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def current_lr(self) -> float:
        return self.train_config.lr_main * inverse_sqrt_factor(self.step + 1, self.train_config.warmup)


def build_state(model_config: ModelConfig, train_config: Optional[TrainConfig] = None) -> TrainState:
    """Fresh model and optimizers; values are owned by the sparse value optimizer."""
    train_config = parse_config(TrainConfig, train_config or {})
    model = build_model(model_config)
    betas = tuple(train_config.betas)
    dense = torch.optim.Adam(model.dense_parameters(), lr=train_config.lr_main, betas=betas, eps=ADAM_EPS)
    values = SparseValueAdam([{"params": model.value_parameters()}], lr=train_config.lr_values, betas=betas)
    generator = torch.Generator().manual_seed(model.config.seed)
    return TrainState(model, train_config, dense, values, generator)


def _diagnostics(state: TrainState, loss: float, lr: float) -> Dict[str, Any]:
    norms = {}
    for name, p in state.model.named_parameters():
        norms[name] = float(p.detach().double().norm())
    return {"step": state.step, "loss": loss, "lr": lr, "param_norms": norms}


def train_step(state: TrainState, batch: torch.Tensor) -> Tuple[TrainState, float]:
    """One forward/backward pass, a dense Adam step and a sparse value step."""
    model = state.model
    model.train()
    lr = state.current_lr()
    for group in state.dense_optimizer.param_groups:
        group["lr"] = lr

    state.dense_optimizer.zero_grad(set_to_none=True)
    state.value_optimizer.zero_grad(set_to_none=True)
    try:
        loss = model.loss(batch)
    except DegenerateBatchError:
        raise
    except InvalidInputError as e:
        # Non-finite activations reached a memory before the loss
        raise TrainingDivergedError(
            f"{e} at step {state.step}", _diagnostics(state, float("nan"), lr)
        ) from e
    loss_value = float(loss.detach())
    if not math.isfinite(loss_value):
        raise TrainingDivergedError(
            f"non-finite loss {loss_value} at step {state.step}", _diagnostics(state, loss_value, lr)
        )
    loss.backward()
    if state.train_config.clip_norm:
        clip_grad_norm(model.parameters(), state.train_config.clip_norm)
    state.dense_optimizer.step()
    state.value_optimizer.step()
    state.step += 1
    return state, loss_value


@torch.no_grad()
def evaluate(state: TrainState, corpus: TokenizedCorpus, split: str = "valid") -> EvalReport:
    """Eval-mode pass over a split: perplexity plus per-memory usage, KL and head overlap."""
    ids = corpus.split(split)
    if len(ids) < 2:
        raise InvalidArgumentError(f"split {split!r} has no next-token targets")
    model = state.model
    was_training = model.training
    model.eval()
    memories = model.memories()
    for mem in memories.values():
        mem.monitor = AccessMonitor.for_keys(mem.n_keys)
    total_nll, tokens = 0.0, 0
    try:
        for batch in iter_windows(ids, model.config.context, state.train_config.eval_batch_size):
            total_nll += float(model.loss(batch, reduction="sum"))
            tokens += batch.shape[0] * (batch.shape[1] - 1)
        reports = [
            MemoryReport(position=pos, n_keys=mem.n_keys, **mem.monitor.report())
            for pos, mem in memories.items()
        ]
    finally:
        for mem in memories.values():
            mem.monitor = None
        model.train(was_training)
    return EvalReport(
        split=split,
        perplexity=perplexity(total_nll, tokens),
        nll=total_nll / tokens,
        tokens=tokens,
        memories=reports,
    )


def dump_diagnostics(error: TrainingDivergedError, out_dir: Optional[Path]) -> Optional[Path]:
    if out_dir is None:
        return None
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "diverged.json"
    path.write_text(json.dumps(error.diagnostics, indent=2), encoding="utf-8")
    return path


def train(
    state: TrainState,
    corpus: TokenizedCorpus,
    on_checkpoint: Optional[Callable[[TrainState], None]] = None,
    progress: bool = True,
) -> TrainState:
    """Run `train_config.steps` steps on random windows of the train split."""
    cfg = state.train_config
    train_ids = corpus.split("train")
    start = time.time()
    bar = tqdm(range(state.step, cfg.steps), disable=not progress, desc="train")
    for _ in bar:
        batch = sample_batch(train_ids, cfg.batch_size, state.config.context, state.generator)
        lr = state.current_lr()
        state, loss = train_step(state, batch)
        if state.step % cfg.log_every == 0 or state.step == cfg.steps:
            state.history.append({"step": state.step, "loss": loss, "lr": lr})
            bar.set_postfix(loss=f"{loss:.4f}")
            logger.info(f"step={state.step} loss={loss:.6f} lr={lr:.3e}")
        if on_checkpoint and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    logger.info(f"Trained {cfg.steps} steps in {time.time() - start:.1f}s")
    return state

