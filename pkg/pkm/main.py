import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import torch
from dotenv import load_dotenv

from .ablation import AXES, run_ablation, usage_band
from .bench import run_bench
from .checkpoint import checkpoint_from_state, load_checkpoint, restore_state, save_checkpoint
from .config import PKM_DATA, PKM_LOG_LEVEL, worker_count
from .corpus import SPLITS, load_corpus
from .errors import CheckpointError, InvalidArgumentError, PKMError, TrainingDivergedError
from .model import interspersed_positions
from .records import append_records, format_block, format_record
from .schemas import EvalReport, ModelConfig, TrainConfig, parse_config
from .trainer import TrainState, build_state, dump_diagnostics, evaluate, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CHECKPOINT = 3
EXIT_DIVERGED = 4
EXIT_INEXACT = 5

RECORDS_FILE = "records.tsv"
CHECKPOINT_FILE = "checkpoint.pkm"


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {text!r}")
    return text == "on"


def parse_memory_positions(text: Optional[str], n_layers: int) -> Optional[List[int]]:
    """`none`, `auto:N` or a comma list of 1-indexed layers; None keeps the default."""
    if text is None:
        return None
    if text == "none":
        return []
    if text.startswith("auto:"):
        try:
            count = int(text[len("auto:"):])
        except ValueError:
            raise InvalidArgumentError(f"invalid memory placement {text!r}")
        return interspersed_positions(n_layers, count)
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise InvalidArgumentError(f"invalid memory positions {text!r}")


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--layers", type=int, default=6)
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--attn-heads", type=int, default=4)
    parser.add_argument("--context", type=int, default=64)
    parser.add_argument("--subkeys", type=int, default=16, help="sub-keys per codebook")
    parser.add_argument("--dq", type=int, default=32)
    parser.add_argument("--k", type=int, default=16)
    parser.add_argument("--heads", type=int, default=4, help="memory heads")
    parser.add_argument("--mode", choices=("product", "flat"), default="product", help="memory key type")
    parser.add_argument("--bn", type=_on_off, default=True, help="on|off")
    parser.add_argument("--mem-positions", default=None, help="none, auto:N or a comma list")
    parser.add_argument("--precision", choices=("f32", "f64"), default="f32")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--steps", type=int, default=1000)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--lr", type=float, default=None, help="peak learning rate for dense parameters")
    parser.add_argument("--lr-values", type=float, default=None)
    parser.add_argument("--warmup", type=int, default=None)
    parser.add_argument("--log-every", type=int, default=50)


def _add_data_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", default=PKM_DATA, help="corpus file or directory")
    parser.add_argument("--manifest", default=None, help="split manifest with three byte offsets")
    parser.add_argument("--tokens", choices=("char", "whitespace"), default="char")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pkm", description="Product-key memory layers: benchmarks, training and ablations")
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="time product vs flat key search and verify exactness")
    bench.add_argument("--subkeys", type=_int_list, default=[128, 256, 512])
    bench.add_argument("--dq", type=int, default=64)
    bench.add_argument("--k", type=int, default=16)
    bench.add_argument("--heads", type=int, default=1)
    bench.add_argument("--mode", choices=("product", "flat", "both"), default="both")
    bench.add_argument("--queries", type=int, default=512)
    bench.add_argument("--repeats", type=int, default=5)
    bench.add_argument("--exactness-queries", type=int, default=256)
    bench.add_argument("--threads", type=_int_list, default=None)
    bench.add_argument("--precision", choices=("f32", "f64"), default="f32")
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", type=Path, default=None)

    train_cmd = sub.add_parser("train", help="train a language model with optional memories")
    _add_model_flags(train_cmd)
    _add_train_flags(train_cmd)
    _add_data_flags(train_cmd)
    train_cmd.add_argument("--checkpoint-every", type=int, default=0)
    train_cmd.add_argument("--seed", type=int, default=0)
    train_cmd.add_argument("--out", type=Path, default=Path("runs"))

    eval_cmd = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_data_flags(eval_cmd)
    eval_cmd.add_argument("--checkpoint", type=Path, default=None)
    eval_cmd.add_argument("--split", choices=SPLITS, default="valid")
    eval_cmd.add_argument("--out", type=Path, default=Path("runs"))

    ablate = sub.add_parser("ablate", help="run a desk-scale sweep over one memory axis")
    ablate.add_argument("--axis", required=True, help=f"one of {', '.join(AXES)}")
    _add_model_flags(ablate)
    _add_train_flags(ablate)
    _add_data_flags(ablate)
    ablate.add_argument("--seed", type=int, default=0)
    ablate.add_argument("--seeds", type=_int_list, default=None)
    ablate.add_argument("--jobs", type=int, default=None)
    ablate.add_argument("--out", type=Path, default=Path("runs"))
    return parser


def model_config_from_args(args: argparse.Namespace, vocab_size: int) -> ModelConfig:
    memory = {
        "n_sub": args.subkeys,
        "heads": args.heads,
        "k": args.k,
        "dq": args.dq,
        "batch_norm": args.bn,
        "key_mode": args.mode,
    }
    return parse_config(ModelConfig, {
        "vocab_size": vocab_size,
        "n_layers": args.layers,
        "d_model": args.dim,
        "n_heads": args.attn_heads,
        "context": args.context,
        "memory_positions": parse_memory_positions(args.mem_positions, args.layers),
        "memory": memory,
        "seed": args.seed,
        "precision": args.precision,
    })


def train_config_from_args(args: argparse.Namespace) -> TrainConfig:
    data: Dict[str, Any] = {
        "steps": args.steps,
        "batch_size": args.batch_size,
        "log_every": args.log_every,
        "checkpoint_every": getattr(args, "checkpoint_every", 0),
    }
    for flag, key in (("lr", "lr_main"), ("lr_values", "lr_values"), ("warmup", "warmup")):
        if getattr(args, flag) is not None:
            data[key] = getattr(args, flag)
    return parse_config(TrainConfig, data)


def _eval_records(report: EvalReport, step: int) -> List[Dict[str, Any]]:
    records = [{"kind": "eval", "split": report.split, "step": step, "perplexity": report.perplexity,
                "nll": report.nll, "tokens": report.tokens}]
    for mem in report.memories:
        records.append({"kind": "memory", "split": report.split, "step": step, **mem.model_dump()})
    return records


def _print_eval(report: EvalReport, step: int) -> None:
    print(format_block({"split": report.split, "step": step, "perplexity": report.perplexity, "tokens": report.tokens}))
    for mem in report.memories:
        print(format_block({f"memory{mem.position}_{key}": value for key, value in mem.model_dump().items()
                            if key != "position"}))


def cmd_bench(args: argparse.Namespace) -> int:
    report = run_bench({
        "subkeys": args.subkeys,
        "dq": args.dq,
        "k": args.k,
        "heads": args.heads,
        "mode": args.mode,
        "queries": args.queries,
        "repeats": args.repeats,
        "exactness_queries": args.exactness_queries,
        "threads": args.threads,
        "precision": args.precision,
        "seed": args.seed,
    }, progress=True)
    records = [{"kind": "bench", **row} for row in report.records()]
    for record in records:
        print(format_record(record))
    print(f"exact={'true' if report.all_exact else 'false'}")
    if args.out is not None:
        append_records(args.out / RECORDS_FILE, records)
    if not report.all_exact:
        logger.error("Product search disagreed with the flat oracle")
        return EXIT_INEXACT
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.data, args.tokens, args.manifest)
    state = build_state(model_config_from_args(args, corpus.vocab_size), train_config_from_args(args))
    path = args.out / CHECKPOINT_FILE

    def on_checkpoint(s: TrainState) -> None:
        save_checkpoint(path, checkpoint_from_state(s))

    try:
        train(state, corpus, on_checkpoint=on_checkpoint)
    except TrainingDivergedError as e:
        dumped = dump_diagnostics(e, args.out)
        logger.error(f"Training diverged: {e} (diagnostics in {dumped})")
        raise
    save_checkpoint(path, checkpoint_from_state(state))

    report = evaluate(state, corpus, "valid")
    last = state.history[-1] if state.history else {}
    print(format_block({"checkpoint": path, "final_loss": last.get("loss")}))
    _print_eval(report, state.step)
    append_records(args.out / RECORDS_FILE, _eval_records(report, state.step))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    path = args.checkpoint or args.out / CHECKPOINT_FILE
    state = restore_state(load_checkpoint(path))
    corpus = load_corpus(args.data, args.tokens, args.manifest)
    if corpus.vocab_size != state.config.vocab_size:
        raise InvalidArgumentError(
            f"corpus vocabulary has {corpus.vocab_size} symbols but the checkpoint expects {state.config.vocab_size}"
        )
    report = evaluate(state, corpus, args.split)
    _print_eval(report, state.step)
    append_records(args.out / RECORDS_FILE, _eval_records(report, state.step))
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    if args.axis not in AXES:
        raise InvalidArgumentError(f"unknown ablation axis {args.axis!r}; expected one of {', '.join(AXES)}")
    corpus = load_corpus(args.data, args.tokens, args.manifest)
    base = model_config_from_args(args, corpus.vocab_size)
    records = run_ablation(
        args.axis, base, train_config_from_args(args), corpus,
        seeds=args.seeds or [args.seed], n_jobs=args.jobs,
    )
    for record in records:
        print(format_record(record))
    append_records(args.out / RECORDS_FILE, records)
    if args.axis in ("size", "heads_knn"):
        logger.info(f"Usage band across {args.axis} cells: {usage_band(records):.2f}")
    return EXIT_OK


COMMANDS = {"bench": cmd_bench, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(level=getattr(logging, PKM_LOG_LEVEL, logging.INFO))
    args = build_parser().parse_args(argv)
    torch.set_num_threads(worker_count())
    try:
        return COMMANDS[args.command](args)
    except (InvalidArgumentError, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except CheckpointError as e:
        logger.error(f"Checkpoint error in section {e.section!r}: {e}")
        return EXIT_CHECKPOINT
    except TrainingDivergedError as e:
        logger.error(str(e))
        return EXIT_DIVERGED
    except PKMError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
