"""
Desk-scale training and timing trends. Each test trains or times for minutes,
so they only run with PKM_RUN_SLOW=1.
"""

import pytest

from pkm.ablation import run_ablation
from pkm.bench import run_bench
from pkm.schemas import ModelConfig, TrainConfig
from pkm.trainer import build_state, evaluate, train

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def desk_train_config():
    return TrainConfig(steps=400, batch_size=16, eval_batch_size=32, warmup=50, log_every=100)


@pytest.fixture(scope="module")
def desk_model_config(tiny_corpus):
    return ModelConfig(
        vocab_size=tiny_corpus.vocab_size,
        n_layers=4,
        d_model=64,
        n_heads=4,
        context=32,
        memory={"n_sub": 16, "heads": 4, "k": 8, "dq": 32},
    )


def _majority(flags):
    return sum(bool(f) for f in flags) >= 2


@pytest.mark.slow
def test_perplexity_does_not_rise_with_memory_size(tiny_corpus, desk_model_config, desk_train_config):
    records = run_ablation("size", desk_model_config, desk_train_config, tiny_corpus, seeds=SEEDS)
    flags = []
    for seed in SEEDS:
        ppl = [r["perplexity"] for r in sorted((r for r in records if r["seed"] == seed), key=lambda r: r["n_keys"])]
        flags.append(all(b <= a for a, b in zip(ppl, ppl[1:])))
    assert _majority(flags), records


@pytest.mark.slow
def test_memory_beats_same_budget_baseline(tiny_corpus, desk_model_config, desk_train_config):
    flags = []
    for seed in SEEDS:
        with_memory = desk_model_config.model_copy(update={"seed": seed})
        baseline = desk_model_config.model_copy(update={"seed": seed, "memory_positions": []})
        ppl = []
        for config in (with_memory, baseline):
            state = train(build_state(config, desk_train_config), tiny_corpus, progress=False)
            ppl.append(evaluate(state, tiny_corpus, "valid").perplexity)
        flags.append(ppl[0] < ppl[1])
    assert _majority(flags)


@pytest.mark.slow
def test_batch_norm_raises_usage(tiny_corpus, desk_model_config, desk_train_config):
    records = run_ablation("bn", desk_model_config, desk_train_config, tiny_corpus, seeds=SEEDS)
    flags = []
    for seed in SEEDS:
        usage = {r["bn"]: r["usage"] for r in records if r["seed"] == seed}
        flags.append(usage[True] >= usage[False])
    assert _majority(flags), records


@pytest.mark.slow
def test_heads_knn_sweep_is_complete(tiny_corpus, desk_model_config, desk_train_config):
    records = run_ablation("heads_knn", desk_model_config, desk_train_config, tiny_corpus, seeds=(0,))
    assert len(records) == 4
    assert all(r["usage"] is not None and r["perplexity"] > 1 for r in records)


@pytest.mark.slow
def test_product_search_time_is_flat_in_memory_size():
    report = run_bench({
        "subkeys": [128, 256, 512, 1024],
        "dq": 64,
        "k": 16,
        "mode": "both",
        "queries": 64,
        "repeats": 3,
        "threads": [1],
        "flat_ceiling": 2 ** 20,
    })
    assert report.all_exact
    qps = {(r.mode, r.n_keys): r.queries_per_sec for r in report.rows}
    product = [qps["product", n * n] for n in (128, 256, 512, 1024)]
    flat = [qps["flat", n * n] for n in (128, 256, 512, 1024)]
    assert max(product) / min(product) < 2
    assert flat[0] / flat[-1] >= 10
