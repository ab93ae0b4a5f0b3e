import math

import numpy as np
import pytest
import torch

from pkm.errors import InvalidArgumentError, PreconditionError
from pkm.memory import head_overlap, init_memory, memory_forward
from pkm.metrics import AccessAccumulator, AccessMonitor, accumulate_access, kl_uniform, perplexity, usage


def _deposit(n_keys, indices, weights):
    return AccessAccumulator(n_keys).deposit(np.array(indices), np.array(weights), examples=1)


def test_single_deposit():
    acc = _deposit(10, [3, 7], [0.6, 0.4])
    assert acc.z_prime[3] == 0.6 and acc.z_prime[7] == 0.4
    assert np.count_nonzero(acc.z_prime) == 2


def test_record_accumulates_linearly(gen):
    layer = init_memory(0, d=4, dq=4, n_sub=4, heads=2, k=2, dtype=torch.float64)
    _, record = memory_forward(torch.randn(6, 4, generator=gen, dtype=torch.float64), layer, mode="train")
    once = accumulate_access(AccessAccumulator(16), record)
    twice = accumulate_access(accumulate_access(AccessAccumulator(16), record), record)
    np.testing.assert_allclose(twice.z_prime, 2 * once.z_prime)
    assert twice.examples_seen == 12
    # Weights per example sum to one per head, so the total mass is B * H
    assert once.z_prime.sum() == pytest.approx(6 * 2)


def test_merge_equals_concatenated_stream():
    rng = np.random.default_rng(0)
    idx_a, w_a = rng.integers(0, 20, 30), rng.random(30)
    idx_b, w_b = rng.integers(0, 20, 25), rng.random(25)
    a = AccessAccumulator(20).deposit(idx_a, w_a, 3)
    b = AccessAccumulator(20).deposit(idx_b, w_b, 2)
    stream = AccessAccumulator(20).deposit(np.concatenate([idx_a, idx_b]), np.concatenate([w_a, w_b]), 5)
    np.testing.assert_allclose(a.merge(b).z_prime, stream.z_prime, rtol=1e-9)
    np.testing.assert_allclose(b.merge(a).z_prime, stream.z_prime, rtol=1e-9)
    assert a.merge(b).examples_seen == 5


def test_deposit_out_of_range():
    with pytest.raises(InvalidArgumentError):
        _deposit(4, [4], [1.0])


def test_usage_examples():
    assert usage(_deposit(8, [0, 3, 5], [0.2, 0.3, 0.5])) == 37.5
    assert usage(_deposit(4, [0, 1, 2, 3], [0.25] * 4)) == 100.0
    assert usage(_deposit(262144, list(range(32)), [1 / 32] * 32)) == pytest.approx(100 * 32 / 262144)


def test_usage_is_monotone():
    acc = AccessAccumulator(16)
    previous = 0.0
    for i in range(16):
        acc.deposit(np.array([i, (i * 5) % 16]), np.array([0.5, 0.5]), 1)
        current = usage(acc)
        assert previous <= current <= 100.0
        previous = current


def test_usage_of_empty_accumulator():
    with pytest.raises(PreconditionError):
        usage(AccessAccumulator(4))


def test_kl_examples():
    assert kl_uniform(_deposit(4, [0, 1, 2, 3], [1.0] * 4)) == pytest.approx(0.0, abs=1e-12)
    assert kl_uniform(_deposit(262144, [7], [1.0])) == pytest.approx(18 * math.log(2))
    assert kl_uniform(_deposit(4, [0, 1], [0.5, 0.5])) == pytest.approx(math.log(2))


def test_kl_of_zero_accumulator():
    acc = AccessAccumulator(4)
    acc.examples_seen = 3
    with pytest.raises(PreconditionError):
        kl_uniform(acc)


def test_kl_bounds():
    rng = np.random.default_rng(1)
    for _ in range(20):
        acc = AccessAccumulator(32).deposit(rng.integers(0, 32, 10), rng.random(10), 1)
        assert 0.0 <= kl_uniform(acc) <= math.log(32) + 1e-12


def test_full_usage_with_high_kl():
    n_keys, eps = 1024, 1e-12
    weights = np.full(n_keys, eps)
    weights[5] = 1 - (n_keys - 1) * eps
    acc = AccessAccumulator(n_keys)
    for _ in range(10):
        acc.deposit(np.arange(n_keys), weights, 1)
    assert usage(acc) == 100.0
    assert kl_uniform(acc) == pytest.approx(math.log(n_keys), rel=0.01)


def test_perplexity_examples():
    assert perplexity(0.0, 10) == 1.0
    assert perplexity(10 * math.log(2), 10) == pytest.approx(2.0)
    assert perplexity(7 * math.log(50), 7) == pytest.approx(50.0)
    with pytest.raises(InvalidArgumentError):
        perplexity(1.0, 0)


def test_monitor_reports_usage_kl_and_overlap(gen):
    layer = init_memory(0, d=4, dq=4, n_sub=4, heads=2, k=2, dtype=torch.float64)
    monitor = AccessMonitor.for_keys(layer.n_keys)
    _, record = memory_forward(torch.randn(8, 4, generator=gen, dtype=torch.float64), layer, mode="eval")
    monitor.observe(record)
    report = monitor.report()
    assert set(report) == {"usage", "kl", "overlap"}
    assert 0 < report["usage"] <= 100
    assert 0 <= report["overlap"] <= 1


def test_monitor_overlap_is_a_per_input_mean(gen):
    layer = init_memory(3, d=4, dq=4, n_sub=4, heads=3, k=3, dtype=torch.float64)
    x = torch.randn(7, 4, generator=gen, dtype=torch.float64)
    _, whole = memory_forward(x, layer, mode="eval")
    monitor = AccessMonitor.for_keys(layer.n_keys)
    for part in (x[:6], x[6:]):
        monitor.observe(memory_forward(part, layer, mode="eval")[1])
    assert monitor.overlap == pytest.approx(head_overlap(whole), rel=1e-12)
    assert monitor.overlap_examples == 7
