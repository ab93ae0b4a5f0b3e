import itertools

import pytest
import torch

from pkm.errors import InvalidArgumentError, InvalidInputError
from pkm.search import (
    OpCounter,
    ProductKeyIndex,
    compose_index,
    decompose_index,
    exhaustive_product_search,
    flat_search,
    materialize_keys,
    product_search,
    top_k,
)


def test_top_k_basic():
    sel = top_k([0.1, 0.9, 0.5], 2)
    assert sel.indices.tolist() == [1, 2]
    assert sel.scores.tolist() == [0.9, 0.5]


def test_top_k_tie_prefers_lower_index():
    sel = top_k([5.0, 5.0, 1.0], 1)
    assert sel.indices.tolist() == [0]
    assert sel.scores.tolist() == [5.0]


def test_top_k_full_sort(gen):
    scores = torch.rand(64, generator=gen, dtype=torch.float64)
    sel = top_k(scores, 64)
    assert sel.indices.tolist() == torch.argsort(scores, descending=True).tolist()
    assert torch.all(sel.scores[:-1] >= sel.scores[1:])


@pytest.mark.parametrize("k", [0, 4])
def test_top_k_rejects_bad_k(k):
    with pytest.raises(InvalidArgumentError):
        top_k([1.0, 2.0, 3.0], k)


def test_top_k_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        top_k([1.0, float("nan")], 1)


def test_top_k_permutation_consistent(gen):
    scores = torch.randn(50, generator=gen, dtype=torch.float64)
    perm = torch.randperm(50, generator=gen)
    original = top_k(scores, 10).indices
    permuted = top_k(scores[perm], 10).indices
    assert perm[permuted].tolist() == original.tolist()


def test_flat_search_orthogonal():
    sel = flat_search(torch.tensor([1.0, 0.0]), torch.tensor([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]), 1)
    assert sel.indices.tolist() == [0]
    assert sel.scores.tolist() == [1.0]


def test_flat_search_tie_break():
    keys = torch.tensor([[1.0, 2.0], [1.0, 0.0], [-1.0, 2.0], [-1.0, 0.0]])
    sel = flat_search(torch.tensor([1.0, 1.0]), keys, 2)
    assert sel.indices.tolist() == [0, 1]
    assert sel.scores.tolist() == [3.0, 1.0]


def test_flat_search_dimension_mismatch():
    with pytest.raises(InvalidArgumentError):
        flat_search(torch.ones(3), torch.ones(4, 2), 1)


def test_flat_search_chunked_matches_whole(gen):
    keys = torch.randn(300, 6, generator=gen, dtype=torch.float64)
    queries = torch.randn(7, 6, generator=gen, dtype=torch.float64)
    whole = flat_search(queries, keys, 9)
    chunked = flat_search(queries, keys, 9, chunk_size=32)
    assert torch.equal(whole.indices, chunked.indices)
    assert torch.equal(whole.scores, chunked.scores)


def test_product_search_small_examples():
    index = ProductKeyIndex.from_tensors(torch.tensor([[1.0], [-1.0]]), torch.tensor([[2.0], [0.0]]))
    sel = product_search(torch.tensor([1.0, 1.0]), index, 1)
    assert sel.indices.tolist() == [0] and sel.scores.tolist() == [3.0]
    sel = product_search(torch.tensor([-1.0, 1.0]), index, 1)
    assert sel.indices.tolist() == [2] and sel.scores.tolist() == [3.0]


def test_product_search_single_key():
    index = ProductKeyIndex.from_tensors(torch.tensor([[0.5, 2.0]]), torch.tensor([[-1.0, 3.0]]))
    q = torch.tensor([1.0, 2.0, 3.0, 4.0])
    sel = product_search(q, index, 1)
    assert sel.indices.tolist() == [0]
    assert sel.scores.item() == pytest.approx(0.5 + 4.0 - 3.0 + 12.0)


def test_product_search_rejects_large_k():
    index = ProductKeyIndex.random(4, 8)
    with pytest.raises(InvalidArgumentError):
        product_search(torch.zeros(8), index, 5)


def test_product_search_rejects_wrong_dim():
    index = ProductKeyIndex.random(4, 8)
    with pytest.raises(InvalidArgumentError):
        product_search(torch.zeros(6), index, 2)


def test_product_matches_flat_oracle(gen):
    instances = 0
    for n_sub, dq in itertools.product((2, 8, 32, 128), (4, 16, 64)):
        for _ in range(10):
            index = ProductKeyIndex.random(n_sub, dq, generator=gen, dtype=torch.float64)
            keys = materialize_keys(index)
            k = int(torch.randint(1, n_sub + 1, (1,), generator=gen))
            queries = torch.randn(10, dq, generator=gen, dtype=torch.float64)
            fast = product_search(queries, index, k)
            oracle = flat_search(queries, keys, k)
            assert torch.equal(fast.indices, oracle.indices)
            torch.testing.assert_close(fast.scores, oracle.scores, rtol=1e-12, atol=1e-12)
            instances += queries.shape[0]
    assert instances >= 1000


def test_product_ties_match_flat_oracle():
    # Integer codebooks make many products tie exactly
    c1 = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
    c2 = torch.tensor([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], dtype=torch.float64)
    index = ProductKeyIndex.from_tensors(c1, c2)
    query = torch.tensor([1.0, 1.0, 1.0, 1.0], dtype=torch.float64)
    for k in range(1, 5):
        fast = product_search(query, index, k)
        oracle = flat_search(query, materialize_keys(index), k)
        assert fast.indices.tolist() == oracle.indices.tolist()
        assert fast.scores.tolist() == oracle.scores.tolist()


def test_exhaustive_product_search_matches_flat(gen):
    index = ProductKeyIndex.random(20, 8, generator=gen, dtype=torch.float64)
    queries = torch.randn(5, 8, generator=gen, dtype=torch.float64)
    streamed = exhaustive_product_search(queries, index, 7, chunk_rows=50)
    oracle = flat_search(queries, materialize_keys(index), 7)
    assert torch.equal(streamed.indices, oracle.indices)


def test_score_decomposition(gen):
    index = ProductKeyIndex.random(6, 10, generator=gen)
    q = torch.randn(10, generator=gen)
    full = materialize_keys(index) @ q
    sums = (index.codebook_1.vectors @ q[:5])[:, None] + (index.codebook_2.vectors @ q[5:])[None, :]
    eps = torch.finfo(torch.float32).eps
    assert torch.allclose(full, sums.flatten(), rtol=4 * eps, atol=4 * eps * float(full.abs().max()))


def test_op_counts_product():
    index = ProductKeyIndex.random(512, 64)
    counter = OpCounter()
    product_search(torch.randn(64), index, 16, counter=counter)
    assert counter.mul_adds == 512 * 2 * 32 == 32768
    assert counter.adds == 16 * 16


def test_op_counts_random_configs(gen):
    counter = OpCounter()
    for _ in range(50):
        n1 = int(torch.randint(1, 40, (1,), generator=gen))
        n2 = int(torch.randint(1, 40, (1,), generator=gen))
        dq = 2 * int(torch.randint(1, 16, (1,), generator=gen))
        k = int(torch.randint(1, min(n1, n2) + 1, (1,), generator=gen))
        index = ProductKeyIndex.random(n1, dq, generator=gen, n_sub_2=n2)
        counter.reset()
        product_search(torch.randn(dq, generator=gen), index, k, counter=counter)
        assert counter.mul_adds == (n1 + n2) * dq // 2
        assert counter.adds == k * k
        counter.reset()
        flat_search(torch.randn(dq, generator=gen), materialize_keys(index), k, counter=counter)
        assert counter.mul_adds == n1 * n2 * dq
        assert counter.adds == 0


def test_compose_decompose():
    index = ProductKeyIndex.random(3, 4, n_sub_2=4)
    assert compose_index(0, 0, index) == 0
    assert decompose_index(5, index) == (1, 1)
    small = ProductKeyIndex.random(2, 4)
    assert compose_index(1, 0, small) == 2
    flats = [compose_index(i, j, index) for i in range(3) for j in range(4)]
    assert flats == list(range(12))
    assert all(decompose_index(f, index) == (f // 4, f % 4) for f in flats)


def test_compose_out_of_range():
    index = ProductKeyIndex.random(2, 4)
    with pytest.raises(InvalidArgumentError):
        compose_index(2, 0, index)
    with pytest.raises(InvalidArgumentError):
        decompose_index(4, index)
