import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semsplat.dataset_io import FrameRecord, MaskRecord
from semsplat.errors import DataError, EmptyBankError, NumericalError, ValidationError
from semsplat.semantic_memory import (MemoryBank, direct_readout, direct_readout_backward,
                                      init_projection, masked_embedding, readout, readout_backward)

from conftest import unit
from gradcheck import numeric_grad, rel_error


def _frame_with(embs):
    masks = [MaskRecord(np.ones((2, 2), dtype=bool), i + 1, e) for i, e in enumerate(embs)]
    return FrameRecord(np.zeros((2, 2, 3)), np.ones((2, 2, 3)), np.ones((2, 2)), masks)


def _random_bank(rng, M, D):
    return np.stack([unit(rng.normal(size=D)) for _ in range(M)])


# --------------------------------------------------------------------------
# masked embedding

def test_masked_embedding_unit_and_renormalized():
    e = unit([1.0, 2.0, 2.0])
    fr = _frame_with([e, 2 * e, None])
    np.testing.assert_allclose(masked_embedding(fr, 0), e)
    np.testing.assert_allclose(masked_embedding(fr, 1), e)
    with pytest.raises(DataError):
        masked_embedding(fr, 2)
    with pytest.raises(DataError):
        masked_embedding(fr, 3)


# --------------------------------------------------------------------------
# insertion

def test_insert_examples():
    bank = MemoryBank(3)
    assert bank.maybe_insert(unit([1, 0, 0]))
    assert len(bank) == 1
    assert not bank.maybe_insert(unit([1, 0, 0]))
    assert bank.maybe_insert(unit([0, 1, 0]))
    assert len(bank) == 2


def test_insert_rejects_bad_vectors():
    bank = MemoryBank(3)
    with pytest.raises(ValidationError):
        bank.maybe_insert([2.0, 0.0, 0.0])
    with pytest.raises(ValidationError):
        bank.maybe_insert([1.0, 0.0])


def test_insert_threshold_boundary():
    bank = MemoryBank(2)
    bank.maybe_insert(unit([1, 0]))
    ang = np.arccos(0.9)
    assert not bank.maybe_insert(np.array([np.cos(ang * 0.99), np.sin(ang * 0.99)]))
    assert bank.maybe_insert(np.array([np.cos(ang * 1.01), np.sin(ang * 1.01)]))


def test_diversity_after_1000_offers(rng):
    bank = MemoryBank(8)
    for i in range(1000):
        bank.maybe_insert(unit(rng.normal(size=8)), 0.9, source=(i, 0))
    assert np.all(bank.pairwise_cosines() < 0.9)
    assert np.allclose(np.linalg.norm(bank.entries, axis=1), 1.0, atol=1e-6)
    assert len(bank.insertion_log) == len(bank)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8))
def test_cluster_stream_bounded(seed, k):
    rng = np.random.default_rng(seed)
    D = 16
    centers = np.eye(D)[:k]
    bank = MemoryBank(D)
    for _ in range(200):
        c = centers[rng.integers(k)]
        e = unit(c + rng.normal(0, 0.01, size=D))
        # within 12.9 degrees of the center keeps every intra-cluster cosine above 0.9
        assert e @ c > 0.975
        bank.maybe_insert(e, 0.9)
    assert 1 <= len(bank) <= k


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_diversity_under_permutation(seed):
    rng = np.random.default_rng(seed)
    stream = [unit(v) for v in rng.normal(size=(150, 4))]
    for perm in (np.arange(150), rng.permutation(150)):
        bank = MemoryBank(4)
        for i in perm:
            bank.maybe_insert(stream[i], 0.9)
        assert np.all(bank.pairwise_cosines() < 0.9)


def test_duplicates_never_grow(rng):
    bank = MemoryBank(6)
    es = [unit(rng.normal(size=6)) for _ in range(5)]
    for e in es:
        bank.maybe_insert(e)
    n = len(bank)
    for e in es * 3:
        assert not bank.maybe_insert(e)
    assert len(bank) == n


def test_summary_text():
    bank = MemoryBank(2)
    bank.maybe_insert(unit([1, 0]))
    bank.maybe_insert(unit([0, 1]))
    lines = bank.summary().splitlines()
    assert lines[0] == "M=2 D=2"
    assert sum(int(line.split()[-1]) for line in lines[1:]) == 1


# --------------------------------------------------------------------------
# readout

def test_readout_single_entry(rng):
    Mb = _random_bank(rng, 1, 5)
    W = rng.normal(size=(5, 3))
    for _ in range(3):
        np.testing.assert_allclose(readout(rng.normal(size=3), Mb, W), Mb[0])


def test_readout_zero_projection_is_mean(rng):
    Mb = _random_bank(rng, 4, 5)
    np.testing.assert_allclose(readout(rng.normal(size=3), Mb, np.zeros((5, 3))), Mb.mean(axis=0))


def test_readout_naive_loop(rng):
    Mb = _random_bank(rng, 5, 6)
    W = rng.normal(size=(6, 4))
    F = rng.normal(size=4)
    q = [sum(W[a, b] * F[b] for b in range(4)) for a in range(6)]
    logits = [sum(q[a] * Mb[m, a] for a in range(6)) / 0.7 for m in range(5)]
    z = [np.exp(v - max(logits)) for v in logits]
    att = [v / sum(z) for v in z]
    want = [sum(att[m] * Mb[m, a] for m in range(5)) for a in range(6)]
    np.testing.assert_allclose(readout(F, Mb, W, 0.7), want, rtol=0, atol=1e-12)


def test_readout_batch_matches_single(rng):
    Mb = _random_bank(rng, 4, 6)
    W = rng.normal(size=(6, 3))
    F = rng.normal(size=(7, 3))
    batch = readout(F, Mb, W)
    for i in range(7):
        np.testing.assert_allclose(batch[i], readout(F[i], Mb, W), atol=1e-14)


def test_readout_empty_bank():
    with pytest.raises(EmptyBankError):
        readout(np.ones(3), MemoryBank(4), np.ones((4, 3)))
    with pytest.raises(EmptyBankError):
        readout_backward(np.ones(3), MemoryBank(4), np.ones((4, 3)), np.ones(4))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_readout_in_convex_hull(seed, M):
    rng = np.random.default_rng(seed)
    Mb = _random_bank(rng, M, 5)
    W = rng.normal(0, 3, size=(5, 3))
    out = readout(rng.normal(size=3), Mb, W)
    assert np.linalg.norm(out) <= 1 + 1e-12
    # barycentric weights are recoverable and form a distribution
    from scipy.optimize import nnls
    A = np.vstack([Mb.T, np.ones(M)])
    b = np.concatenate([out, [1.0]])
    lam, resid = nnls(A, b)
    assert resid < 1e-8


# --------------------------------------------------------------------------
# gradients

def test_backward_single_entry_zero(rng):
    Mb = _random_bank(rng, 1, 5)
    W = rng.normal(size=(5, 3))
    dF, dW = readout_backward(rng.normal(size=3), Mb, W, rng.normal(size=5))
    assert np.allclose(dF, 0) and np.allclose(dW, 0)


def test_backward_zero_upstream(rng):
    Mb = _random_bank(rng, 4, 5)
    W = rng.normal(size=(5, 3))
    dF, dW = readout_backward(rng.normal(size=3), Mb, W, np.zeros(5))
    assert not dF.any() and not dW.any()


def test_backward_nonfinite_upstream(rng):
    Mb = _random_bank(rng, 3, 5)
    W = rng.normal(size=(5, 3))
    g = np.zeros(5)
    g[1] = np.nan
    with pytest.raises(NumericalError):
        readout_backward(np.ones(3), Mb, W, g)
    with pytest.raises(NumericalError):
        direct_readout_backward(np.ones(3), W, g)


@pytest.mark.parametrize("seed", range(10))
def test_readout_backward_fd(seed):
    rng = np.random.default_rng(seed)
    Mb = _random_bank(rng, 5, 6)
    W = rng.normal(size=(6, 4))
    F = rng.normal(size=(3, 4))
    G = rng.normal(size=(3, 6))
    tau = rng.uniform(0.5, 2.0)
    dF, dW = readout_backward(F, Mb, W, G, tau)
    nF = numeric_grad(lambda: np.sum(readout(F, Mb, W, tau) * G), F)
    nW = numeric_grad(lambda: np.sum(readout(F, Mb, W, tau) * G), W)
    assert rel_error(dF, nF) < 1e-4
    assert rel_error(dW, nW) < 1e-4


def test_direct_readout_fd(rng):
    W = rng.normal(size=(6, 4))
    F = rng.normal(size=(3, 4))
    G = rng.normal(size=(3, 6))
    dF, dW = direct_readout_backward(F, W, G)
    f = lambda: np.sum(direct_readout(F, W) * G)  # noqa: E731
    assert rel_error(dF, numeric_grad(f, F)) < 1e-6
    assert rel_error(dW, numeric_grad(f, W)) < 1e-6


def test_init_projection_shape(rng):
    W = init_projection(32, 16, rng)
    assert W.shape == (32, 16) and np.all(np.isfinite(W))
