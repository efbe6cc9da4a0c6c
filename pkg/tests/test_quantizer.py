import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowbit_adapters.quantizer import (
    QuantizedTensor,
    block_slices,
    fake_quant_backward,
    fake_quant_forward,
    fake_quant_jacobian,
    gaussian_codebook,
    pack_indices,
    quantize_std,
    quantize_tensor,
    reconstruct,
    standardize,
    unpack_indices,
)

from oracles import central_diff, frozen_offsets, rel_err, ste_surrogate

C1 = 0.6744897501960817  # 1-bit L1 code magnitude


def test_standardize_examples():
    st_ = standardize([2.0, 0.0])
    np.testing.assert_array_equal(st_.values, [1.0, -1.0])
    assert (st_.mu, st_.sigma, st_.degenerate) == (1.0, 1.0, False)
    assert standardize([5.0, 5.0, 5.0]).degenerate
    single = standardize([3.5])
    assert single.degenerate and single.mu == 3.5 and single.sigma == 0.0


@settings(max_examples=50)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=64))
def test_standardized_moments(xs):
    s = standardize(xs)
    if s.degenerate:
        return
    assert abs(s.values.sum()) <= 1e-6 * len(xs)
    assert abs(np.mean(s.values**2) - 1.0) <= 1e-6


def test_quantize_std_examples():
    cb = gaussian_codebook(1, "L1")
    vals, idx = quantize_std([0.0], cb)
    assert idx[0] == 0 and vals[0] == pytest.approx(-C1)
    vals, _ = quantize_std([1.0, -1.0], cb)
    np.testing.assert_allclose(vals, [C1, -C1])
    for b in (1, 2, 3):
        cb = gaussian_codebook(b, "L1")
        vals, idx = quantize_std(cb.codes, cb)
        np.testing.assert_array_equal(vals, cb.codes)
        np.testing.assert_array_equal(idx, np.arange(cb.size))


def test_forward_hand_case():
    q, state = fake_quant_forward(np.array([2.0, 0.0]), gaussian_codebook(1, "L1"))
    np.testing.assert_allclose(q, [1 + C1, 1 - C1], atol=1e-15)
    np.testing.assert_allclose(q, [1.6744898, 0.3255102], atol=1e-7)
    for v in state.quantized_std[0]:
        assert v in gaussian_codebook(1, "L1").codes


def test_forward_constant_passthrough():
    w = np.full((3, 4), 0.25)
    q, state = fake_quant_forward(w, gaussian_codebook(2, "L1"))
    np.testing.assert_array_equal(q, w)
    assert state.degenerate.all()
    g = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(fake_quant_backward(state, g), g)


def test_affine_equivariance():
    rng = np.random.default_rng(3)
    cb = gaussian_codebook(2, "L1")
    for _ in range(50):
        w = rng.standard_normal(40)
        alpha, beta = rng.uniform(0.1, 10), rng.uniform(-5, 5)
        lhs, _ = fake_quant_forward(alpha * w + beta, cb)
        rhs = alpha * fake_quant_forward(w, cb)[0] + beta
        assert np.max(np.abs(lhs - rhs) / np.maximum(np.abs(rhs), 1e-12)) <= 1e-6


def test_jacobian_hand_case():
    _, state = fake_quant_forward(np.array([2.0, 0.0]), gaussian_codebook(1, "L1"))
    jac = fake_quant_jacobian(state)
    assert jac[0, 0] == pytest.approx(1 + (C1 - 1) / 2, abs=1e-15)
    assert jac[0, 0] == pytest.approx(0.83725, abs=1e-5)
    assert jac[0, 1] == pytest.approx(0.16275, abs=1e-5)
    np.testing.assert_allclose(jac.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("m", [2, 17, 64])
@pytest.mark.parametrize("b", [1, 2, 4])
def test_backward_matches_finite_differences(m, b):
    rng = np.random.default_rng(m * 10 + b)
    cb = gaussian_codebook(b, "L1")
    w = rng.standard_normal(m) * 0.3 + 0.1
    _, state = fake_quant_forward(w, cb)
    err = frozen_offsets(state)
    g = rng.standard_normal(m)
    numeric = central_diff(lambda x: float(np.dot(g, ste_surrogate(x, err))), w, 1e-4)
    assert rel_err(fake_quant_backward(state, g), numeric) <= 1e-4
    np.testing.assert_allclose(fake_quant_jacobian(state) @ np.ones(m), 1.0, atol=1e-6)
    np.testing.assert_allclose(fake_quant_jacobian(state).T @ g, fake_quant_backward(state, g), atol=1e-12)


def test_backward_blockwise_matches_finite_differences():
    rng = np.random.default_rng(11)
    cb = gaussian_codebook(1, "L1")
    w = rng.standard_normal((6, 7))
    _, state = fake_quant_forward(w, cb, block_count=4)
    err = frozen_offsets(state)
    g = rng.standard_normal((6, 7))
    numeric = central_diff(lambda x: float(np.sum(g * ste_surrogate(x, err, 4))), w, 1e-4)
    assert rel_err(fake_quant_backward(state, g), numeric) <= 1e-4


def test_backward_length_mismatch():
    _, state = fake_quant_forward(np.array([1.0, 2.0, 4.0]), gaussian_codebook(1, "L1"))
    with pytest.raises(ValueError):
        fake_quant_backward(state, np.ones(2))


def test_error_non_increasing_in_bits():
    w = np.random.default_rng(5).standard_normal(4096) * 0.02 + 0.003
    errs = [np.abs(w - fake_quant_forward(w, gaussian_codebook(b, "L1"))[0]).sum() for b in range(1, 5)]
    assert all(e2 <= e1 for e1, e2 in zip(errs, errs[1:]))


def test_block_slices_remainder_joins_last():
    sl = block_slices(10, 3)
    assert [(s.start, s.stop) for s in sl] == [(0, 3), (3, 6), (6, 10)]
    with pytest.raises(ValueError):
        block_slices(2, 3)


class TestStoredForm:
    def test_reconstruct_matches_forward(self):
        cb = gaussian_codebook(1, "L1")
        q, _ = fake_quant_forward(np.array([[2.0, 0.0]]), cb)
        qt = quantize_tensor(np.array([[2.0, 0.0]]), cb)
        np.testing.assert_array_equal(reconstruct(qt, cb), q)

    def test_constant_index_matrix(self):
        cb = gaussian_codebook(2, "L1")
        for j in range(4):
            qt = QuantizedTensor(
                (3, 2), 2, 1,
                mu=np.zeros(1, np.float32), sigma=np.ones(1, np.float32),
                indices=np.full(6, j, np.uint8),
            )
            np.testing.assert_array_equal(reconstruct(qt, cb), np.full((3, 2), cb.codes[j]))

    def test_degenerate_stored_raw(self):
        qt = quantize_tensor(np.full((2, 2), 3.0), gaussian_codebook(1, "L1"))
        assert qt.is_raw
        np.testing.assert_array_equal(reconstruct(qt), np.full((2, 2), 3.0))

    def test_bad_index_rejected(self):
        qt = QuantizedTensor(
            (1, 2), 1, 1,
            mu=np.zeros(1, np.float32), sigma=np.ones(1, np.float32),
            indices=np.array([0, 2], np.uint8),
        )
        with pytest.raises(ValueError):
            reconstruct(qt, gaussian_codebook(1, "L1"))

    def test_codebook_bit_mismatch(self):
        qt = quantize_tensor(np.arange(4.0).reshape(2, 2), gaussian_codebook(2, "L1"))
        with pytest.raises(ValueError):
            reconstruct(qt, gaussian_codebook(1, "L1"))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 200), st.integers(0, 2**32 - 1))
    def test_index_bit_packing_roundtrip(self, b, n, seed):
        idx = np.random.default_rng(seed).integers(0, 2**b, n)
        data = pack_indices(idx, b)
        assert len(data) == -(-n * b // 8)
        np.testing.assert_array_equal(unpack_indices(data, n, b), idx)

    def test_lsb_first_layout(self):
        assert pack_indices([1, 0, 0, 0, 0, 0, 0, 1], 1) == bytes([0b10000001])
        assert pack_indices([1, 2, 3], 2) == bytes([0b00111001])
        assert pack_indices([0xA, 0x5], 4) == bytes([0x5A])

    def test_pack_unpack_reconstruct_bit_identical(self):
        rng = np.random.default_rng(0)
        for b in (1, 2, 3, 8):
            cb = gaussian_codebook(b, "L1")
            qt = quantize_tensor(rng.standard_normal((5, 9)), cb, block_count=2)
            again = QuantizedTensor(
                qt.shape, b, 2, mu=qt.mu, sigma=qt.sigma,
                indices=np.concatenate([
                    unpack_indices(pack_indices(qt.indices[sl], b), sl.stop - sl.start, b)
                    for sl in block_slices(45, 2)
                ]),
            )
            assert np.array_equal(reconstruct(qt, cb), reconstruct(again, cb))
