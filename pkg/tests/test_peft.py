import numpy as np
import pytest

from hqmv.numcore import Rng, grad_check
from hqmv.peft import LoraAdapter, lora_backward, lora_forward, lora_grad_from_weight, lora_init, lora_merge


def trained_adapter(d, k, r, alpha, seed):
    rng = Rng(seed)
    ad = lora_init(d, k, r, alpha, rng, W0=rng.normal((d, k)))
    ad.B[:] = rng.normal((d, r))
    return ad


def test_init_is_transparent():
    rng = Rng(0)
    W0 = rng.normal((5, 7))
    ad = lora_init(5, 7, 3, 6.0, rng, W0=W0)
    assert np.all(ad.B == 0) and ad.A.shape == (3, 7)
    x = rng.normal((10, 7))
    assert np.array_equal(lora_forward(x, ad), x @ W0.T)
    assert np.array_equal(lora_merge(ad), W0)


def test_init_std():
    ad = lora_init(256, 256, 64, 128, Rng(1))
    assert ad.A.std() == pytest.approx(0.02, rel=0.02)
    assert abs(ad.A.mean()) < 1e-3


def test_reference_scale_and_parameter_economy():
    ad = lora_init(256, 256, 64, 128, Rng(2))
    assert ad.scale == 2.0
    assert ad.n_trainable == 64 * (256 + 256)
    assert ad.n_trainable < 256 * 256


def test_invalid_rank():
    for r in (0, 6):
        with pytest.raises(ValueError):
            lora_init(5, 7, r, 1.0, Rng(0))
    with pytest.raises(ValueError):
        lora_init(5, 7, 2, 1.0, Rng(0), W0=np.zeros((7, 5)))


def test_forward_shape_mismatch():
    with pytest.raises(ValueError):
        lora_forward(np.zeros(4), lora_init(3, 5, 1, 1.0, Rng(0)))


def test_zero_base_unit_scale():
    rng = Rng(3)
    ad = LoraAdapter(A=rng.normal((2, 4)), B=rng.normal((3, 2)), W0=np.zeros((3, 4)), alpha=2.0)
    x = rng.normal(4)
    np.testing.assert_allclose(lora_forward(x, ad), ad.B @ ad.A @ x, atol=1e-15)


def test_dense_merge_oracle_2x2_rank1():
    ad = trained_adapter(2, 2, 1, 3.0, 4)
    x = Rng(5).normal(2)
    W_eff = ad.W0 + (ad.alpha / ad.r) * np.outer(ad.B[:, 0], ad.A[0])
    np.testing.assert_allclose(lora_forward(x, ad), W_eff @ x, atol=1e-14, rtol=0)


def test_merge_equivalence_100_vectors():
    ad = trained_adapter(6, 9, 3, 8.0, 6)
    X = Rng(7).normal((100, 9))
    np.testing.assert_allclose(lora_forward(X, ad), X @ lora_merge(ad).T, atol=1e-12, rtol=0)


def test_rank1_outer_product_exact():
    a, b = np.array([[1.0, -2.0, 0.5]]), np.array([[3.0], [0.25]])
    ad = LoraAdapter(A=a, B=b, W0=np.zeros((2, 3)), alpha=1.0)
    assert np.array_equal(lora_merge(ad), b @ a)


def test_full_rank_can_represent_any_update():
    rng = Rng(8)
    d, k = 4, 3
    target = rng.normal((d, k))
    # rank-sufficiency: A = I, B = target / scale reproduces any delta W
    ad = LoraAdapter(A=np.eye(k), B=target / 2.0, W0=np.zeros((d, k)), alpha=2.0 * k)
    np.testing.assert_allclose(lora_merge(ad), target, atol=1e-15)


def test_backward_gradcheck_and_frozen_base():
    ad = trained_adapter(4, 5, 2, 4.0, 9)
    x = Rng(10).normal((3, 5))
    g = Rng(11).normal((3, 4))
    gx, gA, gB = lora_backward(x, g, ad)
    params = {"A": ad.A, "B": ad.B, "x": x}

    def f(p):
        return float(np.sum(lora_forward(p["x"], LoraAdapter(p["A"], p["B"], ad.W0, ad.alpha)) * g))

    reports = grad_check(f, params, {"A": gA, "B": gB, "x": gx})
    assert reports[0].max_rel_err < 1e-8
    # the merged-weight route gives the same adapter gradients
    gA2, gB2 = lora_grad_from_weight(ad, g.T @ x)
    np.testing.assert_allclose(gA2, gA, atol=1e-13)
    np.testing.assert_allclose(gB2, gB, atol=1e-13)
