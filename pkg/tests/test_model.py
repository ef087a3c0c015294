import numpy as np
import pytest

from conftest import central_diff, random_instance, rel_err, total_objective
from mtparafac2 import (
    ConfigError,
    DegenerateInputError,
    FactorModel,
    IrregularTensor,
    PenaltyConfig,
    fit_score,
    grad_H,
    grad_Q,
    grad_S,
    grad_U,
    grad_V,
    masked_l2_loss,
    nonneg_project,
    reconstruct_slice,
    soft_threshold,
)
from mtparafac2.model import TENSOR_TASK, masked_residual, penalty_terms

TRIALS = range(100)


def one(x):
    return IrregularTensor([np.array(x, dtype=float)])


def test_reconstruct_hand_product():
    m = FactorModel([np.zeros((1, 2))], np.eye(2), [np.array([2.0, 3.0])],
                    np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), U=[np.array([[1.0, 0.0]])])
    assert np.allclose(reconstruct_slice(m, 0), [[2, 0, 2]])


def test_reconstruct_identity_and_zero_s():
    m = FactorModel([np.eye(2)], np.eye(2), [np.ones(2)], np.eye(2))
    assert np.allclose(reconstruct_slice(m, 0), np.eye(2))
    m.s[0][:] = 0
    assert np.all(reconstruct_slice(m, 0) == 0)
    with pytest.raises(IndexError):
        reconstruct_slice(m, 1)


def test_reconstruct_linear_in_s():
    _, m, _, _, _ = random_instance(1, with_heads=False)
    base = reconstruct_slice(m, 0)
    m.s[0] *= 2.5
    assert np.allclose(reconstruct_slice(m, 0), 2.5 * base)


def test_loss_and_fit_hand_values():
    t = one([[2.0]])
    m = FactorModel([np.ones((1, 1))], np.ones((1, 1)), [np.ones(1)], np.ones((1, 1)))
    assert masked_l2_loss(t, m) == pytest.approx(1.0)
    assert fit_score(t, m) == pytest.approx(0.75)


def test_fit_perfect_and_zero_model():
    t = one([[2.0, 1.0]])
    m = FactorModel([np.ones((1, 1))], np.ones((1, 1)), [np.ones(1)], np.array([[2.0], [1.0]]))
    assert fit_score(t, m) == pytest.approx(1.0)
    assert masked_l2_loss(t, m) == pytest.approx(0.0)
    m.s[0][:] = 0
    assert fit_score(t, m) == pytest.approx(0.0)


def test_loss_degenerate_inputs():
    t = IrregularTensor([np.ones((1, 1))], [np.zeros((1, 1))])
    m = FactorModel([np.ones((1, 1))], np.ones((1, 1)), [np.ones(1)], np.ones((1, 1)))
    with pytest.raises(DegenerateInputError):
        masked_l2_loss(t, m)
    with pytest.raises(DegenerateInputError):
        fit_score(one([[0.0]]), m)


def test_loss_ignores_unobserved_values():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4))
    mask = (rng.random((3, 4)) > 0.4).astype(float)
    m = FactorModel([rng.standard_normal((3, 2))], np.eye(2), [np.ones(2)], rng.standard_normal((4, 2)))
    y = np.where(mask > 0, x, 1e6)
    assert masked_l2_loss(IrregularTensor([x], [mask]), m) == masked_l2_loss(IrregularTensor([y], [mask]), m)


@pytest.mark.parametrize("seed", TRIALS)
def test_block_gradients_match_finite_differences(seed):
    t, m, pen, heads, w = random_instance(seed)
    f = lambda: total_objective(t, m, pen, heads, w)
    for k in range(t.K):
        assert rel_err(grad_U(t, m, k, pen, heads, w), central_diff(f, m.U[k])) < 1e-4
        assert rel_err(grad_Q(m, k, pen), central_diff(f, m.Q[k])) < 1e-4
        assert rel_err(grad_S(t, m, k, pen, heads, w), central_diff(f, m.s[k])) < 1e-4
    coupling = lambda: sum(np.sum((u - q @ m.H) ** 2) for q, u in zip(m.Q, m.U))
    assert rel_err(grad_H(m), central_diff(coupling, m.H)) < 1e-4
    assert rel_err(grad_V(t, m, pen, w), central_diff(f, m.V)) < 1e-4


def test_grad_u_without_coupling_is_reconstruction_only():
    t, m, pen, _, _ = random_instance(7, with_heads=False)
    pen.varrho1 = 0.0
    f = lambda: pen.rho_tensor * masked_l2_loss(t, m)
    assert rel_err(grad_U(t, m, 0, pen), central_diff(f, m.U[0])) < 1e-6


def test_grad_q_without_orthogonality_is_coupling_only():
    _, m, pen, _, _ = random_instance(8, with_heads=False)
    pen.varrho2 = 0.0
    f = lambda: pen.varrho1 * sum(np.sum((u - q @ m.H) ** 2) for q, u in zip(m.Q, m.U))
    assert rel_err(grad_Q(m, 1, pen), central_diff(f, m.Q[1])) < 1e-6


def test_stationary_points_give_zero_gradients():
    rng = np.random.default_rng(2)
    q, _ = np.linalg.qr(rng.standard_normal((4, 2)))
    H, V, s = rng.standard_normal((2, 2)), rng.standard_normal((3, 2)), np.array([0.5, 1.5])
    x = (q @ H * s) @ V.T
    t = IrregularTensor([x])
    m = FactorModel([q], H, [s], V)
    pen = PenaltyConfig()
    assert np.allclose(grad_U(t, m, 0, pen), 0, atol=1e-12)
    assert np.allclose(grad_Q(m, 0, pen), 0, atol=1e-12)
    assert np.allclose(grad_H(m), 0, atol=1e-12)
    assert np.allclose(grad_S(t, m, 0, pen), 0, atol=1e-12)
    assert np.allclose(grad_V(t, m, pen), 0, atol=1e-12)


def test_grad_s_hand_value():
    t = one([[1.0]])
    m = FactorModel([np.zeros((1, 2))], np.eye(2), [np.zeros(2)], np.array([[1.0, 0.0]]), U=[np.array([[1.0, 0.0]])])
    pen = PenaltyConfig(rho_tensor=0.7)
    assert np.allclose(grad_S(t, m, 0, pen), [-2 * 0.7, 0.0])


def test_fully_masked_slice_contributes_nothing_to_grad_v():
    t, m, pen, _, _ = random_instance(3, with_heads=False)
    masks = list(t.masks)
    masks[2] = np.zeros_like(masks[2])
    t2 = IrregularTensor(t.slices, masks, slice_ids=t.slice_ids)
    sub = m.subset([0, 1])
    t_sub = IrregularTensor(t.slices[:2], masks[:2], slice_ids=t.slice_ids[:2])
    assert np.allclose(grad_V(t2, m, pen), grad_V(t_sub, sub, pen))
    assert np.all(masked_residual(t2, m, 2) == 0)


def test_weights_override_rho_tensor():
    t, m, pen, _, _ = random_instance(4, with_heads=False)
    g1 = grad_V(t, m, pen, weights={TENSOR_TASK: 2.0})
    pen.rho_tensor = 2.0
    assert np.allclose(g1, grad_V(t, m, pen))


@pytest.mark.parametrize("x,eta,out", [(0.0, 1.0, 0.0), (5.0, 2.0, 3.0), (-1.5, 2.0, 0.0), (-5.0, 2.0, -3.0)])
def test_soft_threshold_values(x, eta, out):
    assert soft_threshold(np.array([x]), eta)[0] == out


def test_soft_threshold_rejects_negative():
    with pytest.raises(ConfigError):
        soft_threshold(np.ones(2), -0.1)


def test_soft_threshold_elementwise_eta():
    out = soft_threshold(np.array([3.0, 3.0]), np.array([1.0, 4.0]))
    assert np.array_equal(out, [2.0, 0.0])


def test_nonneg_project_values():
    assert np.array_equal(nonneg_project([-1.0, 0.5, 2.0]), [0.0, 0.5, 2.0])
    assert np.array_equal(nonneg_project([-3.0]), [0.0])
    assert np.array_equal(nonneg_project([4.0]), [4.0])


def test_export_sets_u_to_qh_and_subset_shares():
    _, m, pen, _, _ = random_instance(5, with_heads=False)
    sub = m.subset([1])
    sub.V[0, 0] = 123.0
    assert m.V[0, 0] == 123.0
    m.export()
    assert all(np.array_equal(u, q @ m.H) for q, u in zip(m.Q, m.U))
    c, _ = penalty_terms(m, pen)
    assert c == 0.0


def test_factor_model_rejects_bad_shapes():
    from mtparafac2 import ShapeError

    with pytest.raises(ShapeError):
        FactorModel([np.zeros((2, 2))], np.eye(2), [np.zeros(3)], np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        FactorModel([np.zeros((2, 2))], np.eye(2), [np.zeros(2)], np.zeros((3, 3)))
