"""Tensor engine: op semantics, gradients vs finite differences, graph rules."""

import numpy as np
import pytest

from dualseg import autodiff as ad
from dualseg.autodiff import GraphError, ShapeError, Tensor


def test_exp_log2_values():
    assert np.allclose(ad.exp(Tensor([0.0, 1.0])).data, [1.0, np.e])
    assert np.allclose(ad.log2(Tensor([0.5, 1.0])).data, [-1.0, 0.0])


def test_product_rule():
    a = Tensor([2.0], requires_grad=True)
    b = Tensor([3.0])
    ad.backward((a * b).sum())
    assert np.array_equal(a.grad, [3.0])


def test_elementwise_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    assert "(2, 3)" in str(exc.value) and "(3, 2)" in str(exc.value)


def test_scalar_operand_allowed():
    t = Tensor([1.0, 2.0], requires_grad=True)
    out = ((t + 1.0) * 2.0 - 3.0) / 2.0
    assert np.allclose(out.data, [0.5, 1.5])
    ad.backward(out.sum())
    assert np.allclose(t.grad, [1.0, 1.0])


def test_ln_and_div_guards_keep_values_finite():
    assert np.isfinite(ad.ln(Tensor([0.0])).data).all()
    assert np.isclose(ad.ln(Tensor([0.0])).item(), np.log(1e-12))
    out = ad.div(Tensor([1.0]), Tensor([0.0]))
    assert np.isfinite(out.data).all()


def test_reduce_values_and_grads():
    assert ad.reduce_sum(Tensor([1.0, 2.0, 3.0])).item() == 6.0
    assert ad.reduce_mean(Tensor([2.0, 4.0])).item() == 3.0
    x = Tensor([5.0, 7.0], requires_grad=True)
    ad.backward(x.mean())
    assert np.allclose(x.grad, [0.5, 0.5])


def test_reduce_axes_and_errors():
    x = Tensor(np.arange(24.0).reshape(2, 3, 4))
    assert ad.reduce_sum(x, axes=(0, 2)).shape == (3,)
    with pytest.raises(ShapeError):
        ad.reduce_sum(x, axes=3)
    with pytest.raises(ShapeError):
        ad.reduce_sum(x, axes=(0, 0))


def test_softmax_symmetry_and_stability():
    assert np.allclose(ad.softmax(Tensor([0.0, 0.0]), 0).data, [0.5, 0.5])
    big = ad.softmax(Tensor([1000.0, 0.0]), 0)
    assert np.isfinite(big.data).all()
    assert np.allclose(big.data, [1.0, 0.0])


def test_softmax_sums_to_one_within_1e12_at_extreme_logits():
    rng = np.random.default_rng(0)
    logits = rng.uniform(-1e3, 1e3, size=(2, 50))
    p = ad.softmax(Tensor(logits), 0).data
    assert np.abs(p.sum(axis=0) - 1.0).max() < 1e-12


def test_softmax_jacobian_vs_finite_differences():
    # every Jacobian entry at [0, 0], central differences, rel err < 1e-6
    x0 = np.array([0.0, 0.0])
    h = 1e-6
    for out_idx in range(2):
        def f(t):
            return ad.select(ad.softmax(t, 0), 0, out_idx)

        analytic = np.zeros(2)
        leaf = Tensor(x0, requires_grad=True)
        ad.backward(f(leaf))
        analytic = leaf.grad
        for in_idx in range(2):
            xp, xm = x0.copy(), x0.copy()
            xp[in_idx] += h
            xm[in_idx] -= h
            with ad.no_grad():
                num = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2 * h)
            denom = max(1e-8, abs(analytic[in_idx]) + abs(num))
            assert abs(analytic[in_idx] - num) / denom < 1e-6


def test_conv3d_single_voxel():
    out = ad.conv3d(Tensor(np.full((1, 1, 1, 1), 2.0)),
                    Tensor(np.full((1, 1, 1, 1, 1), 3.0)), stride=1, padding=0)
    assert out.item() == 6.0


def test_conv3d_full_overlap_center():
    out = ad.conv3d(Tensor(np.ones((1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))),
                    stride=1, padding=1)
    assert out.shape == (1, 3, 3, 3)
    assert out.data[0, 1, 1, 1] == 27.0


def test_conv3d_identity_kernel_reproduces_input():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 4, 5, 6))
    eye = np.zeros((3, 3, 1, 1, 1))
    for c in range(3):
        eye[c, c, 0, 0, 0] = 1.0
    out = ad.conv3d(Tensor(x), Tensor(eye), stride=1, padding=0)
    assert np.array_equal(out.data, x)


def test_conv3d_output_extent_formula():
    x = Tensor(np.zeros((1, 9, 8, 7)))
    k = Tensor(np.zeros((2, 1, 3, 3, 3)))
    out = ad.conv3d(x, k, stride=2, padding=1)
    assert out.shape == (2, 5, 4, 4)  # floor((e + 2 - 3)/2) + 1


def test_conv3d_kernel_gradient_vs_finite_differences():
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((2, 4, 4, 4)))
    w = rng.standard_normal((3, 2, 3, 3, 3))

    def f(k):
        out = ad.conv3d(x, k, stride=1, padding=1)
        return (out * out).mean()

    assert ad.gradient_check(f, Tensor(w)) < 1e-4


def test_conv3d_errors():
    with pytest.raises(ShapeError):
        ad.conv3d(Tensor(np.zeros((2, 4, 4, 4))), Tensor(np.zeros((1, 3, 3, 3, 3))))
    with pytest.raises(ShapeError):
        ad.conv3d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 1, 3, 3, 3))),
                  stride=1, padding=0)


def test_backward_sum_and_square():
    x = Tensor(np.zeros(3), requires_grad=True)
    ad.backward(x.sum())
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])
    y = Tensor([2.0], requires_grad=True)
    ad.backward((y * y).sum())
    assert np.array_equal(y.grad, [4.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        ad.backward(x * 2.0)


def test_double_backward_without_new_forward_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    ad.backward(loss)
    with pytest.raises(GraphError):
        ad.backward(loss)


def test_gradient_accumulates_across_shared_subexpressions():
    def f(t):
        y = ad.exp(t)
        return (y * y).sum() + y.mean()

    rng = np.random.default_rng(11)
    assert ad.gradient_check(f, Tensor(rng.standard_normal(10) * 0.5)) < 1e-4


def test_randomized_composite_graph_vs_finite_differences():
    rng = np.random.default_rng(13)

    def f(t):
        a = ad.softmax(t.reshape((2, 8)), 0)
        b = ad.ln(ad.clamp_min(t, 0.05))
        c = ad.log2(ad.exp(t * 0.3))
        return (a * a).sum() + b.mean() - c.sum() / 7.0 + ad.sqrt((t * t).sum())

    x = rng.uniform(0.2, 1.5, size=16)
    assert ad.gradient_check(f, Tensor(x)) < 1e-4


def test_gradient_check_exact_for_linear():
    assert ad.gradient_check(lambda t: t.sum(), Tensor(np.arange(5.0))) < 1e-10


def test_gradient_check_rejects_non_finite():
    def f(t):
        return ad.exp(t * 1e6).sum()  # overflows to inf

    with np.errstate(over="ignore"):
        with pytest.raises(ValueError, match="not finite"):
            ad.gradient_check(f, Tensor([1.0]))


def test_tensor_without_requires_grad_never_accumulates():
    x = Tensor([1.0], requires_grad=False)
    y = Tensor([2.0], requires_grad=True)
    ad.backward((x * y).sum())
    assert x.grad is None and y.grad is not None


def test_no_grad_suppresses_taping():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_detach_cuts_the_graph():
    x = Tensor([3.0], requires_grad=True)
    y = (x * 2.0).detach()
    z = (y * Tensor([5.0], requires_grad=True)).sum()
    ad.backward(z)
    assert x.grad is None


def test_select_and_concat_roundtrip():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    parts = [ad.select(x, 0, i).reshape((1, 4)) for i in range(3)]
    y = ad.concat(parts, 0)
    assert np.array_equal(y.data, x.data)
    ad.backward((y * y).sum())
    assert np.allclose(x.grad, 2 * x.data)


def test_repeat_requires_unit_axis():
    with pytest.raises(ShapeError):
        ad.repeat(Tensor(np.zeros((2, 3))), 0, 4)
    out = ad.repeat(Tensor(np.array([[1.0, 2.0]])), 0, 3)
    assert out.shape == (3, 2)


def test_concat_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], 0)


def test_reshape_grad_and_validation():
    x = Tensor(np.arange(6.0), requires_grad=True)
    y = x.reshape((2, 3))
    ad.backward((y * y).sum())
    assert np.allclose(x.grad, 2 * x.data)
    with pytest.raises(ShapeError):
        x.reshape((4, 2))


def test_graphs_on_distinct_threads_are_independent():
    import threading

    errors = []

    def work(seed):
        try:
            rng = np.random.default_rng(seed)
            for _ in range(20):
                x = Tensor(rng.standard_normal(50), requires_grad=True)
                ad.backward((ad.exp(x) * x).sum())
                expected = np.exp(x.data) * (x.data + 1.0)
                if not np.allclose(x.grad, expected):
                    errors.append(seed)
        except Exception as exc:  # noqa: BLE001
            errors.append((seed, exc))

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
