import numpy as np
import pytest

from dpa_reid.attention import CpaModule, DpaModule, Fusion, ObrBlock, SpaModule
from dpa_reid.autodiff import Tensor, grad_check_many
from dpa_reid.autodiff import functional as F
from dpa_reid.exceptions import ShapeMismatch, SpatialSizeMismatch
from dpa_reid.gradsuite import randomize
from dpa_reid.nn import BatchNorm2d


def rng(seed=0):
    return np.random.default_rng(seed)


def plain_obr(x, kernel, bn, training=True):
    bn.train(training)
    return F.relu(bn(F.conv2d(Tensor(x), Tensor(kernel), None, 1, 1))).data


def test_mixing_weights_are_a_distribution():
    block = ObrBlock(3, 5, rng(), num_kernels=4)
    x = Tensor(rng(1).standard_normal((6, 3, 4, 4)))
    w = block.mixing_weights(x).data
    assert w.shape == (6, 4)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert block.aggregated_kernels(x).shape == (6, 5, 3, 3, 3)


def test_obr_single_kernel_is_plain_conv_bn_relu():
    block = ObrBlock(3, 4, rng(), num_kernels=1)
    x = rng(2).standard_normal((2, 3, 5, 5))
    got = block(Tensor(x)).data
    want = plain_obr(x, block.kernels[0].data, BatchNorm2d(4))
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_obr_identical_kernels_ignore_mixing():
    block = ObrBlock(3, 4, rng(), num_kernels=4)
    for k in block.kernels[1:]:
        k.data[...] = block.kernels[0].data
    x = rng(3).standard_normal((2, 3, 5, 5))
    np.testing.assert_allclose(block(Tensor(x)).data, plain_obr(x, block.kernels[0].data, BatchNorm2d(4)),
                               atol=1e-12)


def test_obr_matches_aggregated_kernel_convolution():
    block = ObrBlock(2, 3, rng(), num_kernels=4)
    x = Tensor(rng(4).standard_normal((3, 2, 4, 4)))
    agg = block.aggregated_kernels(x)
    dyn = block.dynamic_conv(x).data
    for n in range(3):
        ref = F.conv2d(Tensor(x.data[n:n + 1]), Tensor(agg[n]), None, 1, 1).data
        np.testing.assert_allclose(dyn[n:n + 1], ref, atol=1e-12)


def test_obr_output_non_negative_and_handles_1x1():
    block = ObrBlock(4, 4, rng(), 4)
    out = block(Tensor(rng(5).standard_normal((4, 4, 1, 1)))).data
    assert out.shape == (4, 4, 1, 1) and (out >= 0).all()


def test_obr_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        ObrBlock(3, 3, rng())(Tensor(np.ones((1, 2, 3, 3))))


def test_cpa_null_case_on_constant_planes():
    m = CpaModule(4, rng())
    # mixed signs and an exact zero plane, as produced by a ReLU
    levels = np.array([1.3, -0.4, 0.0, 2.2e-7]).reshape(1, 4, 1, 1)
    plane = np.broadcast_to(levels, (2, 4, 5, 5)).copy()
    _, a2, c_star = m.descriptors(Tensor(plane))
    assert np.all(a2.data == 0.0)
    assert np.all(c_star.data == 0.0)


def test_cpa_shape_and_range():
    m = CpaModule(8, rng())
    x = Tensor(rng(7).standard_normal((2, 8, 6, 6)))
    out = m(x).data
    assert out.shape == (2, 8, 6, 6)
    assert ((out > 0) & (out < 1)).all()
    a1, a2, _ = m.descriptors(x)
    assert a1.shape == (2, 8, 6, 6) and a2.shape == (2, 8, 1, 1)


def test_spa_null_case_on_channel_constant_locations():
    m = SpaModule(4, 3, 3, rng())
    loc = np.broadcast_to(rng(8).standard_normal((2, 1, 3, 3)), (2, 4, 3, 3)).copy()
    b1, b2, s_star = m.descriptors(Tensor(loc))
    assert np.all(b2.data == 0.0)
    assert b1.shape == (2, 9, 1, 1) and s_star.shape == (2, 18, 1, 1)


def test_spa_shape_and_range():
    m = SpaModule(8, 4, 4, rng())
    out = m(Tensor(rng(9).standard_normal((2, 8, 4, 4)))).data
    assert out.shape == (2, 8, 4, 4)
    assert ((out > 0) & (out < 1)).all()


def test_spa_rejects_other_spatial_sizes():
    m = SpaModule(4, 4, 4, rng())
    with pytest.raises(SpatialSizeMismatch):
        m(Tensor(np.ones((1, 4, 2, 8))))  # same HW count, different layout
    with pytest.raises(SpatialSizeMismatch):
        m(Tensor(np.ones((1, 4, 3, 3))))
    with pytest.raises(ShapeMismatch):
        m(Tensor(np.ones((1, 5, 4, 4))))


def test_dpa_shape_and_range_on_random_shapes():
    r = rng(10)
    for i in range(20):
        c, h, w = int(r.integers(1, 17)), int(r.integers(1, 9)), int(r.integers(1, 9))
        n = int(r.integers(1, 3))
        m = DpaModule(c, h, w, rng(i), num_kernels=2)
        out = m(Tensor(r.standard_normal((n, c, h, w)))).data
        assert out.shape == (n, c, h, w)
        assert ((out > 0) & (out < 1)).all()


def test_dpa_sum_fusion_is_elementwise_sum():
    m = DpaModule(4, 3, 3, rng(), fusion=Fusion.SUM)
    x = Tensor(rng(11).standard_normal((2, 4, 3, 3)))
    out = m(x).data
    np.testing.assert_allclose(out, m.cpa(x).data + m.spa(x).data, atol=1e-12)
    assert ((out > 0) & (out < 2)).all()


def test_dpa_mean_fusion_of_equal_branches():
    m = DpaModule(4, 3, 3, rng())
    x = Tensor(rng(12).standard_normal((2, 4, 3, 3)))
    m.spa.forward = m.cpa.forward  # both branches now produce the same map
    np.testing.assert_allclose(m(x).data, m.cpa(x).data, atol=1e-15)


def test_dpa_single_branch_modes():
    x = Tensor(rng(13).standard_normal((1, 4, 3, 3)))
    only_c = DpaModule(4, 3, 3, rng(), use_spa=False)
    assert only_c.spa is None
    np.testing.assert_array_equal(only_c(x).data, only_c.cpa(x).data)
    with pytest.raises(ValueError):
        DpaModule(4, 3, 3, rng(), use_cpa=False, use_spa=False)


def test_forward_is_deterministic():
    m = DpaModule(4, 4, 4, rng())
    m.eval()
    x = Tensor(rng(14).standard_normal((2, 4, 4, 4)))
    assert m(x).data.tobytes() == m(x).data.tobytes()


def _check(module, shape, seed, max_coords):
    r = rng(seed)
    randomize(module, r)
    x = Tensor(r.standard_normal(shape), requires_grad=True)
    w = Tensor(r.standard_normal(shape))
    return grad_check_many(lambda: F.sum(F.mul(module(x), w)), [x] + module.parameters(),
                           max_coords=max_coords, seed=seed)


def test_cpa_grad_check_reference_shapes():
    assert _check(CpaModule(4, rng(1)), (1, 4, 5, 5), 1, 15) < 1e-4
    assert _check(CpaModule(8, rng(2)), (1, 8, 6, 6), 2, 10) < 1e-4


def test_spa_grad_check_reference_shape():
    assert _check(SpaModule(4, 3, 3, rng(3)), (1, 4, 3, 3), 3, 15) < 1e-4


def test_obr_grad_check_on_1x1_maps():
    assert _check(ObrBlock(4, 4, rng(4), 4), (4, 4, 1, 1), 4, 20) < 1e-4


def test_dpa_grad_check():
    assert _check(DpaModule(4, 4, 4, rng(5)), (4, 4, 4, 4), 5, 8) < 1e-4
