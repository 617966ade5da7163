import math

import numpy as np
import pytest

from actfusion import tensor as T
from actfusion.fusion import (
    PERIOD_LENGTH,
    AsyncFusionNet,
    anchor_range,
    async_loss,
    build_period_prediction,
    evaluation_anchors,
    fuse_pair,
    period_times,
)
from actfusion.gradcheck import check_gradients
from actfusion.layers import Conv2d
from actfusion.tensor import ShapeError, Tensor


def fuser_with(w1, w2, b):
    conv = Conv2d(2, 1, 1, np.random.default_rng(0))
    conv.weight.data[:] = np.array([w1, w2]).reshape(1, 2, 1, 1)
    conv.bias.data[:] = b
    return conv


def net(seed=0, n=4, **kw):
    return AsyncFusionNet(6, 5, n, np.random.default_rng(seed), **kw)


def rand_feats(rng, b=None):
    shape = (6,) if b is None else (b, 6)
    return Tensor(rng.standard_normal(shape)), [Tensor(rng.standard_normal(shape)) for _ in range(PERIOD_LENGTH)]


# fuse_pair ----------------------------------------------------------------------------

def test_fuse_projection_and_sum():
    a, o = Tensor(np.array([1.0, -2.0, 3.0])), Tensor(np.array([0.5, 0.5, -1.0]))
    np.testing.assert_array_equal(fuse_pair(fuser_with(1, 0, 0), a, o).data, a.data)
    np.testing.assert_array_equal(fuse_pair(fuser_with(1, 1, 0), a, o).data, a.data + o.data)
    np.testing.assert_allclose(fuse_pair(fuser_with(2, -1, 0.5), a, o).data, 2 * a.data - o.data + 0.5)


def test_fuse_batched_and_multichannel():
    rng = np.random.default_rng(0)
    a, o = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4)))
    conv = Conv2d(2, 2, 1, rng)
    out = fuse_pair(conv, a, o)
    assert out.shape == (3, 8)
    w = conv.weight.data[:, :, 0, 0]
    expect = np.concatenate([w[c, 0] * a.data + w[c, 1] * o.data + conv.bias.data[c] for c in range(2)], axis=1)
    np.testing.assert_allclose(out.data, expect, atol=1e-14)


def test_fuse_rejects_length_mismatch():
    with pytest.raises(ShapeError):
        fuse_pair(fuser_with(1, 1, 0), Tensor(np.ones(3)), Tensor(np.ones(4)))


@pytest.mark.parametrize("seed", range(20))
def test_fuse_gradients(seed):
    rng = np.random.default_rng(seed)
    conv = Conv2d(2, 1, 1, rng)
    a = Tensor(rng.standard_normal(5), requires_grad=True)
    o = Tensor(rng.standard_normal(5), requires_grad=True)
    w = rng.standard_normal(5)
    res = check_gradients(lambda: (T.tanh(fuse_pair(conv, a, o)) * Tensor(w)).sum(), conv.parameters() + [a, o])
    assert res.ok(1e-4), res


# integration ----------------------------------------------------------------------------

def test_network_shape_invariants():
    m = net()
    assert len(m.fusers) == 5 and len(m.units) == 5 and len(m.heads) == 5
    assert all(f.weight.shape[1] == 2 for f in m.fusers)
    assert len(net(share_fusers=True).fusers) == 1


def test_zero_params_give_uniform_prediction():
    m = net()
    for p in m.parameters():
        p.data[:] = 0
    _, pred = m(*rand_feats(np.random.default_rng(1)))
    np.testing.assert_allclose(pred, 0.25, atol=1e-15)


def test_prediction_is_last_unit_softmax_and_sums_to_one():
    m = net(2)
    logits, pred = m(*rand_feats(np.random.default_rng(2)))
    assert len(logits) == 5
    np.testing.assert_allclose(pred, T.softmax_np(logits[-1].data), atol=1e-15)
    assert pred.sum() == pytest.approx(1.0, abs=1e-12)
    mean_net = net(2, predict="mean")
    logits, pred = mean_net(*rand_feats(np.random.default_rng(2)))
    np.testing.assert_allclose(pred, np.mean([T.softmax_np(l.data) for l in logits], axis=0), atol=1e-15)


def test_reversed_sequence_changes_prediction():
    m = net(3)
    anchor, others = rand_feats(np.random.default_rng(3))
    _, p = m(anchor, others)
    _, p_rev = m(anchor, others[::-1])
    assert not np.allclose(p, p_rev)


def test_no_accidental_translation_invariance():
    m = net(4)
    rng = np.random.default_rng(4)
    fused = [Tensor(rng.standard_normal(6)) for _ in range(5)]
    _, p = m.integrate(fused)
    _, p_shift = m.integrate([f + 1.0 for f in fused])
    assert not np.allclose(p, p_shift)
    for p_ in m.parameters():
        p_.data[:] = 0
    np.testing.assert_array_equal(m.integrate(fused)[1], m.integrate([f + 1.0 for f in fused])[1])


def test_wrong_sequence_length_rejected():
    m = net()
    anchor, others = rand_feats(np.random.default_rng(0))
    with pytest.raises(ShapeError):
        m(anchor, others[:4])
    with pytest.raises(ShapeError):
        m.integrate([Tensor(np.ones(6))] * 6)


@pytest.mark.parametrize("seed", range(20))
def test_fusion_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    m = net(seed)
    anchor, others = rand_feats(rng, b=2)
    anchor.requires_grad = True
    gt = np.array([seed % 4, (seed + 3) % 4])
    res = check_gradients(lambda: async_loss(m(anchor, others)[0], gt, 2.0, 4), m.parameters() + [anchor],
                          max_per_tensor=10, rng=rng)
    assert res.ok(1e-4), res


# async loss --------------------------------------------------------------------------------

def scalar_async(rows, gt, gamma, n):
    total = 0.0
    for logits in rows:
        m = max(logits)
        total += logits[gt] - (m + math.log(sum(math.exp(v - m) for v in logits)))
    return -gamma / n * total


def test_async_uniform_oracle():
    val = async_loss([Tensor(np.zeros(4)) for _ in range(5)], 1, 2.0, 4).item()
    assert abs(val - scalar_async([[0.0] * 4] * 5, 1, 2.0, 4)) <= 1e-10
    assert val == pytest.approx(0.5 * 5 * math.log(4), abs=1e-12)
    assert val == pytest.approx(3.4657, abs=1e-4)


@pytest.mark.parametrize("seed", range(10))
def test_async_matches_scalar_loop(seed):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((5, 6)) * 2
    gt = int(rng.integers(6))
    val = async_loss([Tensor(r) for r in rows], gt, 2.0, 6).item()
    assert abs(val - scalar_async(rows.tolist(), gt, 2.0, 6)) <= 1e-10
    batched = async_loss([Tensor(np.stack([r, r])) for r in rows], [gt, gt], 2.0, 6).item()
    assert batched == pytest.approx(val, abs=1e-12)


def test_async_gamma_zero_and_monotone():
    rows = [Tensor(np.zeros(4)) for _ in range(5)]
    assert async_loss(rows, 0, 0.0, 4).item() == 0.0
    prev = async_loss(rows, 2, 2.0, 4).item()
    for bump in (0.5, 1.0, 3.0):
        z = np.zeros(4)
        z[2] = bump
        cur = async_loss(rows[:4] + [Tensor(z)], 2, 2.0, 4).item()
        assert cur < prev
        prev = cur
    with pytest.raises(ValueError):
        async_loss(rows, 4, 2.0, 4)


# periods and two-model prediction -------------------------------------------------------

def test_period_times_center_and_left():
    seq, anchor = period_times(20, 5)
    assert seq.tolist() == [10, 15, 20, 25, 30] and anchor == 20
    seq, anchor = period_times(20, 5, "left")
    assert seq.tolist() == [20, 25, 30, 35, 40] and anchor == 20
    with pytest.raises(ValueError):
        period_times(20, 5, "right")


def test_syn_equals_asyn_delta_zero():
    seq, anchor = period_times(17, 0)
    assert seq.tolist() == [17] * 5 and anchor == 17
    m = net(7)
    rng = np.random.default_rng(7)
    feats = Tensor(rng.standard_normal((30, 6)))
    a = feats[17]
    others = [feats[int(t)] for t in seq]
    synced = [feats[17]] * 5
    np.testing.assert_array_equal(m(a, others)[1], m(a, synced)[1])


def test_anchor_range_and_evaluation_grid():
    assert anchor_range(60, 5) == (10, 49)
    assert anchor_range(60, 0) == (0, 59)
    assert anchor_range(60, 5, "left") == (0, 39)
    anchors = evaluation_anchors(60, 5, 12)
    assert len(anchors) == 12 and anchors[0] == 10 and anchors[-1] == 49
    assert np.all(np.diff(anchors) > 0)
    assert anchor_range(8, 5) == (3, 3)


def test_build_period_prediction():
    u = np.full(4, 0.25)
    np.testing.assert_array_equal(build_period_prediction(u, u), np.full(4, 0.5))
    onehot = np.eye(4)[2]
    assert build_period_prediction(onehot, u).argmax() == 2
    a, b = np.random.default_rng(0).dirichlet(np.ones(4), size=2)
    np.testing.assert_array_equal(build_period_prediction(a, b), build_period_prediction(b, a))
    with pytest.raises(ShapeError):
        build_period_prediction(np.ones(3), np.ones(4))
