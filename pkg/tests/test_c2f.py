import math

import numpy as np
import pytest

from actfusion import tensor as T
from actfusion.c2f import (
    CoarseToFineNet,
    GranularityFeatures,
    c2f_lstm_loss,
    c2f_total_loss,
    granularity_loss,
    gt_groups,
    standalone_softmax_predict,
)
from actfusion.config import ConfigError, ModelConfig
from actfusion.gradcheck import check_gradients
from actfusion.tensor import Tensor

SMALL = ModelConfig(stage_channels=[3, 4, 4], side_stages=[1, 2, 3], feature_dim=6, hidden=5)
SHAPE = (2, 8, 8)


def small_net(seed=0, n=4, **kw):
    return CoarseToFineNet(SMALL, SHAPE, n, np.random.default_rng(seed), **kw)


def jitter_biases(net, seed):
    """Move zero-initialised biases off the ReLU kink, where finite differences are undefined."""
    rng = np.random.default_rng(seed + 1000)
    for name, p in net.named_parameters():
        if name.endswith("bias"):
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    return net


def zero_heads(net):
    for layer in net.fc3 + net.unit_heads:
        layer.weight.data[:] = 0
        layer.bias.data[:] = 0


def scalar_granularity_loss(logits_rows, groups, alphas, n):
    total = 0.0
    for logits, g, a in zip(logits_rows, groups, alphas):
        m = max(logits)
        lse = m + math.log(sum(math.exp(v - m) for v in logits))
        for c in g:
            total += a * (logits[c] - lse)
    return -total / n


def masks_from(groups, n):
    out = []
    for g in groups:
        m = np.zeros((1, n))
        m[0, list(g)] = 1
        out.append(m)
    return out


# feature extraction ------------------------------------------------------------------

def test_side_map_groups_have_one_channel_per_side_stage():
    net = small_net()
    assert net.group_hw == (8, 8)
    assert all(conv.weight.shape[0] == 3 for conv in net.side_convs)
    assert all(fc.in_features == 3 * 8 * 8 for fc in net.fc1)
    feats = net.extract(Tensor(np.ones((2,) + SHAPE)))
    assert len(feats) == 3 and all(x.shape == (2, 6) for x in feats)


def test_default_geometry_matches_stage_layout():
    net = CoarseToFineNet(ModelConfig(), (3, 32, 32), 8, np.random.default_rng(0))
    assert net.stage_sizes == [(32, 32), (16, 16), (8, 8), (4, 4), (2, 2)]
    assert net.group_hw == (8, 8) and net.up_factors == [1, 2, 4]


def test_zero_weights_give_zero_features():
    net = small_net()
    for name, p in net.named_parameters():
        if name.startswith(("stages", "side_convs", "fc1")):
            p.data[:] = 0
    feats = net.extract(Tensor(np.random.default_rng(1).standard_normal(SHAPE)))
    for x in feats:
        np.testing.assert_array_equal(x.data, 0)


def test_inconsistent_side_stages_rejected():
    with pytest.raises(ConfigError):
        CoarseToFineNet(ModelConfig(stage_channels=[4, 4], side_stages=[1, 2]), (1, 7, 7), 3, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        CoarseToFineNet(ModelConfig(stage_channels=[4], side_stages=[1, 1]), (1, 4, 4), 3, np.random.default_rng(0))


@pytest.mark.parametrize("seed", range(20))
def test_backbone_gradient_of_middle_feature(seed):
    net = jitter_biases(small_net(seed), seed)
    x = Tensor(np.random.default_rng(100 + seed).standard_normal((2,) + SHAPE))
    params = [p for n, p in net.named_parameters() if n.startswith(("stages", "side_convs", "fc1.1"))]
    loss = lambda: (net.extract(x)[1] * net.extract(x)[1]).sum()  # noqa: E731
    res = check_gradients(loss, params, max_per_tensor=12, rng=np.random.default_rng(seed))
    assert res.ok(1e-4), res


# granularity loss ------------------------------------------------------------------------------

def test_granularity_loss_uniform_oracle():
    logits = [Tensor(np.zeros((1, 4))) for _ in range(3)]
    groups = [(0, 1, 2, 3), (0, 1, 2), (2,)]
    val = granularity_loss(logits, masks_from(groups, 4), (0.1, 0.1, 1.0), 4).item()
    assert val == pytest.approx(0.25 * (0.4 + 0.3 + 1.0) * math.log(4), abs=1e-12)
    assert val == pytest.approx(0.5891, abs=1e-4)
    assert abs(val - scalar_granularity_loss([[0.0] * 4] * 3, groups, (0.1, 0.1, 1.0), 4)) <= 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_granularity_loss_matches_scalar_loop_on_random_logits(seed):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((3, 6)) * 3
    groups = [tuple(rng.choice(6, 5, replace=False)), tuple(rng.choice(6, 3, replace=False)), (int(rng.integers(6)),)]
    val = granularity_loss([Tensor(r[None]) for r in rows], masks_from(groups, 6), (0.1, 0.1, 1.0), 6).item()
    assert abs(val - scalar_granularity_loss(rows.tolist(), groups, (0.1, 0.1, 1.0), 6)) <= 1e-10


def test_granularity_loss_degenerate_and_linear():
    rng = np.random.default_rng(0)
    logits = [Tensor(rng.standard_normal((1, 5))) for _ in range(3)]
    masks = masks_from([(0, 1, 2, 3, 4), (1, 2, 3), (3,)], 5)
    finest_only = granularity_loss(logits, masks, (0, 0, 1), 5).item()
    assert finest_only == pytest.approx(T.softmax_cross_entropy(T.reshape(logits[2], (5,)), {3}).item() / 5, abs=1e-14)
    base = granularity_loss(logits, masks, (0.1, 0.1, 1.0), 5).item()
    doubled = granularity_loss(logits, masks, (0.1, 0.1, 2.0), 5).item()
    assert doubled - base == pytest.approx(finest_only, abs=1e-12)


def test_granularity_loss_rejects_empty_group():
    with pytest.raises(ValueError, match="empty"):
        granularity_loss([Tensor(np.zeros((1, 3)))], [np.zeros((1, 3))], (1.0,), 3)


def test_no_coarseness_identity_with_shared_logits():
    z = np.random.default_rng(4).standard_normal((1, 5))
    logits = [Tensor(z) for _ in range(3)]
    val = granularity_loss(logits, gt_groups([2], 5, 3), (0.1, 0.1, 1.0), 5).item()
    logp = z[0, 2] - np.log(np.exp(z).sum())
    assert val == pytest.approx(-(1.2 / 5) * logp, abs=1e-12)


# LSTM integration and its losses -------------------------------------------------------------------

def test_zero_lstm_params_give_zero_feature():
    net = small_net()
    for u in net.units:
        u.weight.data[:] = 0
        u.bias.data[:] = 0
    h, _ = net.integrate(net.extract(Tensor(np.ones(SHAPE))))
    np.testing.assert_array_equal(h.data, 0)


def test_integration_is_order_sensitive():
    net = small_net(3)
    feats = net.extract(Tensor(np.random.default_rng(0).standard_normal(SHAPE)))
    h, _ = net.integrate(feats)
    h_rev, _ = net.integrate(GranularityFeatures(list(reversed(feats.xs))))
    assert not np.allclose(h.data, h_rev.data)


def test_first_unit_receives_gradient_through_chain():
    net = small_net(5)
    x = Tensor(np.random.default_rng(1).standard_normal(SHAPE))
    net.integrate(net.extract(x))[0].sum().backward()
    assert np.abs(net.units[0].weight.grad).max() > 0
    assert np.abs(net.units[0].bias.grad).max() > 0


def test_lstm_loss_uniform_oracle_and_limits():
    uniform = [Tensor(np.zeros((1, 4))) for _ in range(3)]
    val = c2f_lstm_loss(uniform, [1], 2.0, 4).item()
    assert val == pytest.approx(0.5 * 3 * math.log(4), abs=1e-12)
    assert val == pytest.approx(2.0794, abs=1e-4)
    assert c2f_lstm_loss(uniform, [1], 0.0, 4).item() == 0.0
    sharp = [Tensor(np.array([[0.0, 60.0, 0.0, 0.0]])) for _ in range(3)]
    assert 0 <= c2f_lstm_loss(sharp, [1], 2.0, 4).item() < 1e-20
    with pytest.raises(ValueError):
        c2f_lstm_loss(uniform, [4], 2.0, 4)


def test_total_c2f_loss():
    l_v, l_l = Tensor(0.5891), Tensor(2.0794)
    assert c2f_total_loss(l_v, l_l).item() == pytest.approx(2.6685, abs=1e-12)
    uniform = [Tensor(np.zeros((1, 4))) for _ in range(3)]
    masks = masks_from([(0, 1, 2, 3), (0, 1, 2), (2,)], 4)
    total = c2f_total_loss(granularity_loss(uniform, masks, (0.1, 0.1, 1.0), 4),
                           c2f_lstm_loss(uniform, [2], 2.0, 4)).item()
    assert total == pytest.approx((0.25 * 1.7 + 1.5) * math.log(4), abs=1e-10)


def _loss_parts(net, x, gt):
    out = net(x)
    masks = gt_groups(gt, net.n_classes, 3)
    return (granularity_loss(out["granularity_logits"], masks, (0.1, 0.1, 1.0), net.n_classes),
            c2f_lstm_loss(out["unit_logits"], gt, 2.0, net.n_classes))


def test_loss_gradient_is_sum_of_parts_and_heads_are_separated():
    net = small_net(2)
    x = Tensor(np.random.default_rng(0).standard_normal((3,) + SHAPE))
    gt = np.array([0, 3, 1])
    grads = []
    for pick in ("v", "l", "both"):
        net.zero_grad()
        l_v, l_l = _loss_parts(net, x, gt)
        {"v": l_v, "l": l_l, "both": l_v + l_l}[pick].backward()
        grads.append({n: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for n, p in net.named_parameters()})
    g_v, g_l, g_c = grads
    for name in g_c:
        np.testing.assert_allclose(g_c[name], g_v[name] + g_l[name], atol=1e-13)
        if name.startswith(("fc2", "fc3")):
            assert not g_l[name].any() and g_v[name].any(), name
        if name.startswith("unit_heads"):
            assert not g_v[name].any() and g_l[name].any(), name
        if name.startswith(("stages", "fc1.", "units")) and not name.endswith("bias"):
            assert g_c[name].any(), name


@pytest.mark.parametrize("seed", range(20))
def test_c2f_loss_gradcheck(seed):
    net = jitter_biases(small_net(seed), seed)
    x = Tensor(np.random.default_rng(seed).standard_normal((2,) + SHAPE))
    gt = np.array([seed % 4, (seed + 1) % 4])

    def loss():
        l_v, l_l = _loss_parts(net, x, gt)
        return l_v + l_l

    res = check_gradients(loss, net.parameters(), max_per_tensor=6, rng=np.random.default_rng(seed))
    assert res.ok(1e-4), res


# standalone prediction -------------------------------------------------------------------

def test_standalone_predict():
    net = small_net(1)
    x = Tensor(np.random.default_rng(0).standard_normal((3,) + SHAPE))
    p = standalone_softmax_predict(net, x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    logits = net.final_logits(net(x))
    np.testing.assert_array_equal(p.argmax(axis=1), logits.data.argmax(axis=1))
    zero_heads(net)
    np.testing.assert_allclose(standalone_softmax_predict(net, x), 0.25, atol=1e-15)


def test_baseline_variant_has_no_lstm():
    net = small_net(0, granularities=1, use_lstm=False)
    assert not hasattr(net, "units") and net.feature_dim == SMALL.feature_dim
    out = net(Tensor(np.ones((2,) + SHAPE)))
    assert out["feature"].shape == (2, SMALL.feature_dim) and len(out["granularity_logits"]) == 1
    with pytest.raises(RuntimeError):
        net.integrate(out["features"])
