import math

import numpy as np
import pytest

from seam import tensor as T
from seam.data import synth_blobs
from seam.heads import (
    CEHead,
    GMHead,
    ce_baseline_loss,
    gm_logit,
    gm_logits,
    intra_compact_loss,
    mahalanobis_sq,
    margin_cls_loss,
    seam_components,
    seam_total_loss,
)
from seam.nn import Linear
from seam.optim import make_state, sgd_nesterov_step
from seam.pipeline import margin_metrics
from seam.search import RESNET_BITS, LayerShape, SearchLayerState

from gradcheck import check_params


def head(means, log_var=None, margin=0.0, mode="multiplicative"):
    means = np.asarray(means, dtype=np.float64)
    h = GMHead(means.shape[0], means.shape[1], margin, mode)
    h.means.data[...] = means
    if log_var is not None:
        h.log_var.data[...] = log_var
    return h


def worked(margin=0.5):
    return head([[0.0, 0.0], [2.0, 0.0]], margin=margin)


# -- Mahalanobis / logits ------------------------------------------------------

def test_mahalanobis_examples(f64):
    h = head([[1.0, -2.0], [0.0, 0.0]])
    assert mahalanobis_sq(T.Tensor([1.0, -2.0]), 0, h).item() == 0.0
    assert mahalanobis_sq(T.Tensor([1.0, 0.0]), 1, h).item() == pytest.approx(1.0)
    h = head([[0.0, 0.0], [5.0, 5.0]], log_var=[[math.log(4), 0.0], [0.0, 0.0]])
    assert mahalanobis_sq(T.Tensor([2.0, 1.0]), 0, h).item() == pytest.approx(2.0, abs=1e-12)


def test_logit_at_mean_ignores_margin(f64):
    for m in (0.0, 0.5, 3.0):
        h = head([[1.0, 1.0], [0.0, 3.0]], margin=m)
        assert gm_logit(T.Tensor([1.0, 1.0]), 0, h, target_class=0).item() == pytest.approx(math.log(0.5), abs=1e-12)


def test_logit_symmetry_no_margin(f64):
    h = worked(0.0)
    g = T.Tensor([1.0, 0.0])
    z = gm_logits(T.reshape(g, (1, 2)), h).data[0]
    assert z[0] == pytest.approx(z[1])
    np.testing.assert_allclose(T.softmax(T.Tensor(z), 0).data, [0.5, 0.5])


def test_logit_worked_margin(f64):
    h = worked(0.5)
    g = T.Tensor([1.0, 0.0])
    assert gm_logit(g, 0, h, target_class=0).item() == pytest.approx(-1.4431471805599454, abs=1e-12)
    assert gm_logit(g, 1, h, target_class=0).item() == pytest.approx(-1.1931471805599454, abs=1e-12)


def test_additive_mode(f64):
    h = head([[0.0, 0.0], [2.0, 0.0]], margin=0.5, mode="additive")
    g = T.Tensor([1.0, 0.0])
    assert gm_logit(g, 0, h, target_class=0).item() == pytest.approx(math.log(0.5) - 0.5 - 0.5)
    assert gm_logit(g, 1, h, target_class=0).item() == pytest.approx(math.log(0.5) - 0.5)


def test_head_validation():
    with pytest.raises(ValueError):
        GMHead(2, 3, margin=-0.1)
    with pytest.raises(ValueError):
        GMHead(1, 3)
    with pytest.raises(ValueError):
        GMHead(2, 3, margin_mode="power")


def test_log_var_clamp():
    h = GMHead(2, 2)
    h.log_var.data[...] = [[-30, 0], [4, 30]]
    h.clamp()
    np.testing.assert_array_equal(h.log_var.data, [[-10, 0], [4, 10]])


def test_init_distribution():
    h = GMHead(10, 64, rng=np.random.default_rng(0))
    assert np.all(h.log_var.data == 0)
    assert 0.08 < h.means.data.std() < 0.12
    assert h.prior == 0.1


# -- losses ------------------------------------------------------------------

def test_margin_loss_worked(f64):
    loss = margin_cls_loss(T.Tensor([[1.0, 0.0]]), np.array([0]), worked(0.5)).item()
    assert loss == pytest.approx(math.log1p(math.exp(0.25)), abs=1e-12)
    # frozen oracle value (hand evaluation of log(1 + e^0.25))
    assert loss == pytest.approx(0.8259394, abs=1e-4)


def test_margin_loss_zero_margin_is_ce(f64, rng):
    means = rng.standard_normal((4, 3))
    h = head(means)
    g = rng.standard_normal((10, 3))
    y = rng.integers(0, 4, 10)
    z = math.log(0.25) - 0.5 * ((g[:, None, :] - means[None]) ** 2).sum(-1)
    lse = np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) + z.max(1)
    want = float(np.mean(lse - z[np.arange(10), y]))
    assert margin_cls_loss(T.Tensor(g), y, h).item() == pytest.approx(want, rel=1e-12)


def test_margin_loss_saturated(f64):
    h = head([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], margin=0.7)
    assert margin_cls_loss(T.Tensor([[0.0, 0.0]]), np.array([0]), h).item() < 1e-6


def test_label_range_errors():
    h = GMHead(3, 2)
    with pytest.raises(ValueError, match="labels"):
        margin_cls_loss(T.Tensor(np.zeros((1, 2))), np.array([3]), h)
    with pytest.raises(ValueError):
        intra_compact_loss(T.Tensor(np.zeros((1, 2))), np.array([-1]), h)
    with pytest.raises(ValueError):
        ce_baseline_loss(T.Tensor(np.zeros((1, 2))), np.array([5]), CEHead(3, 2))


def test_intra_examples(f64):
    h = head([[1.0, 2.0], [0.0, 0.0]])
    assert intra_compact_loss(T.Tensor([[1.0, 2.0]]), np.array([0]), h).item() == 0.0
    assert intra_compact_loss(T.Tensor([[2.0, 2.0]]), np.array([0]), h).item() == pytest.approx(0.5)
    h = head([[0.0, 0.0], [3.0, 3.0]], log_var=[[math.log(4), 0.0], [0.0, 0.0]])
    val = intra_compact_loss(T.Tensor([[2.0, 1.0]]), np.array([0]), h).item()
    assert val == pytest.approx(0.5 * (math.log(4) + 1 + 0 + 1), abs=1e-12)
    assert val == pytest.approx(1.6931472, abs=1e-4)


def test_intra_nonneg_unit_variance(rng):
    for _ in range(50):
        h = head(rng.standard_normal((3, 4)))
        v = intra_compact_loss(T.Tensor(rng.standard_normal((6, 4))), rng.integers(0, 3, 6), h).item()
        assert v >= 0


def _worked_state():
    return SearchLayerState("l", LayerShape(10, 10, 1, 1, 10, 1), RESNET_BITS)


def test_total_loss_examples(f64):
    g, y, h = T.Tensor([[1.0, 0.0]]), np.array([0]), worked(0.5)
    cls = margin_cls_loss(g, y, h).item()
    assert seam_total_loss(g, y, h, lam=0.0, gamma=0.0).item() == cls
    # intra-compactness 1.6931 from the variance example, complexity 14062.5 from the uniform-logit layer
    h2 = head([[0.0, 0.0], [2.0, 0.0]], margin=0.5)
    comps = seam_components(g, y, h2, [_worked_state()], RESNET_BITS)
    assert comps["comp"].item() == pytest.approx(14062.5)
    combo = 0.8259394 + 0.1 * 1.6931472 + 1e-5 * 14062.5
    assert combo == pytest.approx(1.1358791, abs=1e-6)
    total = seam_total_loss(g, y, h2, [_worked_state()], lam=0.1, gamma=1e-5, cands=RESNET_BITS).item()
    inc = intra_compact_loss(g, y, h2).item()
    assert total == pytest.approx(cls + 0.1 * inc + 1e-5 * 14062.5, abs=1e-12)


def test_total_loss_rejects_negative():
    with pytest.raises(ValueError):
        seam_total_loss(T.Tensor(np.zeros((1, 2))), np.array([0]), worked(), lam=-1)
    with pytest.raises(ValueError):
        ce_baseline_loss(T.Tensor(np.zeros((1, 2))), np.array([0]), CEHead(2, 2), gamma=-1)


def test_ce_baseline_examples(f64, rng):
    ce = CEHead(2, 3, weight=np.ones((2, 3)))
    g = T.Tensor(rng.standard_normal((5, 3)))
    assert ce_baseline_loss(g, rng.integers(0, 2, 5), ce).item() == pytest.approx(math.log(2))
    ce5 = CEHead(5, 3, weight=np.zeros((5, 3)))
    assert ce_baseline_loss(g, rng.integers(0, 5, 5), ce5).item() == pytest.approx(math.log(5))
    w = rng.standard_normal((4, 3))
    ce4 = CEHead(4, 3, weight=w)
    y = rng.integers(0, 4, 5)
    z = g.data @ w.T
    m = z.max(1, keepdims=True)
    want = float(np.mean(np.log(np.exp(z - m).sum(1)) + m[:, 0] - z[np.arange(5), y]))
    assert ce_baseline_loss(g, y, ce4).item() == pytest.approx(want, rel=1e-12)
    st_ = _worked_state()
    assert ce_baseline_loss(g, y, ce4, [st_], 1e-5, RESNET_BITS).item() == pytest.approx(want + 0.140625)


# -- invariants ----------------------------------------------------------------

def test_posterior_normalization(rng):
    h = GMHead(5, 4, rng=rng)
    h.log_var.data[...] = rng.uniform(-2, 2, (5, 4))
    z = gm_logits(T.Tensor(rng.standard_normal((20, 4))), h, rng.integers(0, 5, 20))
    p = T.softmax(z, axis=1).data
    np.testing.assert_allclose(p.sum(1), 1, atol=1e-6)


def test_nearest_mean_rule(rng):
    means = rng.standard_normal((6, 3)) * 3
    h = head(means, log_var=np.full((6, 3), 0.7))
    g = rng.standard_normal((200, 3)) * 3
    z = gm_logits(T.Tensor(g), h).data
    d2 = ((g[:, None] - means[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(z.argmax(1), d2.argmin(1))


@pytest.mark.parametrize("mode", ["multiplicative", "additive"])
def test_margin_monotone(mode, f64, rng):
    means = rng.standard_normal((3, 4))
    g = rng.standard_normal((8, 4))
    y = rng.integers(0, 3, 8)
    prev = -np.inf
    for m in np.linspace(0, 2, 9):
        cur = margin_cls_loss(T.Tensor(g), y, head(means, margin=m, mode=mode)).item()
        if mode == "multiplicative":
            assert cur > prev
        else:
            assert cur >= prev
        prev = cur


@pytest.mark.parametrize("which", ["margin", "intra", "seam", "ce"])
def test_loss_gradients_fd(which, f64):
    rng = np.random.default_rng(["margin", "intra", "seam", "ce"].index(which))
    h = GMHead(3, 4, margin=0.4, rng=rng)
    h.log_var.data[...] = rng.uniform(-0.5, 0.5, (3, 4))
    ce = CEHead(3, 4, rng=rng)
    g = T.Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    y = rng.integers(0, 3, 6)
    st_ = SearchLayerState("l", LayerShape(4, 4), RESNET_BITS)
    st_.alpha.data[:] = rng.standard_normal(4)
    st_.beta.data[:] = rng.standard_normal(4)
    fns = {
        "margin": (lambda: margin_cls_loss(g, y, h), [g] + h.parameters()),
        "intra": (lambda: intra_compact_loss(g, y, h), [g] + h.parameters()),
        "seam": (lambda: seam_total_loss(g, y, h, [st_], 0.1, 1e-3, RESNET_BITS), [g] + h.parameters() + st_.parameters()),
        "ce": (lambda: ce_baseline_loss(g, y, ce, [st_], 1e-3, RESNET_BITS), [g] + ce.parameters() + st_.parameters()),
    }
    fn, params = fns[which]
    res = check_params(fn, params)
    assert max(res.values()) <= 1.0, res


# -- separation effect -------------------------------------------------------------

def train_two_layer(seed, seam, epochs=30):
    """Two linear layers on 4-class blobs; returns the test separation ratio."""
    train = synth_blobs(4, 16, 100, 3.0, 1.0, seed, "train")
    test = synth_blobs(4, 16, 100, 3.0, 1.0, seed, "test")
    rng = np.random.default_rng(seed)
    l1 = Linear("l1", rng, 16, 32, bias=True)
    l2 = Linear("l2", rng, 32, 8, bias=True)
    feats = lambda x: l2(T.relu(l1(x)))
    hd = GMHead(4, 8, margin=0.1, rng=rng) if seam else CEHead(4, 8, rng=rng)
    params = l1.parameters() + l2.parameters() + hd.parameters()
    opt = make_state(0.9, 0.0)
    order = np.random.default_rng(seed + 100)
    for _ in range(epochs):
        idx = order.permutation(len(train))
        for s in range(0, len(idx), 50):
            b = idx[s : s + 50]
            for p in params:
                p.zero_grad()
            g = feats(T.Tensor(train.images[b]))
            y = train.labels[b]
            loss = seam_total_loss(g, y, hd, lam=0.1) if seam else ce_baseline_loss(g, y, hd)
            T.backward(loss)
            sgd_nesterov_step(params, opt, 0.01)
            if seam:
                hd.clamp()
    with T.no_grad():
        f = feats(T.Tensor(test.images)).data
    return margin_metrics(f, test.labels)[0]["separation_ratio"]


def test_two_layer_separation_effect():
    wins = sum(train_two_layer(s, True) > train_two_layer(s, False) for s in range(3))
    assert wins >= 2
