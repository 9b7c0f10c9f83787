"""Classification heads on penultimate features.

``GMHead`` models features as a Gaussian mixture (diagonal covariance,
uniform prior) and scores classes by log-likelihood; the margin enlarges the
true-class distance. ``CEHead`` is the bias-free linear softmax baseline.
"""
import math

import numpy as np

from . import tensor as T
from .nn import Parameter
from .search import complexity_loss

LOG_VAR_BOUND = 10.0


class GMHead:
    def __init__(self, num_classes, feature_dim, margin=0.1, margin_mode="multiplicative", rng=None, name="gm"):
        if num_classes < 2:
            raise ValueError("GMHead needs at least 2 classes")
        if margin < 0:
            raise ValueError(f"margin must be non-negative, got {margin}")
        if margin_mode not in ("multiplicative", "additive"):
            raise ValueError(f"unknown margin mode {margin_mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.means = Parameter(0.1 * rng.standard_normal((num_classes, feature_dim)), f"{name}.means", "gm-head")
        self.log_var = Parameter(np.zeros((num_classes, feature_dim)), f"{name}.log_var", "gm-head")
        self.margin = float(margin)
        self.margin_mode = margin_mode

    @property
    def prior(self):
        return 1.0 / self.num_classes

    def parameters(self):
        return [self.means, self.log_var]

    def clamp(self):
        np.clip(self.log_var.data, -LOG_VAR_BOUND, LOG_VAR_BOUND, out=self.log_var.data)


class CEHead:
    def __init__(self, num_classes, feature_dim, rng=None, weight=None, name="ce"):
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            weight = rng.standard_normal((num_classes, feature_dim)) / math.sqrt(feature_dim)
        self.weight = Parameter(np.array(weight), f"{name}.weight", "model-weight")
        self.num_classes = num_classes

    def parameters(self):
        return [self.weight]

    def logits(self, features):
        return T.linear(features, self.weight)


def _check_labels(labels, k):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def mahalanobis_sq_all(features, head):
    """(N, K) variance-normalized squared distances to every class mean."""
    g = T.reshape(T.as_tensor(features), (-1, 1, head.feature_dim))
    mu = T.reshape(head.means, (1, head.num_classes, head.feature_dim))
    inv_var = T.reshape(T.exp(T.mul(head.log_var, -1.0)), (1, head.num_classes, head.feature_dim))
    return T.sum_(T.mul(T.square(T.sub(g, mu)), inv_var), axis=2)


def gm_logits(features, head, labels=None):
    """(N, K) class log-scores; the margin applies only at each sample's label."""
    d2 = mahalanobis_sq_all(features, head)
    n = d2.shape[0]
    k = head.num_classes
    dtype = d2.data.dtype
    base = T.sub(math.log(head.prior), T.reshape(T.mul(T.sum_(head.log_var, axis=1), 0.5), (1, k)))
    if labels is None or head.margin == 0:
        return T.sub(base, T.mul(d2, 0.5))
    onehot = T.one_hot(_check_labels(labels, k), k, dtype)
    if head.margin_mode == "multiplicative":
        scale = 0.5 * (1.0 + head.margin * onehot)
        return T.sub(base, T.mul(d2, scale))
    return T.sub(T.sub(base, T.mul(d2, 0.5)), head.margin * onehot)


def mahalanobis_sq(g, k, head):
    """Squared Mahalanobis distance of one feature vector to class ``k``."""
    return T.index(T.index(mahalanobis_sq_all(T.reshape(T.as_tensor(g), (1, -1)), head), 0), k)


def gm_logit(g, k, head, target_class=None):
    labels = None if target_class is None else np.array([target_class])
    z = gm_logits(T.reshape(T.as_tensor(g), (1, -1)), head, labels)
    return T.index(T.index(z, 0), k)


def margin_cls_loss(features, labels, head):
    labels = _check_labels(labels, head.num_classes)
    return T.cross_entropy(gm_logits(features, head, labels), labels)


def intra_compact_loss(features, labels, head):
    """Mean Gaussian negative log-likelihood (class-independent constants dropped)."""
    labels = _check_labels(labels, head.num_classes)
    features = T.as_tensor(features)
    onehot = T.one_hot(labels, head.num_classes, features.data.dtype)
    mu_y = T.matmul(onehot, head.means)
    lv_y = T.matmul(onehot, head.log_var)
    nll = T.add(lv_y, T.mul(T.square(T.sub(features, mu_y)), T.exp(T.mul(lv_y, -1.0))))
    return T.mul(T.sum_(nll), 0.5 / features.shape[0])


def seam_components(features, labels, head, states=None, cands=None):
    cls = margin_cls_loss(features, labels, head)
    inc = intra_compact_loss(features, labels, head)
    comp = complexity_loss(states, cands) if states else T.Tensor(np.array(0.0))
    return {"cls": cls, "inc": inc, "comp": comp}


def seam_total_loss(features, labels, head, states=None, lam=0.1, gamma=0.0, cands=None):
    if lam < 0 or gamma < 0:
        raise ValueError("lambda and gamma must be non-negative")
    c = seam_components(features, labels, head, states if gamma else None, cands)
    total = T.add(c["cls"], T.mul(c["inc"], lam))
    if gamma:
        total = T.add(total, T.mul(c["comp"], gamma))
    return total


def ce_baseline_loss(features, labels, ce_head, states=None, gamma=0.0, cands=None):
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    labels = _check_labels(labels, ce_head.num_classes)
    loss = T.cross_entropy(ce_head.logits(features), labels)
    if gamma and states:
        loss = T.add(loss, T.mul(complexity_loss(states, cands), gamma))
    return loss
