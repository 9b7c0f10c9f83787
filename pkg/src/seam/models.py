"""Desk-scale model zoo with per-layer quantization hooks.

Presets:

* ``resnet8``: 3x3 stem (16) -> three single-block residual stages
  (16, 32, 64; 1x1 shortcut convs on the stride-2 stages) -> global pool -> linear.
* ``dwsep8``: stem -> four depthwise + pointwise pairs -> global pool -> linear.
* ``mlp``: three hidden linear layers on vector inputs (synthetic blobs).

The stem and the classifier are fixed at 8/8 bits; every other conv/linear
layer is searchable.
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Conv2d, Linear, QuantLayer
from .search import DEPTHWISE_BITS, RESNET_BITS, LayerShape
from .tensor import conv_out_size

FIXED_BITS = (8, 8)
PRESETS = ("resnet8", "dwsep8", "mlp")


@dataclass
class LayerInfo:
    name: str
    kind: str
    shape: LayerShape
    searchable: bool
    fixed_bits: Optional[Tuple[int, int]]


class Model:
    """A built network: ordered quantizable layers, batch norms and a forward graph."""

    def __init__(self, name, num_classes, feature_dim, input_shape, default_bits):
        self.name = name
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.input_shape = tuple(input_shape)
        self.default_bits = default_bits
        self.qlayers: List[QuantLayer] = []
        self.bns: List[BatchNorm] = []
        self.classifier: Optional[Linear] = None
        self.training = True

    # -- construction helpers ----------------------------------------------
    def _q(self, layer, shape):
        layer.shape = shape
        self.qlayers.append(layer)
        return layer

    def _bn(self, name, c):
        bn = BatchNorm(name, c)
        self.bns.append(bn)
        return bn

    # -- introspection -------------------------------------------------------
    def layer(self, name):
        for q in self.qlayers:
            if q.name == name:
                return q
        raise KeyError(name)

    def layer_infos(self):
        return [LayerInfo(q.name, q.kind, q.shape, q.searchable, q.fixed_bits) for q in self.qlayers]

    def layer_shapes(self):
        return {q.name: q.shape for q in self.qlayers}

    def parameters(self):
        params = []
        for q in self.qlayers:
            params.extend(q.parameters())
        for bn in self.bns:
            params.extend(bn.parameters())
        return params

    def buffers(self):
        out = {}
        for bn in self.bns:
            out.update(bn.buffers())
        return out

    def train(self):
        self.training = True
        for bn in self.bns:
            bn.training = True

    def eval(self):
        self.training = False
        for bn in self.bns:
            bn.training = False

    def clear_quantizers(self):
        for q in self.qlayers:
            q.weight_quant = q.act_quant = None

    # -- forward -------------------------------------------------------------
    def features(self, x):
        raise NotImplementedError

    def logits_from_features(self, g):
        return self.classifier(g)

    def __call__(self, x):
        return self.logits_from_features(self.features(x))


class ResNet8(Model):
    def __init__(self, num_classes, rng, input_shape=(3, 32, 32)):
        super().__init__("resnet8", num_classes, 64, input_shape, RESNET_BITS)
        c, h, w = input_shape
        self.stem = self._q(
            Conv2d("stem", rng, c, 16, 3, fixed_bits=FIXED_BITS, quantize_input=False),
            LayerShape(c, 16, 3, 3, h, w),
        )
        self.stem_bn = self._bn("stem.bn", 16)
        self.blocks = []
        c_prev = 16
        for i, (c_out, stride) in enumerate([(16, 1), (32, 2), (64, 2)], start=1):
            p = f"s{i}"
            ho, wo = conv_out_size(h, 3, stride, 1), conv_out_size(w, 3, stride, 1)
            blk = {
                "conv1": self._q(Conv2d(f"{p}.conv1", rng, c_prev, c_out, 3, stride), LayerShape(c_prev, c_out, 3, 3, ho, wo)),
                "bn1": self._bn(f"{p}.bn1", c_out),
                "conv2": self._q(Conv2d(f"{p}.conv2", rng, c_out, c_out, 3), LayerShape(c_out, c_out, 3, 3, ho, wo)),
                "bn2": self._bn(f"{p}.bn2", c_out),
                "shortcut": None,
                "out_hw": (ho, wo),
            }
            if stride != 1 or c_prev != c_out:
                blk["shortcut"] = self._q(
                    Conv2d(f"{p}.shortcut", rng, c_prev, c_out, 1, stride, pad=0),
                    LayerShape(c_prev, c_out, 1, 1, ho, wo),
                )
                blk["bn_sc"] = self._bn(f"{p}.bn_sc", c_out)
            self.blocks.append(blk)
            c_prev, h, w = c_out, ho, wo
        # appended last so model order matches forward order
        self.classifier = self._q(Linear("fc", rng, 64, num_classes, fixed_bits=FIXED_BITS), LayerShape(64, num_classes))

    def features(self, x, return_stages=False):
        out = T.relu(self.stem_bn(self.stem(x)))
        stages = []
        for blk in self.blocks:
            y = T.relu(blk["bn1"](blk["conv1"](out)))
            y = blk["bn2"](blk["conv2"](y))
            sc = out if blk["shortcut"] is None else blk["bn_sc"](blk["shortcut"](out))
            out = T.relu(T.add(y, sc))
            stages.append(out.shape)
        g = T.global_avg_pool(out)
        return (g, stages) if return_stages else g


class DWSep8(Model):
    PAIRS = [(32, 1), (64, 2), (64, 1), (128, 2)]

    def __init__(self, num_classes, rng, input_shape=(3, 32, 32)):
        super().__init__("dwsep8", num_classes, self.PAIRS[-1][0], input_shape, DEPTHWISE_BITS)
        c, h, w = input_shape
        self.stem = self._q(
            Conv2d("stem", rng, c, 16, 3, fixed_bits=FIXED_BITS, quantize_input=False),
            LayerShape(c, 16, 3, 3, h, w),
        )
        self.stem_bn = self._bn("stem.bn", 16)
        self.pairs = []
        c_prev = 16
        for i, (c_out, stride) in enumerate(self.PAIRS, start=1):
            ho, wo = conv_out_size(h, 3, stride, 1), conv_out_size(w, 3, stride, 1)
            dw = self._q(
                Conv2d(f"p{i}.dw", rng, c_prev, c_prev, 3, stride, depthwise=True),
                LayerShape(1, c_prev, 3, 3, ho, wo),
            )
            dw_bn = self._bn(f"p{i}.dw_bn", c_prev)
            pw = self._q(Conv2d(f"p{i}.pw", rng, c_prev, c_out, 1, pad=0), LayerShape(c_prev, c_out, 1, 1, ho, wo))
            pw_bn = self._bn(f"p{i}.pw_bn", c_out)
            self.pairs.append((dw, dw_bn, pw, pw_bn))
            c_prev, h, w = c_out, ho, wo
        self.classifier = self._q(
            Linear("fc", rng, c_prev, num_classes, fixed_bits=FIXED_BITS), LayerShape(c_prev, num_classes)
        )

    def features(self, x):
        out = T.relu(self.stem_bn(self.stem(x)))
        for dw, dw_bn, pw, pw_bn in self.pairs:
            out = T.relu(dw_bn(dw(out)))
            out = T.relu(pw_bn(pw(out)))
        return T.global_avg_pool(out)


class MLP(Model):
    HIDDEN = (64, 64, 32)

    def __init__(self, num_classes, rng, input_shape=(16,)):
        super().__init__("mlp", num_classes, self.HIDDEN[-1], input_shape, RESNET_BITS)
        d = input_shape[0]
        self.hidden = []
        prev = d
        for i, width in enumerate(self.HIDDEN, start=1):
            kw = {"fixed_bits": FIXED_BITS, "quantize_input": False} if i == 1 else {}
            fc = self._q(Linear(f"fc{i}", rng, prev, width, **kw), LayerShape(prev, width))
            self.hidden.append((fc, self._bn(f"bn{i}", width)))
            prev = width
        self.classifier = self._q(Linear("fc", rng, prev, num_classes, fixed_bits=FIXED_BITS), LayerShape(prev, num_classes))

    def features(self, x):
        out = T.as_tensor(x)
        for fc, bn in self.hidden:
            out = T.relu(bn(fc(out)))
        return out


def build_model(preset, num_classes, rng=None, input_shape=None):
    """Build ``preset`` for ``num_classes`` outputs. ``rng`` seeds weight init."""
    rng = rng if rng is not None else np.random.default_rng(0)
    kw = {} if input_shape is None else {"input_shape": tuple(input_shape)}
    if preset == "resnet8":
        return ResNet8(num_classes, rng, **kw)
    if preset == "dwsep8":
        return DWSep8(num_classes, rng, **kw)
    if preset == "mlp":
        return MLP(num_classes, rng, **kw)
    raise ValueError(f"unknown preset {preset!r}; expected one of {PRESETS}")
