"""Uniform quantizers with straight-through gradients.

Search-time quantizers are parameter-free: weights use a symmetric
max-scaled grid, activations a fixed clip. The finetune quantizer learns its
step size (LSQ).
"""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels as K
from .tensor import Tensor, as_tensor, make


def signed_qmax(bits):
    return 2 ** (bits - 1) - 1


def unsigned_qmax(bits):
    return 2**bits - 1


def _check_bits(bits):
    if int(bits) != bits or bits < 2:
        raise ValueError(f"bit-width must be an integer >= 2, got {bits}")


def weight_scale(w, bits):
    """Per-tensor scale ``max|w| / Q_P`` (1 for an all-zero tensor)."""
    m = float(np.max(np.abs(w))) if w.size else 0.0
    return m / signed_qmax(bits) if m > 0 else 1.0


def quantize_weights_search(w, bits):
    """Symmetric max-scaled quantizer; ternary at 2 bits."""
    _check_bits(bits)
    w = as_tensor(w)
    qp = signed_qmax(bits)
    s = weight_scale(w.data, bits)
    v = w.data / s
    q = np.clip(K.round_half_away(v), -qp, qp)
    out = (q * s).astype(w.data.dtype)
    mask = np.abs(v) <= qp
    return make("quant_w", out, (w,), lambda g: (g * mask,))


def quantize_acts_search(a, bits, clip_value):
    """Unsigned fixed-clip quantizer on ``[0, clip_value]``."""
    _check_bits(bits)
    if not clip_value > 0:
        raise ValueError(f"clip_value must be positive, got {clip_value}")
    a = as_tensor(a)
    qp = unsigned_qmax(bits)
    s = clip_value / qp
    q = np.clip(K.round_half_away(a.data / s), 0, qp)
    out = (q * s).astype(a.data.dtype)
    mask = (a.data >= 0) & (a.data <= clip_value)
    return make("quant_a", out, (a,), lambda g: (g * mask,))


def mixed_quantize_acts(a, p, bits_list, clip_value):
    """Fused ``sum_j p[j] * quantize_acts_search(a, bits_list[j], clip_value)``.

    Both inputs are differentiable; the STE mask is shared by all branches.
    """
    for b in bits_list:
        _check_bits(b)
    if not clip_value > 0:
        raise ValueError(f"clip_value must be positive, got {clip_value}")
    a, p = as_tensor(a), as_tensor(p)
    qmaxes = [unsigned_qmax(b) for b in bits_list]
    ad = a.data
    out = K.mixed_act_quant(ad, clip_value, qmaxes, p.data).astype(ad.dtype, copy=False)
    psum = float(np.sum(p.data))

    def bw(g):
        mask = (ad >= 0) & (ad <= clip_value)
        dp = K.mixed_act_quant_dp(ad, g, clip_value, qmaxes).astype(p.data.dtype)
        return g * mask * psum, dp

    return make("mixed_quant_a", out, (a, p), bw)


def lsq_levels(bits, signed):
    """(Q_N, Q_P) magnitudes of the lowest and highest integer level."""
    if signed:
        qp = signed_qmax(bits)
        return qp, qp
    return 0, unsigned_qmax(bits)


def lsq_quantize(x, step, bits, signed):
    """Learned-step quantizer ``step * clip(round(x/step), -Q_N, Q_P)``.

    Gradient w.r.t. ``step`` is scaled by ``1/sqrt(count(x) * Q_P)``.
    """
    _check_bits(bits)
    x, step = as_tensor(x), as_tensor(step)
    s = float(step.data.reshape(-1)[0])
    if not s > 0:
        raise ValueError(f"LSQ step must be positive, got {s}")
    qn, qp = lsq_levels(bits, signed)
    v = x.data / s
    r = K.round_half_away(v)
    q = np.clip(r, -qn, qp)
    out = (q * s).astype(x.data.dtype)
    below = v < -qn
    above = v > qp
    inside = ~(below | above)
    scale = 1.0 / math.sqrt(x.data.size * qp)
    dstep_elem = np.where(inside, r - v, np.where(below, -qn, qp))

    def bw(g):
        gs = np.sum(g * dstep_elem) * scale
        return g * inside, np.full(step.shape, gs, dtype=step.data.dtype)

    return make("lsq", out, (x, step), bw)


def identity_quantize(x, *args, **kwargs):
    return as_tensor(x)


@dataclass
class QuantSpec:
    bits: int
    signed: bool
    mode: str = "search"  # "search" | "lsq-finetune"
    step: Optional[Tensor] = None
    clip_init: Optional[float] = None

    def __post_init__(self):
        _check_bits(self.bits)
        if self.mode not in ("search", "lsq-finetune"):
            raise ValueError(f"unknown quantizer mode {self.mode!r}")

    @property
    def qmax(self):
        return signed_qmax(self.bits) if self.signed else unsigned_qmax(self.bits)

    def init_step(self, x):
        """LSQ initializer ``2 * mean|x| / sqrt(Q_P)``; no-op once set."""
        if self.step is None:
            val = 2.0 * float(np.mean(np.abs(x))) / math.sqrt(self.qmax)
            self.step = Tensor(np.array([max(val, 1e-8)]), requires_grad=True)
        return self.step

    def __call__(self, x):
        if self.mode == "lsq-finetune":
            if self.step is None:
                raise ValueError("lsq-finetune quantizer has no step parameter")
            return lsq_quantize(x, self.step, self.bits, self.signed)
        if self.signed:
            return quantize_weights_search(x, self.bits)
        if self.clip_init is None:
            raise ValueError("search activation quantizer needs clip_init")
        return quantize_acts_search(x, self.bits, self.clip_init)
