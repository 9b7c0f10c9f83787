"""Differentiable bit-width search: logits, mixed quantized layers, BitOPs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .nn import Parameter
from .quant import mixed_quantize_acts, quantize_acts_search, quantize_weights_search


@dataclass(frozen=True)
class LayerShape:
    """Factors of a layer's MAC count. Linear layers use unit kernel and spatial size.

    For a depthwise conv ``c_in`` is the per-group input count (1).
    """

    c_in: int
    c_out: int
    k_a: int = 1
    k_b: int = 1
    h_out: int = 1
    w_out: int = 1

    def __post_init__(self):
        for f in ("c_in", "c_out", "k_a", "k_b", "h_out", "w_out"):
            v = getattr(self, f)
            if int(v) != v or v < 1:
                raise ValueError(f"LayerShape.{f} must be a positive integer, got {v}")


def layer_macs(shape: LayerShape) -> int:
    # python ints are arbitrary precision, so no overflow
    return int(shape.c_in) * int(shape.c_out) * int(shape.k_a) * int(shape.k_b) * int(shape.h_out) * int(shape.w_out)


@dataclass(frozen=True)
class BitCandidateSet:
    weight_bits: Tuple[int, ...]
    act_bits: Tuple[int, ...]

    def __post_init__(self):
        for label, bits in (("weight_bits", self.weight_bits), ("act_bits", self.act_bits)):
            bits = tuple(bits)
            if not bits:
                raise ValueError(f"{label} is empty")
            if any(int(b) != b or b < 2 for b in bits):
                raise ValueError(f"{label} entries must be integers >= 2: {bits}")
            if any(b2 <= b1 for b1, b2 in zip(bits, bits[1:])):
                raise ValueError(f"{label} must be strictly increasing: {bits}")
            object.__setattr__(self, label, tuple(int(b) for b in bits))

    @classmethod
    def uniform(cls, bits):
        return cls(tuple(bits), tuple(bits))


RESNET_BITS = BitCandidateSet.uniform((2, 3, 4, 6))
DEPTHWISE_BITS = BitCandidateSet.uniform((2, 3, 4, 5, 6))


class SearchLayerState:
    """Per-layer bit logits, or a fixed (w, a) assignment."""

    def __init__(self, layer_name, shape: LayerShape, cands: Optional[BitCandidateSet] = None, fixed_bits=None):
        self.layer_name = layer_name
        self.shape = shape
        self.fixed_bits = tuple(fixed_bits) if fixed_bits is not None else None
        if self.fixed_bits is None:
            if cands is None:
                raise ValueError(f"{layer_name}: searchable layer needs a candidate set")
            self.alpha = Parameter(np.zeros(len(cands.weight_bits)), f"{layer_name}.alpha", "bit-logit")
            self.beta = Parameter(np.zeros(len(cands.act_bits)), f"{layer_name}.beta", "bit-logit")
        else:
            self.alpha = self.beta = None

    @property
    def searchable(self):
        return self.fixed_bits is None

    def parameters(self):
        return [] if self.fixed_bits is not None else [self.alpha, self.beta]

    def __repr__(self):
        return f"SearchLayerState({self.layer_name!r}, fixed={self.fixed_bits})"


def branch_weights(logits):
    """Softmax over a logit vector (max-subtracted)."""
    return T.softmax(logits, axis=0)


def _check_lengths(state, n_w, n_a):
    if state.alpha.shape != (n_w,) or state.beta.shape != (n_a,):
        raise ValueError(
            f"{state.layer_name}: logits {state.alpha.shape}/{state.beta.shape} "
            f"do not match candidate sizes {n_w}/{n_a}"
        )


def composite_quant_weight(w, state, cands, quantizer=quantize_weights_search):
    _check_lengths(state, len(cands.weight_bits), len(cands.act_bits))
    p = branch_weights(state.alpha)
    return T.weighted_sum(p, [quantizer(w, b) for b in cands.weight_bits])


def composite_quant_act(a, state, cands, clip_value, quantizer=quantize_acts_search):
    _check_lengths(state, len(cands.weight_bits), len(cands.act_bits))
    p = branch_weights(state.beta)
    if quantizer is quantize_acts_search:
        return mixed_quantize_acts(a, p, cands.act_bits, clip_value)
    return T.weighted_sum(p, [quantizer(a, b, clip_value) for b in cands.act_bits])


def expected_bits(logits, bits):
    p = branch_weights(logits)
    return T.sum_(T.mul(p, np.asarray(bits, dtype=p.data.dtype)))


def complexity_loss(states: Sequence[SearchLayerState], cands: BitCandidateSet):
    """Softmax-expected bit-MACs summed over layers (fixed layers as constants)."""
    const = 0
    total = None
    for st in states:
        macs = layer_macs(st.shape)
        if st.fixed_bits is not None:
            const += st.fixed_bits[0] * st.fixed_bits[1] * macs
            continue
        _check_lengths(st, len(cands.weight_bits), len(cands.act_bits))
        term = T.mul(T.mul(expected_bits(st.alpha, cands.weight_bits), expected_bits(st.beta, cands.act_bits)), float(macs))
        total = term if total is None else T.add(total, term)
    if total is None:
        return T.Tensor(np.array(float(const)))
    return T.add(total, float(const))


def _argmax_low(logits):
    # np.argmax returns the first maximum, i.e. the lowest bit-width on ties
    return int(np.argmax(np.asarray(logits)))


@dataclass
class Policy:
    layers: List[Tuple[str, int, int]]
    seed: int = 0
    config_hash: str = ""
    total_bitops: float = 0.0  # G bit-MACs

    def as_dict(self) -> Dict[str, Tuple[int, int]]:
        return {name: (w, a) for name, w, a in self.layers}

    def names(self):
        return [name for name, _, _ in self.layers]

    def to_json(self) -> str:
        doc = {
            "layers": [{"name": n, "w_bits": int(w), "a_bits": int(a)} for n, w, a in self.layers],
            "total_bitops": float(self.total_bitops),
            "seed": int(self.seed),
            "config_hash": str(self.config_hash),
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Policy":
        doc = json.loads(text)
        if set(doc) != {"layers", "total_bitops", "seed", "config_hash"}:
            raise ValueError(f"policy file has keys {sorted(doc)}")
        layers = []
        for row in doc["layers"]:
            if set(row) != {"name", "w_bits", "a_bits"}:
                raise ValueError(f"policy layer entry has keys {sorted(row)}")
            layers.append((row["name"], int(row["w_bits"]), int(row["a_bits"])))
        return cls(layers, int(doc["seed"]), doc["config_hash"], float(doc["total_bitops"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())

    @classmethod
    def uniform(cls, states, w_bits, a_bits):
        """Every searchable layer at (w_bits, a_bits); fixed layers keep theirs."""
        layers = [
            (st.layer_name, *(st.fixed_bits if st.fixed_bits is not None else (w_bits, a_bits)))
            for st in states
        ]
        pol = cls(layers)
        pol.total_bitops = policy_bitops(pol, {st.layer_name: st.shape for st in states}) / 1e9
        return pol


def extract_policy(states: Sequence[SearchLayerState], cands: BitCandidateSet, seed=0, config_hash="") -> Policy:
    layers = []
    for st in states:
        if st.fixed_bits is not None:
            layers.append((st.layer_name, int(st.fixed_bits[0]), int(st.fixed_bits[1])))
        else:
            layers.append((
                st.layer_name,
                cands.weight_bits[_argmax_low(st.alpha.data)],
                cands.act_bits[_argmax_low(st.beta.data)],
            ))
    pol = Policy(layers, seed, config_hash)
    pol.total_bitops = policy_bitops(pol, {st.layer_name: st.shape for st in states}) / 1e9
    return pol


def policy_bitops(policy: Policy, shapes) -> int:
    """Exact integer bit-MACs of a concrete policy.

    ``shapes`` maps layer name -> LayerShape (or is a list aligned with the policy).
    """
    if not isinstance(shapes, dict):
        shapes = {name: s for (name, _, _), s in zip(policy.layers, shapes)}
        if len(shapes) != len(policy.layers):
            raise ValueError("policy and shape list lengths differ")
    bits = policy.as_dict()
    missing = [n for n in shapes if n not in bits]
    if missing:
        raise KeyError(f"policy is missing layers: {missing}")
    unknown = [n for n in bits if n not in shapes]
    if unknown:
        raise KeyError(f"policy names unknown layers: {unknown}")
    return sum(int(bits[n][0]) * int(bits[n][1]) * layer_macs(s) for n, s in shapes.items())


def validate_policy(policy: Policy, states: Sequence[SearchLayerState], cands: BitCandidateSet):
    """Raise ValueError unless ``policy`` covers exactly the model layers with legal bits."""
    expected = [st.layer_name for st in states]
    if policy.names() != expected:
        raise ValueError(f"policy layers {policy.names()} do not match model layers {expected}")
    for st, (name, w, a) in zip(states, policy.layers):
        if st.fixed_bits is not None:
            if (w, a) != tuple(st.fixed_bits):
                raise ValueError(f"{name}: fixed layer must be {st.fixed_bits}, policy has {(w, a)}")
        elif w not in cands.weight_bits or a not in cands.act_bits:
            raise ValueError(f"{name}: bits ({w}, {a}) outside candidates {cands}")
