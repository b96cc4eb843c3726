"""Spatial-aware filtering: gate and correct the fused reference feature.

Two small conv nets read ``F_LR || F_fref``. One yields a multiplicative
mask in (0, 2), the other an additive correction, and the selected
feature is ``F_fref * M_mul + M_add``. With the last conv of both nets at
zero the module is the identity on ``F_fref``.
"""

from dataclasses import dataclass

from .errors import ContractViolation
from .optim import conv_init
from .tensor import add, as_tensor, clamp, concat_channels, conv2d, leaky_relu, mul, scale, sigmoid

LEAKY_SLOPE = 0.1
# Gate pre-activations are clipped here: past about 36.7 sigmoid rounds to exactly 1
# in float64, which would put M_mul on the closed end of (0, 2). At 30 the clip moves the
# mask by under 1e-13 and the discarded gradient is below 1e-13 as well.
GATE_CLIP = 30.0


@dataclass
class SafmParams:
    # each map is a list of (weight, bias) pairs: conv -> lrelu -> conv
    f1: list
    f2: list
    slope: float = LEAKY_SLOPE

    @classmethod
    def from_store(cls, store, prefix, depth=2, slope=LEAKY_SLOPE):
        def layers(net):
            return [(store[f"{prefix}.{net}.conv{i}.w"], store[f"{prefix}.{net}.conv{i}.b"]) for i in range(depth)]

        return cls(layers("f1"), layers("f2"), slope)


@dataclass
class MaskPair:
    m_mul: object
    m_add: object


def register_safm(store, prefix, rng, lr_channels, fref_channels, depth=2, zero_last=True,
                  slope=LEAKY_SLOPE):
    if depth < 1:
        raise ContractViolation("SAFM maps need at least one conv")
    for net in ("f1", "f2"):
        c_in = lr_channels + fref_channels
        for i in range(depth):
            last = i == depth - 1
            w, b = conv_init(rng, fref_channels, c_in, store.dtype, zero=zero_last and last)
            store.add(f"{prefix}.{net}.conv{i}.w", w)
            store.add(f"{prefix}.{net}.conv{i}.b", b)
            c_in = fref_channels
    return SafmParams.from_store(store, prefix, depth, slope)


def _mapping(x, layers, slope):
    for i, (w, b) in enumerate(layers):
        x = conv2d(x, w, b)
        if i < len(layers) - 1:
            x = leaky_relu(x, slope)
    return x


def compute_masks(f_lr, f_fref, params):
    f_lr, f_fref = as_tensor(f_lr), as_tensor(f_fref)
    if f_lr.shape[-2:] != f_fref.shape[-2:]:
        raise ContractViolation(f"SAFM: LR grid {f_lr.shape[-2:]} != fused grid {f_fref.shape[-2:]}")
    joint = concat_channels(f_lr, f_fref)
    m_mul = scale(sigmoid(clamp(_mapping(joint, params.f1, params.slope), -GATE_CLIP, GATE_CLIP)), 2.0)
    m_add = _mapping(joint, params.f2, params.slope)
    return MaskPair(m_mul, m_add)


def apply_selection(f_fref, masks):
    return add(mul(f_fref, masks.m_mul), masks.m_add)


def safm_forward(f_lr, f_fref, params):
    return apply_selection(f_fref, compute_masks(f_lr, f_fref, params))
