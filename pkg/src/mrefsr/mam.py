"""Multi-reference attention: pixel-wise softmax fusion of N aligned reference features.

At every pixel the LR query is compared with each reference key by an
inner product over channels; a softmax across references turns the
scores into weights that blend the reference values. Key and value
projections are shared by all references, so any ``N >= 1`` works with
one parameter set.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .optim import conv_init
from .tensor import Tensor, as_tensor, conv2d, grad_enabled, make, stack


@dataclass
class MamParams:
    """3x3 projections for query (LR feature) and key/value (aligned references)."""

    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor

    @classmethod
    def from_store(cls, store, prefix):
        return cls(*(store[f"{prefix}.{p}.{s}"] for p in ("conv_q", "conv_k", "conv_v") for s in ("w", "b")))


def register_mam(store, prefix, rng, lr_channels, ref_channels, embed_channels=None):
    embed = embed_channels or lr_channels
    for name, c_in in (("conv_q", lr_channels), ("conv_k", ref_channels), ("conv_v", ref_channels)):
        w, b = conv_init(rng, embed, c_in, store.dtype)
        store.add(f"{prefix}.{name}.w", w)
        store.add(f"{prefix}.{name}.b", b)
    return MamParams.from_store(store, prefix)


def _stack_refs(refs):
    if isinstance(refs, Tensor):
        if refs.data.ndim != 4:
            raise ContractViolation(f"stacked references must be (N, C, H, W), got {refs.shape}")
        return refs
    refs = list(refs)
    if not refs:
        raise ContractViolation("at least one reference feature is required")
    return stack(refs)


def project_qkv(f_lr, refs, params):
    """``Q = conv_q(F_LR)``; ``K_i = conv_k(F_a_i)``; ``V_i = conv_v(F_a_i)``.

    ``refs`` is a list of ``(C, H, W)`` tensors or one stacked
    ``(N, C, H, W)`` tensor. K and V come back stacked along the first axis.
    Without gradient recording a list is projected one reference at a time,
    which keeps the convolution workspace at single-reference size.
    """
    f_lr = as_tensor(f_lr)
    q = conv2d(f_lr, params.q_w, params.q_b)
    if not grad_enabled() and not isinstance(refs, Tensor):
        refs = [as_tensor(r) for r in refs]
        if not refs:
            raise ContractViolation("at least one reference feature is required")
        for r in refs:
            if r.shape[1:] != f_lr.shape[1:]:
                raise ContractViolation(f"reference grid {r.shape[1:]} != LR grid {f_lr.shape[1:]}")
        k = stack([conv2d(r, params.k_w, params.k_b) for r in refs])
        v = stack([conv2d(r, params.v_w, params.v_b) for r in refs])
        return q, k, v
    stacked = _stack_refs(refs)
    if stacked.shape[2:] != f_lr.shape[1:]:
        raise ContractViolation(f"reference grid {stacked.shape[2:]} != LR grid {f_lr.shape[1:]}")
    k = conv2d(stacked, params.k_w, params.k_b)
    v = conv2d(stacked, params.v_w, params.v_b)
    return q, k, v


# Logits more than this far below the per-pixel maximum are raised to it.
# Past a gap of about 37 float64 rounds the leading weight to exactly 1
# and the rest to 0; at 30 every weight stays strictly inside (0, 1) for
# N >= 2 while moving any weight by less than 1e-12.
LOGIT_GAP = 30.0


def _shifted_logits(z):
    """``(u, clipped, top)``: ``u = max(z - max z, -LOGIT_GAP)`` and where the floor was hit."""
    top = np.argmax(z, axis=0)
    u = z - np.take_along_axis(z, top[None], axis=0)
    clipped = u < -LOGIT_GAP
    return np.where(clipped, -LOGIT_GAP, u), clipped, top


def softmax_refs(z):
    """Softmax over axis 0 of the max-shifted logits, gap-limited to ``LOGIT_GAP``."""
    u, _, _ = _shifted_logits(np.asarray(z))
    e = np.exp(u)
    return e / e.sum(axis=0, keepdims=True)


def attention_weights(q, ks):
    """Per-pixel weights ``att[i, y, x]`` over references; sums to one at every pixel."""
    q, ks = as_tensor(q), as_tensor(ks)
    if ks.data.ndim != 4 or ks.shape[0] == 0:
        raise ContractViolation(f"keys must be stacked (N>=1, C, H, W), got {ks.shape}")
    if ks.shape[1:] != q.shape:
        raise ContractViolation(f"key shape {ks.shape[1:]} != query shape {q.shape}")
    scores = np.einsum("chw,nchw->nhw", q.data, ks.data)
    u, clipped, top = _shifted_logits(scores)
    e = np.exp(u)
    att = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        du = att * (g - (att * g).sum(axis=0, keepdims=True))
        dz = np.where(clipped, 0.0, du)
        # the subtracted maximum reaches only the unclipped logits
        np.put_along_axis(dz, top[None], np.take_along_axis(dz, top[None], axis=0) - dz.sum(axis=0)[None],
                          axis=0)
        if q.requires_grad:
            q.accumulate(np.einsum("nhw,nchw->chw", dz, ks.data))
        if ks.requires_grad:
            ks.accumulate(dz[:, None] * q.data[None])

    return make(att, (q, ks), backward)


def fuse_refs(att, vs):
    """``F_fref(:, y, x) = sum_i att[i, y, x] * V_i(:, y, x)``, summed in reference order."""
    att, vs = as_tensor(att), as_tensor(vs)
    if vs.data.ndim != 4 or att.shape[0] != vs.shape[0]:
        raise ContractViolation(f"{att.shape[0]} attention maps for {vs.shape[0]} values")
    if att.shape[1:] != vs.shape[2:]:
        raise ContractViolation(f"attention grid {att.shape[1:]} != value grid {vs.shape[2:]}")
    out = att.data[0][None] * vs.data[0]
    for i in range(1, vs.shape[0]):
        out = out + att.data[i][None] * vs.data[i]

    def backward(g):
        if att.requires_grad:
            att.accumulate(np.einsum("chw,nchw->nhw", g, vs.data))
        if vs.requires_grad:
            vs.accumulate(att.data[:, None] * g[None])

    return make(out, (att, vs), backward)


def mam_forward(f_lr, refs, params, return_attention=False):
    q, k, v = project_qkv(f_lr, refs, params)
    att = attention_weights(q, k)
    fused = fuse_refs(att, v)
    if return_attention:
        return fused, att
    return fused
