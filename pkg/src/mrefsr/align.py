"""Integer offset fields and reference-feature alignment.

An :class:`OffsetField` lives on the LR grid: the feature at LR pixel
``(y, x)`` corresponds to reference pixel ``(y + dy, x + dx)`` at the
same scale (the reference's 1x grid is its HR size divided by 4). At
scale ``s`` each LR pixel covers an ``s x s`` block and offsets are
multiplied by ``s``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .metrics import downscale4
from .tensor import as_tensor, gather_hw


@dataclass
class OffsetField:
    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        self.dx = np.asarray(self.dx, dtype=np.int64)
        self.dy = np.asarray(self.dy, dtype=np.int64)
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise ContractViolation(f"offset components must be equal 2-D grids, got {self.dx.shape} and {self.dy.shape}")

    @property
    def shape(self):
        return self.dx.shape

    @classmethod
    def identity(cls, h, w):
        return cls(np.zeros((h, w), np.int64), np.zeros((h, w), np.int64))

    @classmethod
    def uniform(cls, h, w, dx, dy):
        return cls(np.full((h, w), dx, np.int64), np.full((h, w), dy, np.int64))

    def at_scale(self, s):
        if s == 1:
            return self
        rep = lambda a: np.repeat(np.repeat(a, s, axis=0), s, axis=1) * s
        return OffsetField(rep(self.dx), rep(self.dy))

    def hflip(self, ref_w):
        """Offsets after mirroring both images left-right (``ref_w`` on the 1x grid)."""
        w = self.shape[1]
        return OffsetField((ref_w - w) - self.dx[:, ::-1], self.dy[:, ::-1])

    def vflip(self, ref_h):
        h = self.shape[0]
        return OffsetField(self.dx[::-1], (ref_h - h) - self.dy[::-1])

    def transpose(self):
        return OffsetField(self.dy.T.copy(), self.dx.T.copy())


def gather_indices(offsets, ref_h, ref_w):
    h, w = offsets.shape
    ys, xs = np.mgrid[0:h, 0:w]
    iy = np.clip(ys + offsets.dy, 0, ref_h - 1)
    ix = np.clip(xs + offsets.dx, 0, ref_w - 1)
    return iy, ix


def align_reference(f_ref, offsets):
    """``F_a(:, y, x) = F_ref(:, y + dy, x + dx)`` with indices clamped to the reference extent."""
    f_ref = as_tensor(f_ref)
    if f_ref.data.ndim != 3:
        raise ContractViolation(f"align_reference expects (C, H, W), got {f_ref.shape}")
    iy, ix = gather_indices(offsets, *f_ref.shape[1:])
    return gather_hw(f_ref, iy, ix)


def _descriptors(img):
    # 3x3 RGB neighbourhoods, mean-removed and unit-normalized
    h, w, _ = img.shape
    pad = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    d = np.concatenate([pad[y:y + h, x:x + w] for y in range(3) for x in range(3)], axis=2)
    d = d.reshape(h * w, -1)
    d = d - d.mean(axis=1, keepdims=True)
    n = np.linalg.norm(d, axis=1, keepdims=True)
    return d / np.maximum(n, 1e-8)


def match_offsets(lr, ref, block=None):
    """Dense nearest-descriptor correspondence from the LR image into a reference.

    The reference is first shrunk by 4 so both live on the LR grid. Cost
    is one ``(H*W) x (H_ref*W_ref)`` correlation matrix, i.e. linear in the
    reference area; ``block`` bounds it to that many LR rows of the matrix
    at a time. Ties go to the first (row-major) reference position.
    """
    lr = np.asarray(lr, dtype=np.float64) / 255.0
    small = downscale4(ref).astype(np.float64) / 255.0
    h, w = lr.shape[:2]
    hr, wr = small.shape[:2]
    d_lr, d_ref = _descriptors(lr), _descriptors(small)
    if block is None:
        best = np.argmax(d_lr @ d_ref.T, axis=1)
    else:
        best = np.concatenate([np.argmax(d_lr[i:i + block] @ d_ref.T, axis=1)
                               for i in range(0, len(d_lr), block)])
    ry, rx = np.divmod(best, wr)
    ys, xs = np.mgrid[0:h, 0:w]
    return OffsetField(rx.reshape(h, w) - xs, ry.reshape(h, w) - ys)
