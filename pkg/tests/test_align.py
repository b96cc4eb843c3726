import numpy as np
import pytest

from mrefsr.align import OffsetField, align_reference, match_offsets
from mrefsr.errors import ContractViolation
from mrefsr.metrics import downscale4
from mrefsr.synthetic import texture
from mrefsr.tensor import Tensor


def gather_oracle(f, off):
    c, h, w = f.shape
    oh, ow = off.shape
    out = np.zeros((c, oh, ow))
    for y in range(oh):
        for x in range(ow):
            sy = min(max(y + off.dy[y, x], 0), h - 1)
            sx = min(max(x + off.dx[y, x], 0), w - 1)
            out[:, y, x] = f[:, sy, sx]
    return out


class TestOffsetField:
    def test_shape_validation(self):
        with pytest.raises(ContractViolation):
            OffsetField(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_at_scale(self):
        off = OffsetField(np.array([[1, -2]]), np.array([[0, 3]]))
        up = off.at_scale(2)
        assert up.shape == (2, 4)
        np.testing.assert_array_equal(up.dx, [[2, 2, -4, -4]] * 2)
        np.testing.assert_array_equal(up.dy, [[0, 0, 6, 6]] * 2)

    @pytest.mark.parametrize("op", ["hflip", "vflip", "transpose"])
    def test_geometry_commutes_with_alignment(self, op, rng):
        f = rng.standard_normal((2, 7, 9))
        off = OffsetField(rng.integers(-2, 3, (5, 6)), rng.integers(-2, 3, (5, 6)))
        aligned = gather_oracle(f, off)
        if op == "hflip":
            f2, off2, expect = f[:, :, ::-1], off.hflip(9), aligned[:, :, ::-1]
        elif op == "vflip":
            f2, off2, expect = f[:, ::-1], off.vflip(7), aligned[:, ::-1]
        else:
            f2, off2, expect = f.transpose(0, 2, 1), off.transpose(), aligned.transpose(0, 2, 1)
        # only check pixels whose source was not clamped (flips move the clamp edge)
        ys, xs = np.mgrid[0:5, 0:6]
        ok = (ys + off.dy >= 0) & (ys + off.dy < 7) & (xs + off.dx >= 0) & (xs + off.dx < 9)
        if op == "hflip":
            ok = ok[:, ::-1]
        elif op == "vflip":
            ok = ok[::-1]
        elif op == "transpose":
            ok = ok.T
        got = gather_oracle(np.ascontiguousarray(f2), off2)
        np.testing.assert_array_equal(got[:, ok], expect[:, ok])


class TestAlign:
    def test_identity(self, rng):
        f = rng.standard_normal((3, 4, 5))
        np.testing.assert_array_equal(align_reference(Tensor(f), OffsetField.identity(4, 5)).data, f)

    def test_uniform_shift_on_ramp(self):
        ramp = np.tile(np.arange(5.0), (1, 3, 1))
        out = align_reference(Tensor(ramp), OffsetField.uniform(3, 5, 1, 0)).data
        np.testing.assert_array_equal(out[0, 0], [1, 2, 3, 4, 4])

    def test_gather_oracle(self, rng):
        f = rng.standard_normal((2, 6, 7))
        off = OffsetField(rng.integers(-8, 9, (6, 7)), rng.integers(-8, 9, (6, 7)))
        np.testing.assert_array_equal(align_reference(Tensor(f), off).data, gather_oracle(f, off))


class TestMatch:
    def test_recovers_known_shift(self):
        rng = np.random.default_rng(5)
        canvas = texture(rng, 80, 80)
        hr, ref = canvas[8:72, 8:72], canvas[0:64, 4:68]  # ref pixel p shows target pixel p + (2, 1) on LR grid
        off = match_offsets(downscale4(hr), ref)
        inner = (slice(2, 14), slice(2, 14))
        assert np.mean(off.dx[inner] == 1) > 0.9
        assert np.mean(off.dy[inner] == 2) > 0.9

    def test_blocked_equals_full(self, rng):
        lr = rng.integers(0, 256, (6, 7, 3), dtype=np.uint8)
        ref = rng.integers(0, 256, (20, 24, 3), dtype=np.uint8)
        a, b = match_offsets(lr, ref), match_offsets(lr, ref, block=5)
        np.testing.assert_array_equal(a.dx, b.dx)
        np.testing.assert_array_equal(a.dy, b.dy)

    def test_brute_force_nearest(self, rng):
        from mrefsr.align import _descriptors

        lr = rng.integers(0, 256, (4, 5, 3), dtype=np.uint8)
        ref = rng.integers(0, 256, (12, 16, 3), dtype=np.uint8)
        off = match_offsets(lr, ref)
        dl = _descriptors(lr / 255.0)
        dr = _descriptors(downscale4(ref) / 255.0)
        for p in range(20):
            scores = [float(dl[p] @ dr[q]) for q in range(12)]
            best = max(range(12), key=lambda q: (scores[q], -q))
            y, x = divmod(p, 5)
            assert (y + off.dy[y, x], x + off.dx[y, x]) == divmod(best, 4)
