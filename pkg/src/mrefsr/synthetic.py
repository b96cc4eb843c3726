"""Procedural training groups whose references hold shifted crops of the HR target."""

import numpy as np

from .align import OffsetField
from .metrics import downscale4, quantize
from .pipeline import LABEL_ORDER, RefGroupSample


def texture(rng, h, w, n_waves=6, n_blobs=12):
    """Random color texture (oriented sinusoids plus soft blobs), uint8.

    Wave frequencies reach past the Nyquist limit of the x4 downscaled image,
    so part of the detail survives only in the HR crops.
    """
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w, 3))
    for _ in range(n_waves):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.2, 1.4)
        phase = rng.uniform(0, 2 * np.pi)
        color = rng.uniform(-1, 1, size=3)
        wave = np.sin(freq * (xs * np.cos(theta) + ys * np.sin(theta)) + phase)
        img += wave[..., None] * color
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(2, 8)
        color = rng.uniform(-1.5, 1.5, size=3)
        img += np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * r * r))[..., None] * color
    img -= img.min()
    img /= max(img.max(), 1e-9)
    return quantize(24 + 208 * img)


def _band_masks(h, w, n):
    """Vertical bands on an ``h x w`` grid, one per reference."""
    edges = np.linspace(0, w, n + 1).round().astype(int)
    masks = []
    for i in range(n):
        m = np.zeros((h, w), bool)
        m[:, edges[i]:edges[i + 1]] = True
        masks.append(m)
    return masks


def make_group(rng, lr_size=12, n_refs=5, max_shift=2, complementary=False, name=""):
    """One synthetic group on a shared canvas.

    Reference ``i`` is the canvas crop displaced by a random shift of up
    to ``max_shift`` LR pixels (``4 * max_shift`` HR pixels), with the
    matching uniform offset field. With ``complementary`` set, reference
    ``i`` keeps the target's content only inside vertical band ``i`` (in
    target coordinates) and shows an unrelated texture elsewhere, so the
    references together cover the target and each alone covers a fifth.
    """
    hr_size = 4 * lr_size
    margin = 4 * max_shift
    side = hr_size + 2 * margin
    canvas = texture(rng, side, side)
    hr = canvas[margin:margin + hr_size, margin:margin + hr_size].copy()
    masks = _band_masks(lr_size, lr_size, n_refs) if complementary else None
    refs, offsets = [], []
    for i in range(n_refs):
        sy, sx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
        y0, x0 = margin + 4 * sy, margin + 4 * sx
        ref = canvas[y0:y0 + hr_size, x0:x0 + hr_size].copy()
        if complementary:
            other = texture(rng, hr_size, hr_size)
            # reference pixel p shows target pixel p + shift; keep it only inside band i
            ys, xs = np.mgrid[0:lr_size, 0:lr_size]
            ty, tx = ys + sy, xs + sx
            inside = (ty >= 0) & (ty < lr_size) & (tx >= 0) & (tx < lr_size)
            keep = np.zeros((lr_size, lr_size), bool)
            keep[inside] = masks[i][ty[inside], tx[inside]]
            keep_hr = np.repeat(np.repeat(keep, 4, axis=0), 4, axis=1)
            ref = np.where(keep_hr[..., None], ref, other)
        refs.append(ref)
        # target LR pixel q corresponds to reference pixel q - shift
        offsets.append(OffsetField.uniform(lr_size, lr_size, -sx, -sy))
    labels = [LABEL_ORDER[i] if i < len(LABEL_ORDER) else "L" for i in range(n_refs)]
    return RefGroupSample(lr=downscale4(hr), refs=refs, hr=hr, labels=labels, offsets=offsets, name=name)


def make_groups(seed, count, **kwargs):
    rng = np.random.default_rng(seed)
    return [make_group(rng, name=f"synthetic-{seed}-{i}", **kwargs) for i in range(count)]
