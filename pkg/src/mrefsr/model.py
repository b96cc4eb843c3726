"""The x4 multi-reference network: extractors, per-scale fusion and restoration.

Data flow for an LR image ``H x W`` and ``N`` references (HR, sides
divisible by 4):

* the content extractor gives LR-path features at 1x, 2x and 4x the LR
  grid (pixel-shuffle upsampling for the upper two);
* the reference extractor gives each reference's features at 4x, 2x and 1x
  (stride-2 convs going down);
* at each scale the references are aligned by their offset fields, fused
  by attention and filtered by the spatial-aware masks;
* the restoration trunk starts at the 1x LR feature, absorbs the selected
  feature of each scale by concatenation + conv, runs residual blocks, and
  pixel-shuffles up; a final conv predicts a residual over the bicubic
  upsampled LR image.
"""

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import mrt
from .align import OffsetField, align_reference
from .errors import ContractViolation
from .mam import MamParams, mam_forward, register_mam
from .metrics import check_rgb, quantize, resize_float
from .optim import ParamStore, conv_init
from .safm import SafmParams, register_safm, safm_forward
from .tensor import Tensor, add, grad_enabled, concat_channels, conv2d, leaky_relu, pixel_shuffle, select, stack, subsample

SCALES = (1, 2, 4)
LOSS_WEIGHTS = (1.0, 1e-4, 1e-6)  # reconstruction, perceptual, adversarial


@dataclass
class ModelConfig:
    channels: int = 32
    res_blocks: int = 4
    ref_blocks: int = 1
    restore_blocks: int = 1
    embed_channels: int = 0  # 0 -> same as channels
    safm_depth: int = 2
    slope: float = 0.1
    scales: tuple = SCALES
    share_scale_params: bool = False
    precision: str = "f64"
    seed: int = 0
    loss_weights: tuple = field(default=LOSS_WEIGHTS)

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        self.loss_weights = tuple(float(x) for x in self.loss_weights)
        if any(s not in SCALES for s in self.scales):
            raise ContractViolation(f"scales must be a subset of {SCALES}, got {self.scales}")
        if self.precision not in ("f32", "f64"):
            raise ContractViolation(f"precision must be f32 or f64, got {self.precision!r}")
        if self.channels < 1 or self.res_blocks < 0 or self.ref_blocks < 0 or self.restore_blocks < 0:
            raise ContractViolation("channel and block counts must be non-negative (channels >= 1)")

    @property
    def embed(self):
        return self.embed_channels or self.channels

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_dict(self):
        d = asdict(self)
        d["scales"] = list(self.scales)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _add_conv(store, name, rng, c_out, c_in, zero=False):
    w, b = conv_init(rng, c_out, c_in, store.dtype, zero=zero)
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", b)


def _add_res(store, name, rng, c):
    _add_conv(store, f"{name}.conv0", rng, c, c)
    _add_conv(store, f"{name}.conv1", rng, c, c)


class MrefsrModel:
    """Parameters plus the forward graph. ``store`` holds every trainable tensor by dotted name."""

    def __init__(self, config=None, store=None):
        self.config = config or ModelConfig()
        if store is None:
            store = self._build(self.config)
        self.store = store

    @staticmethod
    def _build(cfg):
        rng = np.random.default_rng(cfg.seed)
        store = ParamStore(cfg.dtype)
        c, e = cfg.channels, cfg.embed
        _add_conv(store, "ce.stem", rng, c, 3)
        for k in range(cfg.res_blocks):
            _add_res(store, f"ce.res{k}", rng, c)
        _add_conv(store, "ce.up2", rng, 4 * c, c)
        _add_conv(store, "ce.up4", rng, 4 * c, c)

        _add_conv(store, "re.stem", rng, c, 3)
        for k in range(cfg.ref_blocks):
            _add_res(store, f"re.res{k}", rng, c)
        _add_conv(store, "re.down2", rng, c, c)
        _add_conv(store, "re.down1", rng, c, c)

        fusion_scales = [cfg.scales[0]] if cfg.share_scale_params else list(cfg.scales)
        for s in fusion_scales:
            register_mam(store, f"mam{s}", rng, c, c, e)
            register_safm(store, f"safm{s}", rng, c, e, depth=cfg.safm_depth, slope=cfg.slope)
        for s in SCALES:
            if s in cfg.scales:
                _add_conv(store, f"g{s}.fuse", rng, c, c + e)
            for k in range(cfg.restore_blocks):
                _add_res(store, f"g{s}.res{k}", rng, c)
            if s < 4:
                _add_conv(store, f"g{s}.up", rng, 4 * c, c)
        _add_conv(store, "g.out", rng, 3, c, zero=True)
        return store

    # -- parameter views -------------------------------------------------
    def conv(self, x, name):
        return conv2d(x, self.store[f"{name}.w"], self.store[f"{name}.b"])

    def lrelu(self, x):
        return leaky_relu(x, self.config.slope)

    def res_block(self, x, name):
        y = self.conv(self.lrelu(self.conv(x, f"{name}.conv0")), f"{name}.conv1")
        return add(x, y)

    def _fusion_prefix(self, s):
        return self.config.scales[0] if self.config.share_scale_params else s

    def mam_params(self, s):
        return MamParams.from_store(self.store, f"mam{self._fusion_prefix(s)}")

    def safm_params(self, s):
        return SafmParams.from_store(self.store, f"safm{self._fusion_prefix(s)}", self.config.safm_depth,
                                     self.config.slope)

    # -- tensors in --------------------------------------------------------
    def image_tensor(self, img):
        arr = check_rgb(img).astype(self.config.dtype) / 255.0
        return Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)))

    def save(self, path, meta=None):
        info = {"config": self.config.to_dict()}
        info.update(meta or {})
        mrt.save_checkpoint(path, self.store.state_dict(), info)

    @classmethod
    def load(cls, path, precision=None):
        tensors, meta = mrt.load_checkpoint(path)
        cfg = ModelConfig.from_dict(meta.get("config", {}))
        if precision:
            cfg.precision = precision
        model = cls(cfg)
        model.store.load_state_dict({k: v.astype(cfg.dtype) for k, v in tensors.items()})
        return model


def extract_features(img, model, role="target"):
    """Multi-scale features ``{1: F1, 2: F2, 4: F4}``.

    ``role="target"`` takes the LR image and returns features on the 1x, 2x
    and 4x LR grid. ``role="reference"`` takes an HR reference (sides
    divisible by 4) and returns its 4x, 2x and 1x features, the 1x grid
    being a quarter of the HR size. A stacked ``(N, 3, H, W)`` tensor of
    references is also accepted and yields stacked features.
    """
    x = img if isinstance(img, Tensor) else model.image_tensor(img)
    h, w = x.shape[-2:]
    if role == "target":
        f1 = model.lrelu(model.conv(x, "ce.stem"))
        for k in range(model.config.res_blocks):
            f1 = model.res_block(f1, f"ce.res{k}")
        f2 = model.lrelu(pixel_shuffle(model.conv(f1, "ce.up2")))
        f4 = model.lrelu(pixel_shuffle(model.conv(f2, "ce.up4")))
        return {1: f1, 2: f2, 4: f4}
    if role == "reference":
        if h % 4 or w % 4:
            raise ContractViolation(f"reference size {w}x{h} is not divisible by 4")
        f4 = model.lrelu(model.conv(x, "re.stem"))
        for k in range(model.config.ref_blocks):
            f4 = model.res_block(f4, f"re.res{k}")
        f2 = model.lrelu(subsample(model.conv(f4, "re.down2"), 2))
        f1 = model.lrelu(subsample(model.conv(f2, "re.down1"), 2))
        return {1: f1, 2: f2, 4: f4}
    raise ContractViolation(f"unknown role {role!r}")


def _reference_features(refs, model):
    """Per-reference feature dicts.

    When gradients are recorded, equally sized references share one
    batched pass (fewer graph nodes). In inference each reference goes
    through alone, so transient buffers scale with one reference.
    """
    if not refs:
        return []
    shapes = {np.shape(r) for r in refs}
    if len(shapes) == 1 and grad_enabled():
        batch = stack([model.image_tensor(r) for r in refs])
        feats = extract_features(batch, model, "reference")
        return [{s: select(f, i) for s, f in feats.items()} for i in range(len(refs))]
    return [extract_features(r, model, "reference") for r in refs]


def bicubic_base(lr):
    """Bicubic x4 upsampling of the LR image, float, on the [0, 255] scale."""
    lr = check_rgb(lr)
    h, w = lr.shape[:2]
    return resize_float(lr, 4 * h, 4 * w)


@dataclass
class Prediction:
    pred: Tensor  # (3, 4H, 4W) on the [0, 1] scale, differentiable
    base: np.ndarray  # bicubic x4 of the LR image, (4H, 4W, 3) on [0, 255]
    residual: Tensor  # pred minus base / 255
    attention: dict  # scale -> (N, sH, sW) weights, filled on request

    def image(self):
        return to_image(self.base, self.residual)


def predict(model, lr, refs, offsets=None, return_attention=False):
    """Differentiable forward pass for one LR image and its references.

    ``offsets`` is a list of :class:`OffsetField` on the LR grid, one per
    reference; ``None`` means identity for all.
    """
    cfg = model.config
    lr = check_rgb(lr, "LR image")
    h, w = lr.shape[:2]
    refs = list(refs)
    if offsets is None:
        offsets = [None] * len(refs)
    if len(offsets) != len(refs):
        raise ContractViolation(f"{len(offsets)} offset fields for {len(refs)} references")
    offsets = [OffsetField.identity(h, w) if o is None else o for o in offsets]
    for o in offsets:
        if o.shape != (h, w):
            raise ContractViolation(f"offset field {o.shape} does not match LR grid {(h, w)}")

    f_lr = extract_features(lr, model, "target")
    ref_feats = _reference_features(refs, model)
    attention = {}
    trunk = f_lr[1]
    for s in SCALES:
        if s in cfg.scales:
            if ref_feats:
                aligned = [align_reference(rf[s], off.at_scale(s)) for rf, off in zip(ref_feats, offsets)]
                fused, att = mam_forward(f_lr[s], aligned, model.mam_params(s), return_attention=True)
                if return_attention:
                    attention[s] = att.data
                selected = safm_forward(f_lr[s], fused, model.safm_params(s))
            else:
                # no references: plain single-image path
                selected = Tensor(np.zeros((cfg.embed, s * h, s * w), dtype=cfg.dtype))
            trunk = add(trunk, model.conv(concat_channels(trunk, selected), f"g{s}.fuse"))
        for k in range(cfg.restore_blocks):
            trunk = model.res_block(trunk, f"g{s}.res{k}")
        if s < 4:
            trunk = model.lrelu(pixel_shuffle(model.conv(trunk, f"g{s}.up")))
    residual = model.conv(trunk, "g.out")
    base = bicubic_base(lr)
    base_t = Tensor(np.ascontiguousarray(base.transpose(2, 0, 1) / 255.0).astype(cfg.dtype))
    return Prediction(add(base_t, residual), base, residual, attention)


def to_image(base, residual):
    """8-bit output: bicubic base plus the predicted residual, clamped and rounded."""
    res = np.asarray(residual.data if isinstance(residual, Tensor) else residual, dtype=np.float64)
    return quantize(base + 255.0 * res.transpose(1, 2, 0))
