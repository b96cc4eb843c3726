"""Samples, the x4 forward pass, reconstruction loss, training and per-group evaluation."""

import logging
from dataclasses import dataclass, replace

import numpy as np

from .align import OffsetField
from .errors import ContractViolation, NonFiniteError
from .metrics import check_rgb, y_metrics
from .model import MrefsrModel, predict
from .optim import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, ADAM_LR, adam_step
from .tensor import Tensor, mean_abs_diff, no_grad, scale

log = logging.getLogger(__name__)

LABEL_ORDER = ("H", "M", "M", "L", "L")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RefGroupSample:
    """One LR input, its HR target (optional at inference) and N HR references."""

    lr: np.ndarray
    refs: list
    hr: np.ndarray = None
    labels: list = None
    offsets: list = None  # OffsetField per reference on the LR grid; None -> identity
    name: str = ""

    def __post_init__(self):
        self.lr = check_rgb(self.lr, "LR image")
        self.refs = [check_rgb(r, "reference") for r in self.refs]
        if self.hr is not None:
            self.hr = check_rgb(self.hr, "HR target")
            if self.hr.shape[:2] != (4 * self.lr.shape[0], 4 * self.lr.shape[1]):
                raise ContractViolation(f"HR {self.hr.shape[:2]} is not 4x LR {self.lr.shape[:2]}")
        if self.labels is None:
            self.labels = [LABEL_ORDER[i] if i < len(LABEL_ORDER) else "L" for i in range(len(self.refs))]
        if len(self.labels) != len(self.refs):
            raise ContractViolation(f"{len(self.labels)} labels for {len(self.refs)} references")
        if self.offsets is not None and len(self.offsets) != len(self.refs):
            raise ContractViolation(f"{len(self.offsets)} offset fields for {len(self.refs)} references")

    @property
    def n_refs(self):
        return len(self.refs)

    def first(self, n):
        """Copy keeping only the first ``n`` references."""
        if not 0 <= n <= self.n_refs:
            raise ContractViolation(f"n_refs={n} outside [0, {self.n_refs}]")
        offsets = None if self.offsets is None else self.offsets[:n]
        return replace(self, refs=self.refs[:n], labels=self.labels[:n], offsets=offsets)

    def permuted(self, order):
        order = list(order)
        offsets = None if self.offsets is None else [self.offsets[i] for i in order]
        return replace(self, refs=[self.refs[i] for i in order], labels=[self.labels[i] for i in order],
                       offsets=offsets)


def forward_sr(sample, model):
    """Super-resolve ``sample.lr`` by 4 using its references; returns an 8-bit RGB image."""
    with no_grad():
        return predict(model, sample.lr, sample.refs, sample.offsets).image()


def to_unit(img):
    """``(H, W, 3)`` uint8 -> ``(3, H, W)`` float64 on [0, 1]."""
    return np.ascontiguousarray(check_rgb(img).transpose(2, 0, 1), dtype=np.float64) / 255.0


def l_rec(pred, target):
    """Mean absolute error on [0, 1]-scaled values.

    ``pred`` may be a Tensor (result is a differentiable scalar Tensor) or
    an array; ``target`` is an array. uint8 inputs are scaled by 1/255.
    """
    def unit(x):
        x = np.asarray(x)
        return x / 255.0 if x.dtype == np.uint8 else x.astype(np.float64)

    target = unit(target)
    if isinstance(pred, Tensor):
        return mean_abs_diff(pred, target.astype(pred.dtype))
    pred = unit(pred)
    if pred.shape != target.shape:
        raise ContractViolation(f"l_rec: dimension mismatch {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


@dataclass
class OptConfig:
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    augment: bool = False


def augment(sample, rng):
    """Random horizontal / vertical flips and transpose, applied to every image and offset field."""
    out = sample
    for op in ("hflip", "vflip", "transpose"):
        if rng.random() < 0.5:
            out = _geometric(out, op)
    return out


def _geometric(sample, op):
    img_op = {
        "hflip": lambda a: a[:, ::-1],
        "vflip": lambda a: a[::-1],
        "transpose": lambda a: a.transpose(1, 0, 2),
    }[op]
    offsets = None
    if sample.offsets is not None:
        offsets = []
        for ref, off in zip(sample.refs, sample.offsets):
            rh, rw = ref.shape[0] // 4, ref.shape[1] // 4
            offsets.append({"hflip": lambda o: o.hflip(rw), "vflip": lambda o: o.vflip(rh),
                            "transpose": lambda o: o.transpose()}[op](off))
    c = lambda a: np.ascontiguousarray(img_op(a))
    return replace(sample, lr=c(sample.lr), hr=None if sample.hr is None else c(sample.hr),
                   refs=[c(r) for r in sample.refs], offsets=offsets)


def sample_loss(sample, model):
    if sample.hr is None:
        raise ContractViolation(f"sample {sample.name!r} has no HR target")
    p = predict(model, sample.lr, sample.refs, sample.offsets)
    return l_rec(p.pred, to_unit(sample.hr))


def train_step(batch, model, opt=None, rng=None):
    """Forward, L_rec, backward and one Adam step over ``batch``; returns the mean loss.

    Gradients of all samples accumulate into the model's store before the
    single optimizer update.
    """
    opt = opt or OptConfig()
    if not batch:
        raise ContractViolation("train_step: empty batch")
    store = model.store
    store.zero_grad()
    w_rec = model.config.loss_weights[0]
    total = 0.0
    for sample in batch:
        if opt.augment:
            sample = augment(sample, rng or np.random.default_rng())
        try:
            loss = sample_loss(sample, model)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteError(f"loss is {value}")
            scale(loss, w_rec / len(batch)).backward()
        except NonFiniteError as exc:
            raise TrainingDiverged(f"diverged at optimizer step {store.step + 1}: {exc}") from exc
        total += value
    for t in store.params.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    adam_step(store, opt.lr, opt.beta1, opt.beta2, opt.eps)
    return total / len(batch)


def train(model, samples, steps, batch_size=4, opt=None, seed=0, log_fn=None):
    """Run ``steps`` optimizer steps over ``samples``; returns the loss trace.

    Batches cycle through a seeded permutation of the samples, so two runs
    with equal seed, model and data produce identical traces.
    """
    opt = opt or OptConfig()
    rng = np.random.default_rng(seed)
    trace = []
    order = []
    for step in range(steps):
        batch = []
        while len(batch) < min(batch_size, len(samples)):
            if not order:
                order = list(rng.permutation(len(samples)))
            batch.append(samples[order.pop()])
        loss = train_step(batch, model, opt, rng)
        trace.append(loss)
        if log_fn is not None:
            log_fn({"step": step + 1, "loss": loss, "lr": opt.lr})
    return trace


def eval_group(sample, model, n_refs=None):
    """Y-channel ``(psnr_db, ssim)`` of the x4 output using the first ``n_refs`` references."""
    if sample.hr is None:
        raise ContractViolation(f"sample {sample.name!r} has no HR target")
    n = sample.n_refs if n_refs is None else n_refs
    if not 1 <= n <= sample.n_refs and not (n == 0 and sample.n_refs == 0):
        raise ContractViolation(f"n_refs={n} outside [1, {sample.n_refs}]")
    return y_metrics(forward_sr(sample.first(n), model), sample.hr)


__all__ = [
    "MrefsrModel", "OffsetField", "OptConfig", "RefGroupSample", "TrainingDiverged", "augment",
    "eval_group", "forward_sr", "l_rec", "train", "train_step",
]
