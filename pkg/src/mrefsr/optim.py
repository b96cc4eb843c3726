"""Named parameter storage and the Adam update."""

from collections import OrderedDict

import numpy as np

from .errors import ContractViolation
from .tensor import DEFAULT_DTYPE, Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_LR = 1e-4
ADAM_EPS = 1e-8


class ParamStore:
    """Ordered ``name -> Tensor`` map with Adam moments and a step counter.

    Mutation (gradient accumulation, :func:`adam_step`) assumes a single
    writer; concurrent readers may run forward passes between steps.
    """

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self.params = OrderedDict()
        self.m = {}
        self.v = {}
        self.step = 0

    def add(self, name, data):
        if name in self.params:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self):
        return list(self.params)

    def size(self):
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_dict(self):
        return OrderedDict((k, t.data.copy()) for k, t in self.params.items())

    def load_state_dict(self, state, strict=True):
        missing = [k for k in self.params if k not in state]
        extra = [k for k in state if k not in self.params]
        if strict and (missing or extra):
            raise ContractViolation(f"state mismatch: missing={missing} unexpected={extra}")
        for k, arr in state.items():
            if k not in self.params:
                continue
            t = self.params[k]
            if arr.shape != t.shape:
                raise ContractViolation(f"{k}: shape {arr.shape} != {t.shape}")
            t.data[...] = arr

    def astype(self, dtype):
        """Copy of the store in another precision (moments reset)."""
        out = ParamStore(dtype)
        for k, t in self.params.items():
            out.add(k, t.data)
        return out


def adam_step(store, lr=ADAM_LR, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """Bias-corrected Adam update applied in place; clears gradients afterwards."""
    missing = [k for k, t in store.items() if t.grad is None]
    if missing:
        raise ContractViolation(f"adam_step: no gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    store.step += 1
    t = store.step
    corr1 = 1.0 - beta1 ** t
    corr2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None
    return store


def conv_init(rng, c_out, c_in, dtype=DEFAULT_DTYPE, zero=False):
    """Fan-in scaled uniform kernel, bounds +/- sqrt(6 / fan_in), and a zero bias."""
    shape = (c_out, c_in, 3, 3)
    if zero:
        w = np.zeros(shape, dtype=dtype)
    else:
        bound = np.sqrt(6.0 / (c_in * 9))
        w = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return w, np.zeros(c_out, dtype=dtype)
