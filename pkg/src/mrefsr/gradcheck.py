"""Central finite-difference check of analytic gradients."""

import numpy as np

from .errors import ContractViolation


def _scalar(loss):
    value = float(np.asarray(loss.data if hasattr(loss, "data") else loss).reshape(()))
    if not np.isfinite(value):
        raise ContractViolation(f"grad_check: non-finite loss {value}")
    return value


def grad_check(loss_fn, store, h=1e-6, per_param=False, corrupt=None):
    """Compare backprop gradients with central differences for every parameter entry.

    ``loss_fn(store)`` must return a scalar Tensor built from the store's
    parameters. The error for one entry is
    ``|analytic - numeric| / max(1, |numeric|)``; the maximum over all
    entries is returned, or a ``{name: max error}`` dict when
    ``per_param`` is set. ``corrupt`` is a test hook that maps
    ``(name, analytic_grad)`` to a modified gradient, used to confirm the
    checker notices a wrong backward pass.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ContractViolation(f"grad_check: step h={h} outside [1e-6, 1e-3]")
    store.zero_grad()
    loss = loss_fn(store)
    _scalar(loss)
    loss.backward()
    analytic = {}
    for name, p in store.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if corrupt is not None:
            g = corrupt(name, g)
        analytic[name] = g
    store.zero_grad()

    errors = {}
    for name, p in store.items():
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _scalar(loss_fn(store))
            flat[i] = orig - h
            down = _scalar(loss_fn(store))
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(ga[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        errors[name] = worst
    store.zero_grad()
    if per_param:
        return errors
    return max(errors.values(), default=0.0)


def tiny_model_check(seed=0, lr_size=8, n_refs=2, channels=2, h=1e-6, corrupt=None):
    """Whole-network check on a reduced model; returns ``{param name: max error}``.

    Every parameter, including the zero-initialized output and mask
    layers, is redrawn from U(-0.5, 0.5) so no path is trivially flat.
    """
    from .model import ModelConfig, MrefsrModel, predict
    from .pipeline import l_rec

    rng = np.random.default_rng(seed)
    model = MrefsrModel(ModelConfig(channels=channels, res_blocks=1, ref_blocks=1, restore_blocks=1,
                                    seed=seed))
    for _, p in model.store.items():
        p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
    lr = rng.integers(0, 256, (lr_size, lr_size, 3), dtype=np.uint8)
    refs = [rng.integers(0, 256, (4 * lr_size, 4 * lr_size, 3), dtype=np.uint8) for _ in range(n_refs)]
    target = rng.uniform(0, 1, (3, 4 * lr_size, 4 * lr_size))
    return grad_check(lambda st: l_rec(predict(model, lr, refs).pred, target), model.store, h=h,
                      per_param=True, corrupt=corrupt)
