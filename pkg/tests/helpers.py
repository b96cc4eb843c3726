import json
import math
import os

import numpy as np

from mrefsr.lmr.manifest import load_manifest
from mrefsr.metrics import save_png
from mrefsr.tensor import Tensor


def numeric_grads(fn, arrays, weights, h=1e-6):
    """Central-difference gradients of ``sum(fn(*arrays) * weights)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = np.sum(fn(*[Tensor(x) for x in arrays]).data * weights)
            flat[i] = orig - h
            down = np.sum(fn(*[Tensor(x) for x in arrays]).data * weights)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grads(fn, arrays, weights):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    out.backward(weights)
    return [t.grad for t in ts]


def assert_grads_match(fn, arrays, rng, tol=1e-7):
    out = fn(*[Tensor(a) for a in arrays])
    weights = rng.standard_normal(out.shape)
    for a, n in zip(analytic_grads(fn, arrays, weights), numeric_grads(fn, arrays, weights)):
        assert np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n))) < tol


def keys_cubic(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def axis_taps(i, scale, n):
    """(index, weight) list for output sample i, stretched kernel when shrinking."""
    c = (i + 0.5) / scale - 0.5
    k = min(scale, 1.0)
    half = 2.0 / k
    taps = []
    for j in range(math.floor(c - half) - 1, math.ceil(c + half) + 2):
        w = k * keys_cubic(k * (c - j))
        if w != 0.0:
            taps.append((min(max(j, 0), n - 1), w))
    s = sum(w for _, w in taps)
    return [(j, w / s) for j, w in taps]


def kernel_sum_resize(img, scale):
    """Direct per-pixel 2-D kernel sum, one output pixel at a time."""
    h, w, _ = img.shape
    oh, ow = int(h * scale), int(w * scale)
    out = np.zeros((oh, ow, 3))
    src = img.astype(np.float64)
    for y in range(oh):
        ty = axis_taps(y, scale, h)
        for x in range(ow):
            tx = axis_taps(x, scale, w)
            acc = np.zeros(3)
            for jy, wy in ty:
                for jx, wx in tx:
                    acc += wy * wx * src[jy, jx]
            out[y, x] = acc
    return out


def write_scene(root, doc, images):
    os.makedirs(root, exist_ok=True)
    for name, img in images.items():
        save_png(os.path.join(root, name + ".png"), img)
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(doc, fh)
    return load_manifest(os.path.join(root, "manifest.json"))


def oracle_stats(doc, target, ref):
    """Pair ratios straight from the raw manifest document."""
    t_depth, r_depth = {}, {}
    for p in doc["points3d"]:
        for o in p["observations"]:
            if o["image_id"] == target:
                t_depth[p["point_id"]] = o["depth"]
            if o["image_id"] == ref:
                r_depth[p["point_id"]] = o["depth"]
    shared = [pid for pid in t_depth if pid in r_depth]
    r_olp = len(shared) / len(t_depth)
    ratios = sorted(t_depth[p] / r_depth[p] for p in shared)
    if not ratios:
        return r_olp, 0.0
    mid = len(ratios) // 2
    r_s = ratios[mid] if len(ratios) % 2 else (ratios[mid - 1] + ratios[mid]) / 2
    return r_olp, r_s
