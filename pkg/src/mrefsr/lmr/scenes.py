"""Procedural scenes with known overlap and depth ratios, for tests and demos.

Each target observes ``target_points`` points of its own. A reference
built from the triple ``(label, r_olp, r_s)`` sees the first
``round(r_olp * target_points)`` of them at depth ``depth_t / r_s`` plus
``private_points`` points nobody else sees. Private points keep every
reference's own observation set large, so a reference used as a target
never finds an H partner and yields no group.
"""

import os

import numpy as np

from ..metrics import quantize, save_png
from ..synthetic import texture
from .manifest import ImageEntry, Observation, Point3D, SceneManifest

DEFAULT_SPECS = (("H", 0.5, 1.0), ("M", 0.2, 0.8), ("M", 0.2, 0.8), ("L", 0.05, 1.0), ("L", 0.5, 0.5))


def make_scene(root, seed=0, n_targets=1, specs=DEFAULT_SPECS, size=320, target_points=100,
               private_points=400, duplicate=True, name="synthetic"):
    """Write PNGs and ``manifest.json`` under ``root``; returns the manifest path.

    With ``duplicate`` set, every target also gets a near copy (PSNR well
    above the dedup threshold) that sees all of the target's points at
    the same pixels and depths.
    """
    rng = np.random.default_rng(seed)
    os.makedirs(root, exist_ok=True)
    images, points = [], []
    next_pid = 0

    def add_image(image_id, img):
        path = f"{image_id}.png"
        save_png(os.path.join(root, path), img)
        h, w = img.shape[:2]
        images.append(ImageEntry(image_id, path, w, h))

    def position():
        return float(rng.uniform(0, size)), float(rng.uniform(0, size))

    for t in range(n_targets):
        tid = f"t{t}"
        target = texture(rng, size, size)
        add_image(tid, target)
        own = []
        for _ in range(target_points):
            x, y = position()
            depth = float(rng.uniform(1.0, 3.0))
            own.append(Point3D(next_pid, [Observation(tid, x, y, depth)]))
            next_pid += 1
        points.extend(own)
        views = [(f"{tid}_r{k}", r_olp, r_s, texture(rng, size, size)) for k, (_, r_olp, r_s) in enumerate(specs)]
        if duplicate:
            noise = rng.integers(-1, 2, size=target.shape)
            views.append((f"{tid}_dup", 1.0, 1.0, quantize(target.astype(np.float64) + noise)))
        for rid, r_olp, r_s, img in views:
            add_image(rid, img)
            for p in own[:round(r_olp * target_points)]:
                x, y = p.observations[0].x_px, p.observations[0].y_px
                if not rid.endswith("_dup"):
                    x, y = position()
                p.observations.append(Observation(rid, x, y, p.observations[0].depth / r_s))
            for _ in range(private_points):
                x, y = position()
                points.append(Point3D(next_pid, [Observation(rid, x, y, float(rng.uniform(1.0, 3.0)))]))
                next_pid += 1
    manifest = SceneManifest(name, images, points, root)
    path = os.path.join(root, "manifest.json")
    manifest.save(path)
    return path
