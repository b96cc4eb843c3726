"""Scene manifests: images plus sparse 3D points with per-image observations.

JSON layout::

    {
      "scene": "name",
      "images": [{"id": "a", "path": "a.png", "width": 640, "height": 480}, ...],
      "points3d": [
        {"point_id": 7, "observations": [
            {"image_id": "a", "x_px": 12.5, "y_px": 40.0, "depth": 3.1}, ...]},
        ...
      ]
    }

Image paths are relative to the manifest file. Pixel coordinates are
continuous: pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)``.
"""

import json
import math
import os
from dataclasses import dataclass, field

from ..errors import ManifestError


@dataclass(frozen=True)
class ImageEntry:
    id: object
    path: str
    width: int
    height: int


@dataclass(frozen=True)
class Observation:
    image_id: object
    x_px: float
    y_px: float
    depth: float


@dataclass
class Point3D:
    point_id: int
    observations: list


@dataclass
class SceneManifest:
    scene: str
    images: list
    points3d: list
    root: str = "."
    _by_image: dict = field(default=None, repr=False, compare=False)

    def image(self, image_id):
        for im in self.images:
            if im.id == image_id:
                return im
        raise ManifestError(f"images: no image with id {image_id!r}")

    def image_path(self, image_id):
        return os.path.join(self.root, self.image(image_id).path)

    def observations(self, image_id):
        """``{point_id: Observation}`` for one image."""
        if self._by_image is None:
            table = {im.id: {} for im in self.images}
            for p in self.points3d:
                for ob in p.observations:
                    table[ob.image_id][p.point_id] = ob
            self._by_image = table
        return self._by_image.get(image_id, {})

    def to_json(self):
        return {
            "scene": self.scene,
            "images": [{"id": i.id, "path": i.path, "width": i.width, "height": i.height} for i in self.images],
            "points3d": [
                {"point_id": p.point_id,
                 "observations": [{"image_id": o.image_id, "x_px": o.x_px, "y_px": o.y_px, "depth": o.depth}
                                  for o in p.observations]}
                for p in self.points3d
            ],
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)


def _field(obj, key, where, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise ManifestError(f"{where}.{key}: missing")
    value = obj[key]
    if kind == "number":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ManifestError(f"{where}.{key}: expected a finite number, got {value!r}")
    elif kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ManifestError(f"{where}.{key}: expected an integer, got {value!r}")
    elif kind == "str" and not isinstance(value, str):
        raise ManifestError(f"{where}.{key}: expected a string, got {value!r}")
    elif kind == "list" and not isinstance(value, list):
        raise ManifestError(f"{where}.{key}: expected a list")
    return value


def parse_manifest(doc, root="."):
    """Validate a decoded manifest document and build a :class:`SceneManifest`."""
    if not isinstance(doc, dict):
        raise ManifestError("manifest: top level must be an object")
    scene = str(doc.get("scene", os.path.basename(os.path.abspath(root))))
    images = []
    for i, raw in enumerate(_field(doc, "images", "manifest", "list")):
        where = f"images[{i}]"
        image_id = _field(raw, "id", where)
        if not isinstance(image_id, (str, int)) or isinstance(image_id, bool):
            raise ManifestError(f"{where}.id: expected a string or integer")
        w = _field(raw, "width", where, "int")
        h = _field(raw, "height", where, "int")
        if w <= 0 or h <= 0:
            raise ManifestError(f"{where}: width and height must be positive")
        images.append(ImageEntry(image_id, _field(raw, "path", where, "str"), w, h))
    ids = [im.id for im in images]
    if len(set(ids)) != len(ids):
        raise ManifestError("images: duplicate image ids")
    sizes = {im.id: (im.width, im.height) for im in images}

    points, seen = [], set()
    for i, raw in enumerate(_field(doc, "points3d", "manifest", "list")):
        where = f"points3d[{i}]"
        pid = _field(raw, "point_id", where, "int")
        if pid in seen:
            raise ManifestError(f"{where}.point_id: duplicate id {pid}")
        seen.add(pid)
        obs = []
        for j, ro in enumerate(_field(raw, "observations", where, "list")):
            ow = f"{where}.observations[{j}]"
            image_id = _field(ro, "image_id", ow)
            if image_id not in sizes:
                raise ManifestError(f"{ow}.image_id: unknown image {image_id!r}")
            x = float(_field(ro, "x_px", ow, "number"))
            y = float(_field(ro, "y_px", ow, "number"))
            depth = float(_field(ro, "depth", ow, "number"))
            w, h = sizes[image_id]
            if not (0 <= x <= w and 0 <= y <= h):
                raise ManifestError(f"{ow}: ({x}, {y}) outside image {image_id!r} of size {w}x{h}")
            if depth <= 0:
                raise ManifestError(f"{ow}.depth: must be > 0, got {depth}")
            obs.append(Observation(image_id, x, y, depth))
        points.append(Point3D(pid, obs))
    return SceneManifest(scene, images, points, root)


def load_manifest(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    return parse_manifest(doc, root=os.path.dirname(os.path.abspath(path)))
