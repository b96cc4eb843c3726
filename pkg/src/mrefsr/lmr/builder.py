"""Multi-reference group construction from scene manifests.

For every (target, reference) pair in a scene we compute a dedup PSNR,
the fraction of the target's 3D points the reference also sees, and a
depth-based size ratio, then label the pair H / M / L (or reject it as a
near duplicate). Each target with at least one H, two M and two L usable
references yields 300x300 patch groups: a random target crop, an anchor
3D point near its center, and reference crops centered on that point's
(or the nearest shared point's) observation.
"""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ContractViolation
from ..metrics import load_png, psnr, resize, save_png

log = logging.getLogger(__name__)

PATCH = 300
DEDUP_PSNR_DB = 30.0
H_OVERLAP, H_SIZE = 0.30, 0.9
M_OVERLAP, M_SIZE = 0.10, 0.66
GROUP_LAYOUT = (("H", "ref_h1"), ("M", "ref_m1"), ("M", "ref_m2"), ("L", "ref_l1"), ("L", "ref_l2"))
REQUIRED = {"H": 1, "M": 2, "L": 2}


class GroupUnsatisfiable(ContractViolation):
    """The candidate pool cannot supply one H, two M and two L references."""


@dataclass
class PairStats:
    target_id: object
    ref_id: object
    psnr_db: float
    r_olp: float
    r_s: float
    label: str = ""
    shared: int = 0  # number of co-observed points

    def to_json(self):
        d = asdict(self)
        d["psnr_db"] = None if math.isinf(self.psnr_db) else self.psnr_db
        return d


@dataclass
class PatchGroup:
    target_patch: np.ndarray
    refs: list
    labels: list
    provenance: dict = field(default_factory=dict)


def classify(psnr_db, r_olp, r_s):
    """Label from the thresholds; all comparisons strict."""
    if psnr_db >= DEDUP_PSNR_DB:
        return "rejected"
    if r_olp > H_OVERLAP and r_s > H_SIZE:
        return "H"
    if r_olp > M_OVERLAP and r_s > M_SIZE:
        return "M"
    return "L"


def classify_similarity(stats):
    return classify(stats.psnr_db, stats.r_olp, stats.r_s)


def overlap_and_size(manifest, target_id, ref_id):
    """``(r_olp, r_s, shared)``: co-observed fraction of the target's points and median depth ratio."""
    t_obs = manifest.observations(target_id)
    if not t_obs:
        raise ContractViolation(f"target {target_id!r} has no observations")
    r_obs = manifest.observations(ref_id)
    shared = sorted(set(t_obs) & set(r_obs))
    r_olp = len(shared) / len(t_obs)
    # no shared points: nothing to measure, treated as zero size ratio
    r_s = float(np.median([t_obs[p].depth / r_obs[p].depth for p in shared])) if shared else 0.0
    return r_olp, r_s, len(shared)


def dedup_psnr(a, b):
    """RGB PSNR after shrinking the larger image to cover the smaller and center-cropping both."""
    (ha, wa), (hb, wb) = a.shape[:2], b.shape[:2]
    if ha * wa < hb * wb:
        a, b = b, a
        (ha, wa), (hb, wb) = (hb, wb), (ha, wa)
    f = max(hb / ha, wb / wa)
    if f < 1.0:
        a = resize(a, max(hb, round(ha * f)), max(wb, round(wa * f)))
        ha, wa = a.shape[:2]
    h, w = min(ha, hb), min(wa, wb)

    def center(img):
        y0 = (img.shape[0] - h) // 2
        x0 = (img.shape[1] - w) // 2
        return img[y0:y0 + h, x0:x0 + w]

    return psnr(center(a), center(b))


class ImageCache:
    """Loads scene images on demand; failures are remembered so they are reported once."""

    def __init__(self, manifest):
        self.manifest = manifest
        self.images = {}
        self.failed = {}

    def get(self, image_id):
        if image_id in self.failed:
            raise OSError(self.failed[image_id])
        if image_id not in self.images:
            path = self.manifest.image_path(image_id)
            try:
                self.images[image_id] = load_png(path)
            except (OSError, ValueError) as exc:
                self.failed[image_id] = f"cannot read {path}: {exc}"
                raise OSError(self.failed[image_id]) from exc
        return self.images[image_id]


def compute_pair_stats(target_id, ref_id, manifest, images=None):
    r_olp, r_s, shared = overlap_and_size(manifest, target_id, ref_id)
    images = images or ImageCache(manifest)
    value = dedup_psnr(images.get(target_id), images.get(ref_id))
    stats = PairStats(target_id, ref_id, value, r_olp, r_s, shared=shared)
    stats.label = classify_similarity(stats)
    return stats


def _nearest(obs, x, y):
    """Point id of the observation nearest ``(x, y)``; ties go to the lowest id."""
    return min(obs, key=lambda pid: ((obs[pid].x_px - x) ** 2 + (obs[pid].y_px - y) ** 2, pid))


def crop_origin(center, size, extent):
    """Top-left coordinate of a ``size`` window centered at ``center``, clamped to ``[0, extent - size]``."""
    return int(min(max(math.floor(center - size / 2 + 0.5), 0), extent - size))


def select_references(pool, anchor_id, manifest, rng):
    """Pick 1 H, 2 M, 2 L; references that see the anchor point come first, ties in seeded random order."""
    chosen = []
    for label, need in REQUIRED.items():
        cands = [s for s in pool if s.label == label]
        if len(cands) < need:
            raise GroupUnsatisfiable(f"need {need} {label} references, have {len(cands)}")
        tiebreak = rng.permutation(len(cands))
        order = sorted(range(len(cands)),
                       key=lambda i: (anchor_id not in manifest.observations(cands[i].ref_id), tiebreak[i]))
        chosen.extend(cands[i] for i in order[:need])
    return chosen


def crop_patch_group(target_id, candidates, manifest, rng, images=None, patch=PATCH):
    """One patch group for ``target_id`` or ``None`` when an image is smaller than the patch.

    ``candidates`` are labeled :class:`PairStats` of this target; only
    non-rejected references sharing at least one point are usable.
    Raises :class:`GroupUnsatisfiable` when the pool is too small.
    """
    images = images or ImageCache(manifest)
    pool = [s for s in candidates if s.label in REQUIRED and s.shared > 0]
    for label, need in REQUIRED.items():
        have = sum(s.label == label for s in pool)
        if have < need:
            raise GroupUnsatisfiable(f"target {target_id!r}: need {need} {label} references, have {have}")
    t_obs = manifest.observations(target_id)
    if not t_obs:
        raise GroupUnsatisfiable(f"target {target_id!r} has no observations")
    t_entry = manifest.image(target_id)
    if t_entry.width < patch or t_entry.height < patch:
        return None
    x0 = int(rng.integers(0, t_entry.width - patch + 1))
    y0 = int(rng.integers(0, t_entry.height - patch + 1))
    cx, cy = x0 + patch / 2, y0 + patch / 2
    anchor = _nearest(t_obs, cx, cy)

    chosen = select_references(pool, anchor, manifest, rng)
    refs, labels, prov_refs = [], [], []
    for stats in chosen:
        entry = manifest.image(stats.ref_id)
        if entry.width < patch or entry.height < patch:
            return None
        r_obs = manifest.observations(stats.ref_id)
        if anchor in r_obs:
            pid = anchor
        else:
            shared = {p: t_obs[p] for p in r_obs if p in t_obs}
            pid = _nearest(shared, cx, cy)
        ob = r_obs[pid]
        rx0 = crop_origin(ob.x_px, patch, entry.width)
        ry0 = crop_origin(ob.y_px, patch, entry.height)
        img = images.get(stats.ref_id)
        refs.append(img[ry0:ry0 + patch, rx0:rx0 + patch].copy())
        labels.append(stats.label)
        prov_refs.append({"image_id": stats.ref_id, "label": stats.label, "origin": [rx0, ry0],
                          "point_id": pid, "size": [entry.width, entry.height], "stats": stats.to_json()})
    target = images.get(target_id)[y0:y0 + patch, x0:x0 + patch].copy()
    provenance = {
        "scene": manifest.scene,
        "target": {"image_id": target_id, "origin": [x0, y0], "size": [t_entry.width, t_entry.height]},
        "anchor_point_id": anchor,
        "refs": prov_refs,
    }
    return PatchGroup(target, refs, labels, provenance)


@dataclass
class BuildConfig:
    seed: int = 0
    cap: int = 0  # 0 = no limit on emitted groups
    groups_per_target: int = 1
    patch: int = PATCH
    workers: int = 1


def _scene_groups(scene_index, manifest, cfg):
    """Pair statistics and candidate groups of one scene (no disk writes)."""
    report = {"scene": manifest.scene, "pairs_total": 0, "rejected_dup": 0, "h": 0, "m": 0, "l": 0,
              "groups_emitted": 0, "groups_unsatisfiable": 0, "images_unreadable": 0}
    images = ImageCache(manifest)
    readable = []
    for im in manifest.images:
        try:
            images.get(im.id)
            readable.append(im.id)
        except OSError as exc:
            log.warning("scene %s: %s (skipped)", manifest.scene, exc)
            report["images_unreadable"] += 1
    groups = []
    for t_index, target_id in enumerate(readable):
        if not manifest.observations(target_id):
            continue
        pairs = []
        for ref_id in readable:
            if ref_id == target_id:
                continue
            stats = compute_pair_stats(target_id, ref_id, manifest, images)
            report["pairs_total"] += 1
            key = {"rejected": "rejected_dup", "H": "h", "M": "m", "L": "l"}[stats.label]
            report[key] += 1
            pairs.append(stats)
        for g in range(cfg.groups_per_target):
            rng = np.random.default_rng([cfg.seed, scene_index, t_index, g])
            try:
                group = crop_patch_group(target_id, pairs, manifest, rng, images, cfg.patch)
            except GroupUnsatisfiable as exc:
                log.debug("scene %s: %s", manifest.scene, exc)
                report["groups_unsatisfiable"] += 1
                continue
            if group is None:
                report["groups_unsatisfiable"] += 1
                continue
            groups.append(group)
    return report, groups


def write_group(directory, group):
    os.makedirs(directory, exist_ok=True)
    save_png(os.path.join(directory, "target.png"), group.target_patch)
    for (label, stem), img, got in zip(GROUP_LAYOUT, group.refs, group.labels):
        if label != got:
            raise ContractViolation(f"group composition {group.labels} is not H,M,M,L,L")
        save_png(os.path.join(directory, f"{stem}.png"), img)
    meta = {"labels": list(group.labels), "provenance": group.provenance}
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def build_dataset(manifests, out_dir, config=None):
    """Emit patch groups for all scenes; returns the per-scene report records.

    Scenes are processed independently (optionally on ``config.workers``
    threads) and written by this thread in scene order, so the output is
    identical for identical inputs and seed. Writes ``groups/<n>/``,
    ``index.jsonl`` (provenance, one line per group) and ``report.jsonl``.
    """
    cfg = config or BuildConfig()
    os.makedirs(out_dir, exist_ok=True)
    jobs = list(enumerate(manifests))
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(lambda job: _scene_groups(job[0], job[1], cfg), jobs))
    else:
        results = [_scene_groups(i, m, cfg) for i, m in jobs]

    reports, index_lines, n = [], [], 0
    for report, groups in results:
        for group in groups:
            if cfg.cap and n >= cfg.cap:
                break
            name = f"{n:06d}"
            write_group(os.path.join(out_dir, "groups", name), group)
            index_lines.append(json.dumps({"group": name, **group.provenance}, sort_keys=True))
            report["groups_emitted"] += 1
            n += 1
        if report["groups_emitted"] == 0:
            log.info("scene %s produced no groups", report["scene"])
        reports.append(report)
    with open(os.path.join(out_dir, "index.jsonl"), "w") as fh:
        fh.writelines(line + "\n" for line in index_lines)
    with open(os.path.join(out_dir, "report.jsonl"), "w") as fh:
        fh.writelines(json.dumps(r, sort_keys=True) + "\n" for r in reports)
    return reports


def read_index(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def index_image_ids(entries):
    """Scene-qualified ids (``scene/image_id``) of every target and reference in an index."""
    ids = set()
    for e in entries:
        ids.add(f"{e['scene']}/{e['target']['image_id']}")
        ids.update(f"{e['scene']}/{r['image_id']}" for r in e["refs"])
    return ids


def check_split_disjointness(train_ids, test_ids):
    """Image ids present in both splits, sorted; empty means the split is valid."""
    return sorted(set(train_ids) & set(test_ids), key=str)


def list_groups(dataset_dir):
    root = os.path.join(dataset_dir, "groups")
    if not os.path.isdir(root):
        return []
    return [os.path.join(root, d) for d in sorted(os.listdir(root)) if os.path.isdir(os.path.join(root, d))]


def load_group(directory):
    """Read one group directory: ``(target, refs in H,M,M,L,L order, labels)``."""
    target = load_png(os.path.join(directory, "target.png"))
    refs = [load_png(os.path.join(directory, f"{stem}.png")) for _, stem in GROUP_LAYOUT]
    with open(os.path.join(directory, "meta.json")) as fh:
        labels = json.load(fh)["labels"]
    return target, refs, labels
