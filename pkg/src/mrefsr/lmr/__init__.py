"""Multi-reference group construction from SfM-style scene manifests."""

from .builder import (BuildConfig, GroupUnsatisfiable, PairStats, build_dataset, check_split_disjointness,
                      classify_similarity, compute_pair_stats, crop_patch_group)
from .manifest import SceneManifest, load_manifest, parse_manifest
