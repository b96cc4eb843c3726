"""Reading built group directories back as training / evaluation samples."""

import logging

from ..align import match_offsets
from ..errors import ContractViolation
from ..metrics import downscale4
from ..pipeline import LABEL_ORDER, RefGroupSample
from .builder import list_groups, load_group

log = logging.getLogger(__name__)


def group_sample(directory, match=True, block=512):
    """One group as a :class:`RefGroupSample`; the LR input is the bicubic x1/4 target."""
    target, refs, labels = load_group(directory)
    if tuple(labels) != LABEL_ORDER:
        raise ContractViolation(f"{directory}: labels {labels} are not H,M,M,L,L")
    lr = downscale4(target)
    offsets = [match_offsets(lr, r, block=block) for r in refs] if match else None
    return RefGroupSample(lr, refs, hr=target, labels=list(labels), offsets=offsets, name=directory)


def load_samples(dataset_dir, match=True):
    """All readable groups of a dataset; returns ``(samples, skipped)``."""
    samples, skipped = [], 0
    for d in list_groups(dataset_dir):
        try:
            samples.append(group_sample(d, match))
        except (OSError, ValueError, KeyError) as exc:
            log.warning("skipping malformed group %s: %s", d, exc)
            skipped += 1
    return samples, skipped
