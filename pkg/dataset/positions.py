"""
Ground-truth score positions and the target masks derived from them.

Positions are interpolated in unrolled coordinates: the staves of a page laid
end to end, so that moving from the end of one staff to the start of the next
is continuous in time even though it jumps on the page.
"""

import logging
from dataclasses import dataclass

import numpy as np
from django.conf import settings

from tensorcore.exceptions import ContractViolation

from .types import Position

logger = logging.getLogger(__name__)


def unrolled_offsets(staves):
    """Unrolled coordinate of the start of every staff."""
    lengths = [s.length for s in staves]
    return np.concatenate([[0.0], np.cumsum(lengths)[:-1]])


def unroll(x, staff, staves, offsets=None):
    offsets = unrolled_offsets(staves) if offsets is None else offsets
    return offsets[staff] + (x - staves[staff].x_start)


def interpolate_position(track, t, staves):
    """
    Score position at time ``t``. Clamped to the first and last event outside
    the aligned range; between two events on different staves the staff
    changes at the midpoint of their onset times.
    """
    if len(track) == 0:
        raise ContractViolation("cannot interpolate an empty alignment track")
    events = track.events
    onsets = track.onsets
    if t <= onsets[0]:
        first = events[0]
        return Position(first.x, staves[first.staff].y_center, first.staff)
    if t >= onsets[-1]:
        last = events[-1]
        return Position(last.x, staves[last.staff].y_center, last.staff)

    i = int(np.searchsorted(onsets, t, side="right")) - 1
    left, right = events[i], events[i + 1]
    span = right.onset - left.onset
    frac = (t - left.onset) / span if span > 0 else 1.0
    if left.staff == right.staff:
        x = left.x + frac * (right.x - left.x)
        return Position(x, staves[left.staff].y_center, left.staff)

    offsets = unrolled_offsets(staves)
    u_left = unroll(left.x, left.staff, staves, offsets)
    u_right = unroll(right.x, right.staff, staves, offsets)
    u = u_left + frac * (u_right - u_left)
    if frac < 0.5:
        staff = staves[left.staff]
        x = min(u - offsets[left.staff] + staff.x_start, staff.x_end)
        return Position(x, staff.y_center, left.staff)
    staff = staves[right.staff]
    x = max(u - offsets[right.staff] + staff.x_start, staff.x_start)
    return Position(x, staff.y_center, right.staff)


@dataclass
class TargetMask:
    mask: np.ndarray  # bool [H, W]
    clipped: bool

    @property
    def area(self):
        return int(self.mask.sum())


def mask_bounds(page, position, width=None):
    """Unclipped (row0, row1, col0, col1), inclusive, of the target rectangle."""
    width = width or settings.PAGETRACK["MASK_WIDTH"]
    staff = page.staves[position.staff]
    center = int(np.floor(position.x + 0.5))
    col0 = center - width // 2
    col1 = col0 + width - 1
    row0 = int(np.floor(staff.y_top - staff.space + 0.5))
    row1 = int(np.floor(staff.y_bottom + staff.space + 0.5)) - 1
    return row0, row1, col0, col1


def target_center_offset(width=None):
    """How far the center of an unclipped target lies left of its x (0.5 px for even widths)."""
    width = width or settings.PAGETRACK["MASK_WIDTH"]
    return width // 2 - (width - 1) / 2


def render_target_mask(page, position, width=None):
    """
    Binary rectangle ``width`` pixels wide around x (columns x-5..x+4 for the
    default width), spanning the staff plus one staff space above and below.
    """
    row0, row1, col0, col1 = mask_bounds(page, position, width)
    mask = np.zeros((page.height, page.width), dtype=bool)
    r0, r1 = max(row0, 0), min(row1, page.height - 1)
    c0, c1 = max(col0, 0), min(col1, page.width - 1)
    clipped = (r0, r1, c0, c1) != (row0, row1, col0, col1)
    if r0 <= r1 and c0 <= c1:
        mask[r0:r1 + 1, c0:c1 + 1] = True
    return TargetMask(mask, clipped)


def targets_at(page, track, frames, fps=None, width=None):
    """
    Target masks for the given frame indices as a bool [len(frames), H, W]
    array, plus the number of masks clipped at the page border.
    """
    fps = fps or settings.PAGETRACK["FPS"]
    masks = np.zeros((len(frames), page.height, page.width), dtype=bool)
    clipped = 0
    for i, f in enumerate(frames):
        target = render_target_mask(page, interpolate_position(track, f / fps, page.staves), width)
        masks[i] = target.mask
        clipped += target.clipped
    return masks, clipped


def frame_targets(page, track, n_frames, fps=None, width=None):
    """Target masks for frames 0..n_frames-1. Logs how many had to be clipped."""
    masks, clipped = targets_at(page, track, range(n_frames), fps, width)
    if clipped:
        logger.warning(f"{clipped} of {n_frames} target masks clipped at the page border")
    return masks
