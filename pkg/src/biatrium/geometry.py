"""Grid resampling and region-of-interest plumbing.

Everything here is voxel-exact: padding, cropping and block averaging only,
no interpolation.  Each spatial rearrangement returns a Placement so a
result computed on the derived grid can be carried back to the parent grid
with stitch().
"""
from __future__ import annotations

import numpy as np

from .core import BBox, EmptyMaskError, LabelMap, Placement, Volume

__all__ = [
    "DEFAULT_STANDARD_SHAPE",
    "DEFAULT_DOWNSAMPLE_FACTORS",
    "DEFAULT_FINE_WINDOW",
    "standardize",
    "downsample_mean",
    "bbox_from_mask",
    "expand_bbox",
    "crop_window",
    "stitch",
]

DEFAULT_STANDARD_SHAPE = (576, 576, 48)
DEFAULT_DOWNSAMPLE_FACTORS = (4, 4, 1)
DEFAULT_FINE_WINDOW = (256, 256, 48)


def _center_delta(src: int, dst: int) -> tuple[int, int]:
    """Split ``|dst - src|`` into (low, high) with the odd voxel on the high
    side."""
    d = abs(dst - src)
    return d // 2, d - d // 2


def standardize(v: Volume, target_shape: tuple[int, int, int] = DEFAULT_STANDARD_SHAPE,
                pad_value: float = 0.0) -> tuple[Volume, Placement]:
    """Center pad or crop each axis independently to ``target_shape``.

    The placement offset per axis is the crop start in the source (>= 0) or
    minus the pad amount on the low side (< 0), so
    ``source_index = target_index + offset`` wherever both grids overlap.
    """
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != 3 or any(t < 1 for t in target_shape):
        raise ValueError(f"target_shape must be 3 positive ints, got {target_shape}")
    data = v.data
    offset = []
    src_slices = []
    dst_slices = []
    for s, t in zip(data.shape, target_shape):
        lo, _ = _center_delta(s, t)
        if s >= t:
            offset.append(lo)
            src_slices.append(slice(lo, lo + t))
            dst_slices.append(slice(0, t))
        else:
            offset.append(-lo)
            src_slices.append(slice(0, s))
            dst_slices.append(slice(lo, lo + s))
    out = np.full(target_shape, pad_value, dtype=data.dtype)
    out[tuple(dst_slices)] = data[tuple(src_slices)]
    place = Placement(parent_shape=data.shape, offset=tuple(offset), window_shape=target_shape)
    return Volume(data=out, spacing=v.spacing), place


def downsample_mean(v: Volume, factors: tuple[int, int, int] = DEFAULT_DOWNSAMPLE_FACTORS) -> Volume:
    """Non-overlapping block mean.  Each axis must divide evenly by its
    factor; spacing scales up by the factors."""
    factors = tuple(int(f) for f in factors)
    if len(factors) != 3 or any(f < 1 for f in factors):
        raise ValueError(f"factors must be 3 positive ints, got {factors}")
    data = v.data
    for ax, (s, f) in enumerate(zip(data.shape, factors)):
        if s % f != 0:
            raise ValueError(f"axis {ax} extent {s} is not divisible by factor {f}")
    fx, fy, fz = factors
    sx, sy, sz = (s // f for s, f in zip(data.shape, factors))
    blocks = data.astype(np.float64).reshape(sx, fx, sy, fy, sz, fz)
    out = blocks.mean(axis=(1, 3, 5))
    spacing = tuple(sp * f for sp, f in zip(v.spacing, factors))
    return Volume(data=out.astype(np.float32), spacing=spacing)


def bbox_from_mask(mask: np.ndarray | LabelMap,
                   positive_classes: set[int] | None = None) -> BBox:
    """Tight inclusive-exclusive bounds around the foreground voxels.

    ``positive_classes=None`` treats every nonzero voxel as foreground;
    otherwise only voxels whose class code is in the set count.
    """
    arr = mask.data if isinstance(mask, LabelMap) else np.asarray(mask)
    if positive_classes is None:
        fg = arr != 0
    else:
        fg = np.isin(arr, sorted(positive_classes))
    nz = np.nonzero(fg)
    if nz[0].size == 0:
        raise EmptyMaskError("mask has no foreground voxels")
    lo = tuple(int(idx.min()) for idx in nz)
    hi = tuple(int(idx.max()) + 1 for idx in nz)
    return BBox(lo=lo, hi=hi)


def expand_bbox(box: BBox, margin: int | tuple[int, int, int],
                bounds: tuple[int, int, int]) -> BBox:
    """Grow the box by ``margin`` voxels per side, clipped to ``bounds``."""
    if isinstance(margin, int):
        margin = (margin, margin, margin)
    lo = tuple(max(0, l - m) for l, m in zip(box.lo, margin))
    hi = tuple(min(b, h + m) for h, m, b in zip(box.hi, margin, bounds))
    return BBox(lo=lo, hi=hi)


def crop_window(v: Volume, center: tuple[int, int, int],
                window: tuple[int, int, int] = DEFAULT_FINE_WINDOW,
                pad_value: float = 0.0) -> tuple[Volume, Placement]:
    """Extract a fixed-size window around ``center``.

    The window start is ``center - window // 2`` clamped so the window stays
    inside the parent wherever it fits.  An axis where the window exceeds the
    parent is taken whole and centered in the output with ``pad_value``
    fill; its offset goes negative, recording the pad, exactly as in
    standardize().
    """
    window = tuple(int(w) for w in window)
    if len(window) != 3 or any(w < 1 for w in window):
        raise ValueError(f"window must be 3 positive ints, got {window}")
    data = v.data
    offset = []
    src_slices = []
    dst_slices = []
    for s, w, c in zip(data.shape, window, center):
        if w <= s:
            start = min(max(int(c) - w // 2, 0), s - w)
            offset.append(start)
            src_slices.append(slice(start, start + w))
            dst_slices.append(slice(0, w))
        else:
            lo, _ = _center_delta(s, w)
            offset.append(-lo)
            src_slices.append(slice(0, s))
            dst_slices.append(slice(lo, lo + s))
    out = np.full(window, pad_value, dtype=data.dtype)
    out[tuple(dst_slices)] = data[tuple(src_slices)]
    place = Placement(parent_shape=data.shape, offset=tuple(offset), window_shape=window)
    return Volume(data=out, spacing=v.spacing), place


def _overlap(place: Placement):
    """Slices of the parent and of the window covering their common region."""
    parent_sl = []
    window_sl = []
    for s, o, w in zip(place.parent_shape, place.offset, place.window_shape):
        p0 = max(o, 0)
        p1 = min(o + w, s)
        if p1 <= p0:
            raise ValueError(f"placement window does not overlap parent (offset {place.offset})")
        parent_sl.append(slice(p0, p1))
        window_sl.append(slice(p0 - o, p1 - o))
    return tuple(parent_sl), tuple(window_sl)


def stitch(child, place: Placement, fill_value: float = 0.0):
    """Paste window contents back onto a fresh parent-shaped array.

    Voxels of the window that fall outside the parent (the padded fringe)
    are dropped; parent voxels not covered by the window get ``fill_value``
    (background for a LabelMap).  The return type mirrors the input: LabelMap
    in, LabelMap out; Volume in, Volume out; bare array otherwise.
    """
    if isinstance(child, LabelMap):
        arr = stitch(child.data, place, fill_value=0)
        return LabelMap(data=arr, spacing=child.spacing, classes=child.classes)
    if isinstance(child, Volume):
        arr = stitch(child.data, place, fill_value=fill_value)
        return Volume(data=arr, spacing=child.spacing)
    child = np.asarray(child)
    if child.shape != place.window_shape:
        raise ValueError(
            f"window shape {child.shape} does not match placement {place.window_shape}")
    parent_sl, window_sl = _overlap(place)
    out = np.full(place.parent_shape, fill_value, dtype=child.dtype)
    out[parent_sl] = child[window_sl]
    return out
