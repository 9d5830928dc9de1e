"""Core voxel-grid types shared across the toolkit.

Volumes and label maps are axis-aligned 3D grids indexed (x, y, z) with a
physical spacing in mm per axis.  Placements record how a child grid (a
padded or cropped window) maps back into its parent grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

__all__ = [
    "BiatriumError",
    "NiftiFormatError",
    "EmptyMaskError",
    "BackendError",
    "ConfigError",
    "DEFAULT_CLASS_MAP",
    "BINARY_CLASS_MAP",
    "Volume",
    "LabelMap",
    "BBox",
    "Placement",
]


class BiatriumError(Exception):
    """Base class for toolkit errors."""


class NiftiFormatError(BiatriumError):
    """File does not conform to the supported NIfTI-1 subset."""


class EmptyMaskError(BiatriumError):
    """A mask contains no voxels of the requested classes."""


class BackendError(BiatriumError):
    """A segmenter backend failed or produced unusable output."""


class ConfigError(BiatriumError):
    """Pipeline configuration is invalid."""


#: Default label codes.  The challenge convention for which integer encodes
#: wall vs left/right atrium is not fixed anywhere authoritative, so the map
#: is configurable wherever labels are consumed; this is the assumed default.
DEFAULT_CLASS_MAP: Mapping[str, int] = {
    "background": 0,
    "wall": 1,
    "right_atrium": 2,
    "left_atrium": 3,
}

#: Class map for the coarse (binary) stage.
BINARY_CLASS_MAP: Mapping[str, int] = {"background": 0, "foreground": 1}


def _as_triple(value, name: str, kind=int) -> tuple:
    t = tuple(kind(v) for v in value)
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(t)}")
    return t


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense 3D scalar field, float32, indexed (x, y, z).

    The container takes ownership of ``data``: the array is marked read-only
    on construction (no copy when the dtype already matches).
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    #: Opaque qform/sform header bytes carried through read/write untouched.
    orientation: bytes | None = field(default=None, repr=False)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got {arr.ndim}D")
        if arr.size == 0:
            raise ValueError("volume data must be non-empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume data contains non-finite values")
        object.__setattr__(self, "data", _freeze(arr))
        object.__setattr__(self, "spacing", _as_triple(self.spacing, "spacing", float))
        for s in self.spacing:
            if not (s > 0 and np.isfinite(s)):
                raise ValueError(f"spacing must be positive and finite, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Dense 3D label field, uint8, same geometry conventions as Volume."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    classes: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_CLASS_MAP))

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"label data must be 3D, got {arr.ndim}D")
        if arr.dtype != np.uint8:
            if not np.issubdtype(arr.dtype, np.integer):
                raise ValueError(f"label data must be integer, got {arr.dtype}")
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ValueError("label values out of uint8 range")
            arr = arr.astype(np.uint8)
        classes = dict(self.classes)
        codes = set(classes.values()) | {0}
        counts = np.bincount(arr.ravel(), minlength=256)
        bad = [c for c in range(256) if counts[c] and c not in codes]
        if bad:
            raise ValueError(f"label values {bad} not in declared class codes {sorted(codes)}")
        object.__setattr__(self, "data", _freeze(arr))
        object.__setattr__(self, "spacing", _as_triple(self.spacing, "spacing", float))
        object.__setattr__(self, "classes", classes)
        for s in self.spacing:
            if not (s > 0 and np.isfinite(s)):
                raise ValueError(f"spacing must be positive and finite, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class BBox:
    """Axis-aligned voxel box with inclusive lo, exclusive hi bounds."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "lo", _as_triple(self.lo, "lo"))
        object.__setattr__(self, "hi", _as_triple(self.hi, "hi"))
        for a in range(3):
            if not (0 <= self.lo[a] < self.hi[a]):
                raise ValueError(f"invalid bbox bounds on axis {a}: [{self.lo[a]}, {self.hi[a]})")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    def center(self) -> tuple[float, float, float]:
        """Continuous center in voxel-edge coordinates of [lo, hi)."""
        return tuple((l + h) / 2.0 for l, h in zip(self.lo, self.hi))


@dataclass(frozen=True)
class Placement:
    """Maps a child grid into its parent: child voxel i sits at parent
    voxel ``offset + i``.  Negative offsets mean the child extends past the
    parent (padding)."""

    parent_shape: tuple[int, int, int]
    offset: tuple[int, int, int]
    window_shape: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "parent_shape", _as_triple(self.parent_shape, "parent_shape"))
        object.__setattr__(self, "offset", _as_triple(self.offset, "offset"))
        object.__setattr__(self, "window_shape", _as_triple(self.window_shape, "window_shape"))
        for a in range(3):
            if self.parent_shape[a] < 1:
                raise ValueError(f"parent_shape must be positive, got {self.parent_shape}")
            if self.window_shape[a] < 1:
                raise ValueError(f"window_shape must be positive, got {self.window_shape}")


def same_grid(a: Volume | LabelMap, b: Volume | LabelMap) -> bool:
    """True when two grids agree in shape and spacing."""
    return a.shape == b.shape and a.spacing == b.spacing
