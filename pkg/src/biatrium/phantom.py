"""Synthetic two-chamber phantoms with exact ground truth.

Two ellipsoidal cavities (left atrium class 3, right atrium class 2) sit in
a dark background; each is wrapped in a wall shell (class 1) obtained by
expanding the cavity radii by the wall thickness.  Geometry is specified in
millimetres; a voxel belongs to a region when its center (index * spacing)
does.  The image is the per-class intensity level plus optional seeded
uniform noise, so with zero amplitude the voxel values are the level
constants exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import DEFAULT_CLASS_MAP, LabelMap, Volume

__all__ = ["Ellipsoid", "PhantomSpec", "generate", "spec_from_json", "spec_to_json"]


@dataclass(frozen=True)
class Ellipsoid:
    center_mm: tuple[float, float, float]
    radii_mm: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "center_mm", tuple(float(c) for c in self.center_mm))
        object.__setattr__(self, "radii_mm", tuple(float(r) for r in self.radii_mm))
        if len(self.center_mm) != 3 or len(self.radii_mm) != 3:
            raise ValueError("center_mm and radii_mm must be length-3")
        if any(r <= 0 for r in self.radii_mm):
            raise ValueError(f"radii must be > 0, got {self.radii_mm}")


def _default_la() -> Ellipsoid:
    return Ellipsoid(center_mm=(42.0, 60.0, 60.0), radii_mm=(18.0, 20.0, 16.0))


def _default_ra() -> Ellipsoid:
    return Ellipsoid(center_mm=(78.0, 60.0, 60.0), radii_mm=(16.0, 18.0, 15.0))


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (192, 192, 48)
    spacing: tuple[float, float, float] = (0.625, 0.625, 2.5)
    la: Ellipsoid = field(default_factory=_default_la)
    ra: Ellipsoid = field(default_factory=_default_ra)
    wall_thickness_mm: float = 4.0
    level_background: float = 0.1
    level_wall: float = 0.5
    level_cavity: float = 0.9
    noise_amplitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.shape) != 3 or any(s < 1 for s in self.shape):
            raise ValueError(f"shape must be 3 positive ints, got {self.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        if self.wall_thickness_mm <= 0:
            raise ValueError(f"wall thickness must be > 0, got {self.wall_thickness_mm}")
        if self.noise_amplitude < 0:
            raise ValueError(f"noise amplitude must be >= 0, got {self.noise_amplitude}")
        extent = tuple((n - 1) * s for n, s in zip(self.shape, self.spacing))
        for name, e in (("la", self.la), ("ra", self.ra)):
            for ax in range(3):
                reach = e.radii_mm[ax] + self.wall_thickness_mm
                if e.center_mm[ax] - reach < 0 or e.center_mm[ax] + reach > extent[ax]:
                    raise ValueError(
                        f"{name} ellipsoid plus wall does not fit in the volume "
                        f"on axis {ax} (center {e.center_mm[ax]}, reach {reach}, "
                        f"extent {extent[ax]})")


def _inside(shape, spacing, e: Ellipsoid, grow_mm: float = 0.0) -> np.ndarray:
    axes = []
    for n, sp, c, r in zip(shape, spacing, e.center_mm, e.radii_mm):
        coords = np.arange(n, dtype=np.float64) * sp
        axes.append((coords - c) / (r + grow_mm))
    d2 = (axes[0][:, None, None] ** 2 + axes[1][None, :, None] ** 2
          + axes[2][None, None, :] ** 2)
    return d2 <= 1.0


def generate(spec: PhantomSpec | None = None) -> tuple[Volume, LabelMap]:
    """Build (image, ground truth).  Cavities override the wall shell where
    the expanded ellipsoids reach into them; overlapping cavities are an
    error because the ground truth would be ambiguous."""
    spec = spec or PhantomSpec()
    la_cav = _inside(spec.shape, spec.spacing, spec.la)
    ra_cav = _inside(spec.shape, spec.spacing, spec.ra)
    if (la_cav & ra_cav).any():
        raise ValueError("la and ra cavities overlap")
    t = spec.wall_thickness_mm
    wall = (_inside(spec.shape, spec.spacing, spec.la, grow_mm=t)
            | _inside(spec.shape, spec.spacing, spec.ra, grow_mm=t))
    wall &= ~(la_cav | ra_cav)

    labels = np.zeros(spec.shape, dtype=np.uint8)
    labels[wall] = DEFAULT_CLASS_MAP["wall"]
    labels[ra_cav] = DEFAULT_CLASS_MAP["right_atrium"]
    labels[la_cav] = DEFAULT_CLASS_MAP["left_atrium"]

    levels = np.array([spec.level_background, spec.level_wall,
                       spec.level_cavity, spec.level_cavity], dtype=np.float32)
    image = levels[labels]
    if spec.noise_amplitude > 0:
        rng = np.random.default_rng(spec.seed)
        noise = rng.uniform(-spec.noise_amplitude, spec.noise_amplitude, size=spec.shape)
        image = (image.astype(np.float64) + noise).astype(np.float32)

    vol = Volume(data=image, spacing=spec.spacing)
    gt = LabelMap(data=labels, spacing=spec.spacing, classes=dict(DEFAULT_CLASS_MAP))
    return vol, gt


_SPEC_KEYS = {
    "shape", "spacing", "la", "ra", "wall_thickness_mm",
    "level_background", "level_wall", "level_cavity", "noise_amplitude", "seed",
}


def spec_from_json(obj: dict | str) -> PhantomSpec:
    """Build a PhantomSpec from a JSON dict (or JSON text).  Unknown keys
    are rejected; omitted keys take the defaults."""
    if isinstance(obj, str):
        obj = json.loads(obj)
    unknown = sorted(set(obj) - _SPEC_KEYS)
    if unknown:
        raise ValueError(f"unknown phantom spec keys: {unknown}")
    kwargs = dict(obj)
    for key in ("la", "ra"):
        if key in kwargs:
            e = kwargs[key]
            extra = sorted(set(e) - {"center_mm", "radii_mm"})
            if extra:
                raise ValueError(f"unknown keys in {key!r}: {extra}")
            kwargs[key] = Ellipsoid(center_mm=tuple(e["center_mm"]),
                                    radii_mm=tuple(e["radii_mm"]))
    for key in ("shape", "spacing"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return PhantomSpec(**kwargs)


def spec_to_json(spec: PhantomSpec) -> dict:
    return {
        "shape": list(spec.shape),
        "spacing": list(spec.spacing),
        "la": {"center_mm": list(spec.la.center_mm), "radii_mm": list(spec.la.radii_mm)},
        "ra": {"center_mm": list(spec.ra.center_mm), "radii_mm": list(spec.ra.radii_mm)},
        "wall_thickness_mm": spec.wall_thickness_mm,
        "level_background": spec.level_background,
        "level_wall": spec.level_wall,
        "level_cavity": spec.level_cavity,
        "noise_amplitude": spec.noise_amplitude,
        "seed": spec.seed,
    }
