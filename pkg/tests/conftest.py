from __future__ import annotations

import numpy as np
import pytest

from biatrium import LabelMap, Volume


@pytest.fixture
def rng():
    return np.random.default_rng(20260825)


def random_volume(rng, shape, spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(data=rng.random(shape, dtype=np.float32), spacing=spacing)


def random_blobby_labels(rng, shape, codes=(1, 2, 3), spacing=(1.0, 1.0, 1.0),
                         n_blobs=(1, 4)) -> LabelMap:
    """Random label map built from solid boxes, so surfaces stay small
    enough for all-pairs distance oracles."""
    arr = np.zeros(shape, dtype=np.uint8)
    total = int(rng.integers(n_blobs[0], n_blobs[1] + 1))
    for _ in range(total):
        code = int(rng.choice(codes))
        lo = [int(rng.integers(0, max(1, s - 1))) for s in shape]
        hi = [int(rng.integers(l + 1, s + 1)) for l, s in zip(lo, shape)]
        arr[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = code
    classes = {"background": 0}
    classes.update({f"class_{c}": c for c in codes})
    return LabelMap(data=arr, spacing=spacing, classes=classes)


def random_noise_labels(rng, shape, codes=(0, 1, 2, 3), spacing=(1.0, 1.0, 1.0)) -> LabelMap:
    arr = rng.choice(np.array(codes, dtype=np.uint8), size=shape)
    classes = {"background": 0}
    classes.update({f"class_{c}": c for c in codes if c != 0})
    return LabelMap(data=arr, spacing=spacing, classes=classes)
