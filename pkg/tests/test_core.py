import numpy as np
import pytest

from biatrium import BBox, LabelMap, Placement, Volume, same_grid


def test_volume_accepts_and_freezes_data():
    v = Volume(data=np.zeros((2, 3, 4), dtype=np.float32), spacing=(1, 1, 2.5))
    assert v.shape == (2, 3, 4)
    assert v.spacing == (1.0, 1.0, 2.5)
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


def test_volume_converts_dtype():
    v = Volume(data=np.ones((2, 2, 2), dtype=np.int16), spacing=(1, 1, 1))
    assert v.data.dtype == np.float32


@pytest.mark.parametrize("bad", [
    np.zeros((2, 2)),                     # not 3D
    np.full((2, 2, 2), np.nan),           # non-finite
    np.zeros((0, 2, 2)),                  # empty
])
def test_volume_rejects_bad_data(bad):
    with pytest.raises(ValueError):
        Volume(data=bad, spacing=(1, 1, 1))


@pytest.mark.parametrize("spacing", [(0, 1, 1), (1, -1, 1), (1, 1), (1, 1, np.inf)])
def test_volume_rejects_bad_spacing(spacing):
    with pytest.raises(ValueError):
        Volume(data=np.zeros((2, 2, 2), dtype=np.float32), spacing=spacing)


def test_labelmap_validates_class_codes():
    arr = np.zeros((2, 2, 2), dtype=np.uint8)
    arr[0, 0, 0] = 3
    m = LabelMap(data=arr, spacing=(1, 1, 1))
    assert m.data.dtype == np.uint8
    with pytest.raises(ValueError):
        LabelMap(data=arr, spacing=(1, 1, 1), classes={"background": 0, "fg": 1})


def test_labelmap_coerces_wider_integers():
    arr = np.zeros((2, 2, 2), dtype=np.int32)
    arr[1, 1, 1] = 2
    m = LabelMap(data=arr, spacing=(1, 1, 1))
    assert m.data.dtype == np.uint8
    assert m.data[1, 1, 1] == 2

    with pytest.raises(ValueError):
        LabelMap(data=np.full((2, 2, 2), 300), spacing=(1, 1, 1))
    with pytest.raises(ValueError):
        LabelMap(data=np.full((2, 2, 2), 0.5), spacing=(1, 1, 1))


def test_bbox_bounds_and_helpers():
    b = BBox(lo=(1, 2, 3), hi=(4, 6, 8))
    assert b.shape == (3, 4, 5)
    assert b.center() == (2.5, 4.0, 5.5)
    with pytest.raises(ValueError):
        BBox(lo=(1, 2, 3), hi=(1, 6, 8))
    with pytest.raises(ValueError):
        BBox(lo=(-1, 0, 0), hi=(2, 2, 2))


def test_placement_validation():
    p = Placement(parent_shape=(10, 10, 10), offset=(-2, 0, 3), window_shape=(4, 4, 4))
    assert p.offset == (-2, 0, 3)
    with pytest.raises(ValueError):
        Placement(parent_shape=(10, 10, 10), offset=(0, 0, 0), window_shape=(0, 4, 4))


def test_same_grid():
    a = Volume(data=np.zeros((2, 2, 2), dtype=np.float32), spacing=(1, 1, 1))
    b = Volume(data=np.ones((2, 2, 2), dtype=np.float32), spacing=(1, 1, 1))
    c = Volume(data=np.ones((2, 2, 2), dtype=np.float32), spacing=(1, 1, 2))
    assert same_grid(a, b)
    assert not same_grid(a, c)
