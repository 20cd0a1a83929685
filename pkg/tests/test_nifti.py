"""Round trips and byte determinism of the built-in NIfTI-1 IO."""

import numpy as np
import pytest

from planseg.nifti import read_volume, write_volume
from planseg.volume import Volume


@pytest.mark.parametrize("dtype", [np.float32, np.uint8, np.uint16, np.int16])
def test_round_trip(tmp_path, dtype):
    rng = np.random.default_rng(1)
    data = (rng.random((7, 5, 3)) * 100).astype(dtype)
    v = Volume(data, spacing=(0.7, 0.7, 5.0), origin=(1.0, -2.5, 30.0))
    path = tmp_path / "x.nii.gz"
    write_volume(path, v)
    back = read_volume(path)
    assert back.data.dtype == dtype
    assert np.array_equal(back.data, data)
    assert np.allclose(back.spacing, v.spacing, atol=1e-6)
    assert np.allclose(back.origin, v.origin, atol=1e-5)


def test_uncompressed_nii(tmp_path):
    v = Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2), (1, 1, 1))
    path = tmp_path / "plain.nii"
    write_volume(path, v)
    assert np.array_equal(read_volume(path).data, v.data)


def test_write_is_byte_deterministic(tmp_path):
    v = Volume(np.ones((4, 4, 4), dtype=np.float32), (1, 1, 1))
    write_volume(tmp_path / "a.nii.gz", v)
    write_volume(tmp_path / "b.nii.gz", v)
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def test_axis_order_is_x_fastest(tmp_path):
    # NIfTI stores x fastest; a value at index (1, 0, 0) must land at byte
    # offset 1 * itemsize in the payload
    data = np.zeros((3, 2, 2), dtype=np.uint8)
    data[1, 0, 0] = 9
    path = tmp_path / "o.nii"
    write_volume(path, Volume(data, (1, 1, 1)))
    raw = path.read_bytes()
    assert raw[352 + 1] == 9


def test_rejects_unknown_suffix_and_dtype(tmp_path):
    v = Volume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1))
    with pytest.raises(ValueError):
        write_volume(tmp_path / "x.mha", v)
    with pytest.raises(ValueError):
        write_volume(tmp_path / "x.nii", Volume(np.zeros((2, 2, 2), dtype=np.int64), (1, 1, 1)))
