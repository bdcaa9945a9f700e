import numpy as np
import pytest

from spdelab import fields
from spdelab.triple import SpectralTriple


@pytest.fixture
def triple():
    return SpectralTriple(dim=2, grid_points_per_axis=16, box_length=2.0)


def test_binary_roundtrip(tmp_path, triple):
    rng = np.random.default_rng(1)
    values = rng.standard_normal(triple.shape)
    path = tmp_path / "field.bin"
    fields.save_field(path, values, triple.box_length)
    back, meta = fields.load_field(path)
    assert np.array_equal(back, values)
    assert meta["dim"] == 2 and meta["grid_points"] == 16
    assert meta["box_length"] == 2.0


def test_binary_roundtrip_vector(tmp_path, triple):
    values = np.stack([fields.gaussian_bump(triple),
                       fields.constant_field(triple, 2.0)])
    path = tmp_path / "vec.bin"
    fields.save_field(path, values, triple.box_length, n_times=0)
    back, _ = fields.load_field(path)
    assert back.shape == (2,) + triple.shape
    assert np.array_equal(back, values)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a field file at all")
    with pytest.raises(ValueError):
        fields.load_field(path)


def test_csv_slice(tmp_path, triple):
    path = tmp_path / "slice.csv"
    fields.save_slice_csv(path, fields.gaussian_bump(triple), triple)
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y,value"
    assert len(lines) == 1 + 16 * 16


def test_csv_slice_1d(tmp_path):
    tri = SpectralTriple(dim=1, grid_points_per_axis=8, box_length=1.0)
    path = tmp_path / "line.csv"
    fields.save_slice_csv(path, fields.sin_mode(tri), tri)
    lines = path.read_text().splitlines()
    assert lines[0] == "x,value"
    assert len(lines) == 9


def test_singular_profiles_finite(triple):
    inv = fields.inverse_norm_scalar(triple, 1.0)
    assert np.all(np.isfinite(inv))
    # the origin node carries the cell average, larger than any neighbor
    assert inv.max() > 1.0 / triple.spacing

    drift = fields.inverse_norm_drift(triple, 1.0, support=0.5)
    assert drift.shape == (2,) + triple.shape
    assert np.all(np.isfinite(drift))
    # odd profile: principal value at the center node is zero
    center = (triple.grid_points_per_axis // 2,) * 2
    assert drift[(slice(None),) + center].max() == 0.0


def test_cutoff_support(triple):
    r = fields.radial_distance(triple)
    cut = fields.smooth_cutoff(r, 0.5)
    assert cut[r >= 0.5].max() == 0.0
    assert cut[(triple.grid_points_per_axis // 2,) * 2] == pytest.approx(1.0)
