import numpy as np
import pytest
from numpy.testing import assert_allclose

from lvlmc.data import (
    DataFormatError,
    Grid,
    SampleSet,
    read_gslib_grid,
    read_samples,
    write_gslib_grid,
    write_samples_csv,
)
from lvlmc.errors import InvariantError


def test_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    S = SampleSet(rng.uniform(0, 1e3, size=(20, 3)), rng.lognormal(size=(20, 2)), ("cu", "au"))
    write_samples_csv(tmp_path / "s.csv", S)
    R = read_samples(tmp_path / "s.csv")
    assert R.names == ("cu", "au")
    assert np.array_equal(R.locations, S.locations) and np.array_equal(R.values, S.values)


def test_geoeas_and_column_selection(tmp_path):
    p = tmp_path / "s.dat"
    p.write_text("title\n5\nNi\nX\nY\nZ\nFe\n1.5 0 1 2 40\n2.5 3 4 5 41\n")
    S = read_samples(p)
    assert S.names == ("Ni", "Fe")
    assert_allclose(S.locations, [[0, 1, 2], [3, 4, 5]])
    assert_allclose(read_samples(p, ["Fe"]).values, [[40], [41]])
    with pytest.raises(DataFormatError):
        read_samples(p, ["Co"])


def test_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x,y,z,a\n0,0,0,1\n1,1,1,oops\n")
    with pytest.raises(DataFormatError, match=r"bad\.csv:3"):
        read_samples(p)
    p.write_text("x,y,z,a\n0,0,0,1\n1,1,1\n")
    with pytest.raises(DataFormatError, match=r":3"):
        read_samples(p)
    with pytest.raises(FileNotFoundError):
        read_samples(tmp_path / "missing.csv")


def test_sample_set_invariants():
    with pytest.raises((InvariantError, ValueError)):
        SampleSet(np.zeros((3, 2)), np.zeros((3, 1)), ("a",))
    with pytest.raises((InvariantError, ValueError)):
        SampleSet(np.zeros((3, 3)), np.zeros((2, 1)), ("a",))


def test_grid_ordering_and_lookup():
    g = Grid((0.5, 0.5, 0.5), (1.0, 2.0, 3.0), (4, 3, 2))
    N = g.nodes()
    assert N.shape == (24, 3)
    assert_allclose(N[:2], [[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]])  # x fastest
    i = g.flat_index(2, 1, 1)
    assert_allclose(N[i], [2.5, 2.5, 3.5])
    assert g.nearest_index(N + 0.2).tolist() == list(range(24))
    assert g.nearest_index([[-10.0, -10.0, -10.0]]).tolist() == [0]


def test_gslib_grid_round_trip(tmp_path):
    v = np.arange(12.0)
    write_gslib_grid(tmp_path / "g.gslib", "t", ["a", "b"], [v, -v])
    title, names, M = read_gslib_grid(tmp_path / "g.gslib")
    assert title == "t" and names == ["a", "b"]
    assert_allclose(M, np.column_stack([v, -v]))
