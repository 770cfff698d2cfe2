import numpy as np
import pytest

from anisph.particles import ParticleTable, Snapshot, create_table, get_attribute, set_attribute
from conftest import lattice_table


def test_minimal_table():
    t = create_table([1.0], [[0, 0, 0]], [[0, 0, 0]])
    assert t.n == 1
    assert t.density[0] == 0.0
    assert t.pressure[0] == 0.0
    assert t.attributes == {}


def test_negative_mass_names_index():
    with pytest.raises(ValueError, match="index 1"):
        create_table([1.0, -1.0], np.zeros((2, 3)), np.zeros((2, 3)))


def test_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        create_table([1.0, 1.0], np.zeros((3, 3)), np.zeros((2, 3)))


def test_non_finite_coordinate_names_index():
    X = np.zeros((4, 3))
    X[2, 1] = np.nan
    with pytest.raises(ValueError, match="position at particle index 2"):
        create_table(np.ones(4), X, np.zeros((4, 3)))


def test_lattice_1000_invariants():
    t = lattice_table(10)
    assert t.n == 1000
    assert (t.mass > 0).all()
    for arr in (t.mass, t.position, t.velocity, t.density, t.pressure):
        assert arr.shape[0] == 1000
    assert np.unique(t.position, axis=0).shape[0] == 1000


def test_attribute_round_trip_and_overwrite():
    t = create_table(np.ones(3), np.zeros((3, 3)), np.zeros((3, 3)))
    set_attribute(t, "A", [1, 2, 3])
    assert get_attribute(t, "A").tolist() == [1, 2, 3]
    set_attribute(t, "A", [4, 5, 6])
    assert get_attribute(t, "A").tolist() == [4, 5, 6]
    with pytest.raises(KeyError):
        get_attribute(t, "missing")
    with pytest.raises(ValueError):
        set_attribute(t, "B", [1, 2])


def test_builtin_fields_addressable_by_name():
    t = create_table([2.0, 3.0], np.zeros((2, 3)), np.zeros((2, 3)))
    assert get_attribute(t, "mass").tolist() == [2.0, 3.0]
    with pytest.raises(ValueError):
        set_attribute(t, "density", [1.0, 1.0])


def test_require_density_fails_loudly_when_unset():
    t = create_table([1.0], np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(ValueError, match="density"):
        t.require_density()


def test_copy_is_deep_and_equal():
    t = lattice_table(3)
    t.set_attribute("A", np.arange(27.0))
    c = t.copy()
    assert c.equals(t)
    c.position[0, 0] = 99.0
    c.attributes["A"][0] = -1
    assert t.position[0, 0] == 0.0 and t.attributes["A"][0] == 0.0
    assert not c.equals(t)


def test_snapshot_rejects_negative_step():
    t = create_table([1.0], np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        Snapshot(0.0, -1, t)
    snap = Snapshot.capture(t, 0.5, 3)
    assert isinstance(snap.table, ParticleTable) and snap.table is not t
