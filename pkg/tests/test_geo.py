"""Distance helpers against hand-derived spherical geometry values."""
import numpy as np
import pytest

from stpanel.errors import DomainError
from stpanel.geo import (
    EARTH_RADIUS_KM,
    check_metric,
    distances_to_points,
    great_circle_km,
    pairwise_distances,
)

# R * pi/2, R * pi/180 and R * pi for R = 6371.0088 km
QUARTER_CIRCLE_KM = 10007.557221017962
ONE_DEGREE_EQUATOR_KM = 111.1950802335329
ANTIPODAL_KM = 20015.114442035923


def test_quarter_circle_along_equator():
    assert great_circle_km(0.0, 0.0, 0.0, 90.0) == pytest.approx(QUARTER_CIRCLE_KM, rel=1e-12)


def test_one_degree_at_equator():
    assert great_circle_km(0.0, 0.0, 0.0, 1.0) == pytest.approx(ONE_DEGREE_EQUATOR_KM, rel=1e-12)


def test_pole_to_pole():
    assert great_circle_km(-90.0, 17.0, 90.0, 123.0) == pytest.approx(ANTIPODAL_KM, rel=1e-12)


def test_antipodal_does_not_nan():
    # haversine argument can round just past 1 here; the clip must hold
    d = great_circle_km(0.0, 0.0, 0.0, 180.0)
    assert np.isfinite(d)
    assert d == pytest.approx(ANTIPODAL_KM, rel=1e-9)


def test_zero_distance():
    assert great_circle_km(23.5, 120.2, 23.5, 120.2) == 0.0


def test_great_circle_symmetry():
    a, b = (25.03, 121.51), (22.63, 120.30)
    assert great_circle_km(*a, *b) == pytest.approx(great_circle_km(*b, *a), rel=1e-15)


def test_great_circle_broadcasts():
    lats = np.array([0.0, 10.0, 20.0])
    d = great_circle_km(0.0, 0.0, lats, 0.0)
    assert d.shape == (3,)
    assert d[0] == 0.0
    assert np.all(np.diff(d) > 0)


def test_euclidean_three_four_five():
    coords = np.array([[0.0, 0.0], [3.0, 0.0], [3.0, 4.0]])
    d = pairwise_distances(coords, metric="euclidean")
    assert d[0, 2] == pytest.approx(5.0, abs=1e-15)
    assert d[0, 1] == 3.0
    assert d[1, 2] == 4.0


def test_pairwise_symmetric_zero_diagonal():
    rng = np.random.default_rng(7)
    coords = rng.uniform(-50, 50, size=(9, 2))
    for metric in ("euclidean", "greatcircle"):
        d = pairwise_distances(coords, metric=metric)
        assert np.array_equal(d, d.T)
        assert np.all(np.diag(d) == 0.0)
        assert np.all(d >= 0.0)


def test_distances_to_points_matches_pairwise():
    rng = np.random.default_rng(8)
    coords = rng.uniform(-30, 30, size=(6, 2))
    for metric in ("euclidean", "greatcircle"):
        full = pairwise_distances(coords, metric=metric)
        cross = distances_to_points(coords, coords, metric=metric)
        np.testing.assert_allclose(cross, full, atol=1e-9)


def test_distances_to_points_shape():
    coords = np.zeros((4, 2))
    points = np.array([[1.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
    d = distances_to_points(coords, points, metric="euclidean")
    assert d.shape == (4, 3)
    assert d[0, 0] == 1.0


def test_unknown_metric_rejected():
    with pytest.raises(DomainError):
        check_metric("manhattan")
    with pytest.raises(DomainError):
        pairwise_distances(np.zeros((2, 2)), metric="chordal")


def test_bad_coordinate_shape_rejected():
    with pytest.raises(DomainError):
        pairwise_distances(np.zeros((3, 3)), metric="euclidean")
