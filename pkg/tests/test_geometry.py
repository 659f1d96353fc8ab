import numpy as np
import pytest

from helmstereo.errors import BehindCamera, CalibrationError, DegenerateGeometry
from helmstereo.geometry import (
    ViewStation,
    camera_rotation,
    homogeneous,
    make_station,
    pixel_rays,
    point_at_depth,
    project,
    project_many,
    station_depth,
    view_vector,
)


def identity_station(sid="ident"):
    # [I | 0] with center at the origin.
    proj = np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)
    return ViewStation(id=sid, center=np.zeros(3), projection=proj)


class TestViewVector:
    def test_axis_aligned(self):
        st = make_station("c", center=(0, 0, 1), look_at=(0, 0, 0))
        assert np.allclose(view_vector(st, (0, 0, 0)), (0, 0, 1))

    def test_diagonal_symmetry(self):
        st = make_station("c", center=(1, 1, 0), look_at=(0, 0, 0), up=(0, 0, 1))
        v = view_vector(st, (0, 0, 0))
        assert np.allclose(v, (1 / np.sqrt(2), 1 / np.sqrt(2), 0))

    def test_three_four_five(self):
        # Direct normalization of the 3-4-5 triple.
        st = make_station("c", center=(3, 0, 4), look_at=(0, 0, 0))
        assert np.allclose(view_vector(st, (0, 0, 0)), (0.6, 0.0, 0.8))

    def test_coincident_point_raises(self):
        st = make_station("c", center=(0, 0, 1), look_at=(0, 0, 0))
        with pytest.raises(DegenerateGeometry):
            view_vector(st, (0, 0, 1))

    def test_unit_norm_everywhere(self):
        rng = np.random.default_rng(3)
        st = make_station("c", center=(0.3, -0.2, 2.0), look_at=(0, 0, 0))
        for _ in range(200):
            p = rng.normal(size=3)
            assert abs(np.linalg.norm(view_vector(st, p)) - 1.0) < 1e-12


class TestProject:
    def test_principal_ray(self):
        st = identity_station()
        assert np.allclose(project(st, (0, 0, 5)), (0, 0))

    def test_perspective_division(self):
        st = identity_station()
        assert np.allclose(project(st, (1, 2, 2)), (0.5, 1.0))

    def test_translated_station(self):
        # [I | t] with t = (0, 0, -1): camera center at +z = 1.
        proj = np.concatenate([np.eye(3), [[0], [0], [-1.0]]], axis=1)
        st = ViewStation(id="t", center=(0, 0, 1), projection=proj)
        assert np.allclose(project(st, (0, 0, 5)), (0, 0))
        assert np.isclose(station_depth(st, (0, 0, 5)), 4.0)

    def test_behind_camera_raises(self):
        st = identity_station()
        with pytest.raises(BehindCamera):
            project(st, (0, 0, -1))

    def test_projective_scale_invariance(self):
        # Scaling the homogeneous world point must not move the pixel.
        st = make_station("c", center=(0.5, -1.0, 4.0), look_at=(0, 0, 0), focal_px=90)
        point = np.array([0.2, 0.1, 0.5])
        pix = project(st, point)
        for scale in (2.0, 7.5, 0.25):
            x = st.projection @ (scale * homogeneous(point))
            assert np.allclose(x[:2] / x[2], pix)

    def test_project_many_matches_scalar(self):
        st = make_station("c", center=(1.0, 0.5, 3.0), look_at=(0, 0, 0), focal_px=80)
        pts = np.array([[0.1, 0.2, 0.0], [-0.4, 0.0, 1.0], [0.0, 0.0, 10.0]])
        pix, front = project_many(st, pts)
        assert front[0] and front[1]
        assert not front[2]  # beyond the center looking back
        for k in range(2):
            assert np.allclose(pix[k], project(st, pts[k]))


class TestRays:
    def test_ray_roundtrip(self):
        st = make_station("c", center=(0.7, -0.3, 5.0), look_at=(0.1, 0, 0), focal_px=140)
        rng = np.random.default_rng(11)
        pix = rng.uniform(5, 120, size=(50, 2))
        depths = rng.uniform(2.0, 6.0, size=50)
        pts = point_at_depth(st, pix, depths)
        assert np.allclose(station_depth(st, pts), depths)
        back, front = project_many(st, pts)
        assert front.all()
        assert np.allclose(back, pix, atol=1e-9)

    def test_rays_unit_and_forward(self):
        st = make_station("c", center=(0, 0, 4), look_at=(0, 0, 0))
        dirs = pixel_rays(st, [[10.0, 20.0], [63.5, 63.5]])
        assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0)
        assert (dirs @ st.forward_axis > 0).all()

    def test_camera_rotation_orthonormal(self):
        st = make_station("c", center=(1.2, 0.4, 3.0), look_at=(0, 0.2, 0), focal_px=75)
        rot = camera_rotation(st)
        assert np.allclose(rot @ rot.T, np.eye(3), atol=1e-12)
        assert np.allclose(rot[2], st.forward_axis)


class TestStationValidation:
    def test_rank_deficient_rejected(self):
        proj = np.zeros((3, 4))
        proj[0, 0] = proj[1, 1] = 1.0  # rank 2
        with pytest.raises(CalibrationError):
            ViewStation(id="bad", center=np.zeros(3), projection=proj)

    def test_center_mismatch_rejected(self):
        proj = np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)
        with pytest.raises(CalibrationError):
            ViewStation(id="bad", center=(0, 0, 1), projection=proj)

    def test_nullspace_invariant_holds(self):
        st = make_station("c", center=(2.0, -1.0, 4.0), look_at=(0, 0, 0))
        residual = np.linalg.norm(st.projection @ homogeneous(st.center))
        assert residual < 1e-9 * np.linalg.norm(st.projection)
