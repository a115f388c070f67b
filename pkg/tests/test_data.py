import numpy as np
import numpy.testing as npt
import pytest

from srinet.data import (
    SHAPE_KINDS,
    TriangleMesh,
    jitter,
    label_colors,
    load_manifest,
    make_synth_dataset,
    parse_off,
    parse_ply,
    sample_surface,
    scalar_colors,
    split_dataset,
    synth_shape,
    write_ply_colored,
)
from srinet.errors import InvalidInputError, ParseError
from srinet.geom import PointCloud, random_rotation

TETRA_OFF = """OFF
4 4 6
0 0 0
1 0 0
0 1 0
0 0 1
3 0 1 2
3 0 1 3
3 0 2 3
3 1 2 3
"""


class TestParseOff:
    def test_minimal_tetrahedron(self):
        mesh = parse_off(TETRA_OFF)
        assert mesh.vertices.shape == (4, 3)
        assert mesh.faces.shape == (4, 3)

    def test_comments_and_blank_lines(self):
        text = "OFF  # header\n\n4 4 6\n" + "\n".join(TETRA_OFF.splitlines()[2:])
        mesh = parse_off(text)
        assert mesh.vertices.shape == (4, 3)

    def test_glued_header_variant(self):
        text = "OFF4 4 6\n" + "\n".join(TETRA_OFF.splitlines()[2:])
        mesh = parse_off(text)
        assert mesh.faces.shape == (4, 3)

    def test_quad_face_fan_triangulated(self):
        text = ("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n"
                "4 0 1 2 3\n")
        mesh = parse_off(text)
        assert mesh.faces.shape == (2, 3)
        npt.assert_array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])

    def test_truncated_file_names_line(self):
        text = "OFF\n4 4 6\n0 0 0\n1 0 0\n"
        with pytest.raises(ParseError) as err:
            parse_off(text)
        assert err.value.line == 4

    def test_bad_header(self):
        with pytest.raises(ParseError):
            parse_off("PLY\n1 0 0\n0 0 0\n")

    def test_out_of_range_index(self):
        text = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 9\n"
        with pytest.raises(ParseError):
            parse_off(text)

    def test_degenerate_faces_dropped(self):
        text = ("OFF\n3 2 0\n0 0 0\n1 0 0\n0 1 0\n"
                "3 0 1 2\n3 0 0 1\n")
        mesh = parse_off(text)
        assert mesh.faces.shape == (1, 3)


def unit_square_mesh():
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    return TriangleMesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))


class TestSampleSurface:
    def test_square_mean_near_center(self):
        cloud = sample_surface(unit_square_mesh(), 10000, seed=0)
        npt.assert_allclose(cloud.points.mean(axis=0), (0.5, 0.5, 0.0),
                            atol=0.02)

    def test_single_triangle_normals(self):
        mesh = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float),
                            np.array([[0, 1, 2]]))
        cloud = sample_surface(mesh, 100, seed=1)
        npt.assert_allclose(cloud.normals, np.tile([0, 0, 1.0], (100, 1)))

    def test_cube_face_counts_balanced(self):
        from tests.test_keypoint import cube_mesh
        cloud = sample_surface(cube_mesh(), 6000, seed=2)
        on_face = np.isclose(np.abs(cloud.points), 0.5)
        counts = [np.sum(on_face[:, ax] & (np.sign(cloud.points[:, ax]) == s))
                  for ax in range(3) for s in (1, -1)]
        sigma = np.sqrt(6000 * (1 / 6) * (5 / 6))
        assert all(abs(c - 1000) < 3 * sigma for c in counts)

    def test_equivariant_per_seed(self):
        mesh = unit_square_mesh()
        rot = random_rotation(9)
        turned = TriangleMesh(rot.apply(mesh.vertices), mesh.faces)
        a = sample_surface(mesh, 500, seed=3)
        b = sample_surface(turned, 500, seed=3)
        npt.assert_allclose(b.points, rot.apply(a.points), atol=1e-9)

    def test_empty_mesh_rejected(self):
        mesh = TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
        with pytest.raises(InvalidInputError):
            sample_surface(mesh, 10, seed=0)


class TestSynthShape:
    def test_sphere_analytic(self):
        s = synth_shape("sphere", 200, seed=0, noise=0.0)
        npt.assert_allclose(np.linalg.norm(s.cloud.points, axis=1), 0.5,
                            atol=1e-9)
        radial = s.cloud.points / np.linalg.norm(s.cloud.points, axis=1,
                                                 keepdims=True)
        npt.assert_allclose(s.cloud.normals, radial, atol=1e-9)

    def test_cylinder_cap_labels(self):
        s = synth_shape("cylinder", 500, seed=1, noise=0.0)
        caps = s.cloud.part_labels == 1
        npt.assert_allclose(np.abs(s.cloud.points[caps, 2]), 0.5, atol=1e-12)
        assert np.all(np.abs(s.cloud.points[~caps, 2]) <= 0.5)

    def test_all_kinds_on_surface(self):
        for kind in SHAPE_KINDS:
            s = synth_shape(kind, 64, seed=2, noise=0.0)
            assert s.cloud.n == 64
            assert s.class_id == SHAPE_KINDS.index(kind)
            npt.assert_allclose(np.linalg.norm(s.cloud.normals, axis=1), 1.0,
                                atol=1e-9)

    def test_box_points_exactly_on_faces(self):
        s = synth_shape("box", 300, seed=3, noise=0.0)
        p = np.abs(s.cloud.points)
        half = np.array([0.5, 0.35, 0.25])
        on_face = np.isclose(p, half, atol=1e-12)
        assert np.all(on_face.any(axis=1))
        assert np.all(p <= half + 1e-12)
        # one part id per opposing face pair
        assert set(np.unique(s.cloud.part_labels)) == {0, 1, 2}

    def test_cone_points_exactly_on_surface(self):
        s = synth_shape("cone", 300, seed=4, noise=0.0)
        pts = s.cloud.points
        rho = np.hypot(pts[:, 0], pts[:, 1])
        lateral = s.cloud.part_labels == 0
        # lateral surface: rho = r * (1 - z/h) with r=0.45, h=1
        npt.assert_allclose(rho[lateral], 0.45 * (1 - pts[lateral, 2]),
                            atol=1e-12)
        npt.assert_allclose(pts[~lateral, 2], 0.0, atol=1e-12)
        assert np.all(rho[~lateral] <= 0.45 + 1e-12)

    def test_torus_points_exactly_on_surface(self):
        s = synth_shape("torus", 300, seed=5, noise=0.0)
        pts = s.cloud.points
        ring = np.hypot(pts[:, 0], pts[:, 1])
        tube = np.hypot(ring - 0.4, pts[:, 2])
        npt.assert_allclose(tube, 0.15, atol=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(InvalidInputError):
            synth_shape("pyramid", 64, seed=0)

    def test_too_few_points(self):
        with pytest.raises(InvalidInputError):
            synth_shape("sphere", 32, seed=0)

    def test_dataset_split_deterministic(self):
        ds = make_synth_dataset(per_class=10, n_points=64, seed=5)
        tr_a, te_a = split_dataset(ds, 0.8, seed=3)
        tr_b, te_b = split_dataset(ds, 0.8, seed=3)
        assert len(tr_a) == 40 and len(te_a) == 10
        for a, b in zip(tr_a, tr_b):
            assert a is b


class TestJitter:
    def test_sigma_zero_identity(self):
        cloud = PointCloud(np.random.default_rng(0).normal(size=(10, 3)))
        out = jitter(cloud, 0.0, 0.1, seed=1)
        npt.assert_array_equal(out.points, cloud.points)

    def test_clipped(self):
        cloud = PointCloud(np.zeros((5000, 3)))
        out = jitter(cloud, 0.05, 0.02, seed=2)
        assert np.abs(out.points).max() <= 0.02 + 1e-15

    def test_empirical_std(self):
        cloud = PointCloud(np.zeros((10000, 3)))
        out = jitter(cloud, 0.01, 0.05, seed=3)
        assert abs(out.points.std() - 0.01) < 0.001

    def test_deterministic(self):
        cloud = PointCloud(np.random.default_rng(1).normal(size=(20, 3)))
        npt.assert_array_equal(jitter(cloud, 0.02, 0.05, 7).points,
                               jitter(cloud, 0.02, 0.05, 7).points)


class TestPlyRoundTrip:
    def test_single_vertex(self, tmp_path):
        path = tmp_path / "one.ply"
        write_ply_colored(PointCloud([(0.25, -1.5, 3.0)]), np.array([1.0]), path)
        cloud = parse_ply(path.read_text())
        npt.assert_allclose(cloud.points, [(0.25, -1.5, 3.0)], atol=1e-5)

    def test_ramp_endpoints(self, tmp_path):
        path = tmp_path / "ramp.ply"
        cloud = PointCloud(np.zeros((3, 3)) + np.arange(3)[:, None])
        write_ply_colored(cloud, np.array([0.0, 0.5, 1.0]), path)
        lines = path.read_text().splitlines()
        body = [ln.split()[3:] for ln in lines[-3:]]
        first = scalar_colors(np.array([0.0, 1.0]))[0]
        last = scalar_colors(np.array([0.0, 1.0]))[1]
        assert body[0] == [str(c) for c in first]
        assert body[2] == [str(c) for c in last]

    def test_coordinates_round_trip(self, tmp_path):
        rng = np.random.Generator(np.random.PCG64(4))
        pts = rng.standard_normal((50, 3))
        path = tmp_path / "rt.ply"
        write_ply_colored(PointCloud(pts), rng.random(50), path)
        back = parse_ply(path.read_text())
        npt.assert_allclose(back.points, pts, atol=1e-5)

    def test_label_palette(self, tmp_path):
        path = tmp_path / "labels.ply"
        cloud = PointCloud(np.zeros((2, 3)) + np.arange(2)[:, None])
        write_ply_colored(cloud, np.array([0, 1], dtype=np.int64), path)
        lines = path.read_text().splitlines()
        assert lines[-2].split()[3:] == [str(c) for c in label_colors([0])[0]]
        assert lines[-1].split()[3:] == [str(c) for c in label_colors([1])[0]]

    def test_wrong_length_rejected(self, tmp_path):
        with pytest.raises(InvalidInputError):
            write_ply_colored(PointCloud(np.zeros((3, 3))), np.zeros(2),
                              tmp_path / "bad.ply")


class TestManifest:
    def test_parse(self, tmp_path):
        (tmp_path / "models").mkdir()
        mpath = tmp_path / "list.txt"
        mpath.write_text("# comment\nmodels/a.off 0\nmodels/b.off 2\n\n")
        entries = load_manifest(mpath)
        assert entries == [(tmp_path / "models/a.off", 0),
                           (tmp_path / "models/b.off", 2)]

    def test_bad_class_id(self, tmp_path):
        mpath = tmp_path / "list.txt"
        mpath.write_text("a.off zero\n")
        with pytest.raises(ParseError):
            load_manifest(mpath)
