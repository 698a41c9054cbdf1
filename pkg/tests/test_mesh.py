import numpy as np
import pytest

from partpose import (
    TriangleMesh,
    load_edge_polylines,
    load_obj,
    make_bracket,
    sample_edge_keypoints,
    save_edge_polylines,
    save_obj,
)


class TestMeshIO:
    def test_obj_round_trip(self, bracket_mesh, tmp_path):
        path = tmp_path / "part.obj"
        save_obj(bracket_mesh, path)
        loaded = load_obj(path)
        assert np.array_equal(loaded.vertices, bracket_mesh.vertices)
        assert np.array_equal(loaded.triangles, bracket_mesh.triangles)

    def test_quad_faces_are_triangulated(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        mesh = load_obj(path)
        assert len(mesh.triangles) == 2

    def test_degenerate_triangles_filtered_at_load(self, tmp_path):
        path = tmp_path / "degen.obj"
        path.write_text(
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\n"
            "f 1 2 3\n"
            "f 1 2 4\n"  # collinear, zero area
        )
        mesh = load_obj(path)
        assert len(mesh.triangles) == 1
        assert (mesh.triangle_areas() > 0).all()

    def test_missing_faces_rejected(self, tmp_path):
        path = tmp_path / "empty.obj"
        path.write_text("v 0 0 0\n")
        with pytest.raises(ValueError, match="no triangles"):
            load_obj(path)

    def test_out_of_range_index_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 5]]))

    def test_polyline_round_trip(self, bracket_polylines, tmp_path):
        path = tmp_path / "edges.txt"
        save_edge_polylines(bracket_polylines, path)
        loaded = load_edge_polylines(path)
        assert len(loaded) == len(bracket_polylines)
        for a, b in zip(loaded, bracket_polylines):
            assert np.array_equal(a, b)


class TestKeypointSampling:
    def test_total_count_and_contiguous_ids(self, bracket_mesh, bracket_polylines):
        kps = sample_edge_keypoints(bracket_mesh, bracket_polylines, 700)
        assert len(kps) == 700
        assert np.array_equal(kps.semantic_ids, np.arange(700))

    def test_every_edge_gets_points_proportional_to_length(
        self, bracket_mesh, bracket_polylines
    ):
        kps = sample_edge_keypoints(bracket_mesh, bracket_polylines, 700)
        counts = np.bincount(kps.edge_ids, minlength=len(bracket_polylines))
        assert (counts >= 1).all()
        lengths = np.array(
            [
                np.linalg.norm(np.diff(bracket_mesh.vertices[poly], axis=0), axis=1).sum()
                for poly in bracket_polylines
            ]
        )
        expected = lengths / lengths.sum() * 700
        assert np.abs(counts - expected).max() <= 1.0

    def test_points_lie_on_their_polylines(self, bracket_mesh, bracket_polylines):
        kps = sample_edge_keypoints(bracket_mesh, bracket_polylines, 120)
        for eid, poly in enumerate(bracket_polylines):
            pts = kps.positions[kps.edge_ids == eid]
            a = bracket_mesh.vertices[poly[0]]
            b = bracket_mesh.vertices[poly[-1]]
            direction = b - a
            length = np.linalg.norm(direction)
            direction = direction / length
            rel = pts - a
            along = rel @ direction
            perp = rel - np.outer(along, direction)
            assert np.abs(perp).max() < 1e-12
            assert (along > 0).all() and (along < length).all()

    def test_no_duplicate_positions(self, bracket_mesh, bracket_polylines):
        kps = sample_edge_keypoints(bracket_mesh, bracket_polylines, 700)
        rounded = np.round(kps.positions, 12)
        assert len(np.unique(rounded, axis=0)) == 700

    def test_keypoints_are_not_coplanar(self, bracket_mesh, bracket_polylines):
        # A planar keypoint set would make the linear pose solve degenerate.
        kps = sample_edge_keypoints(bracket_mesh, bracket_polylines, 700)
        centered = kps.positions - kps.positions.mean(axis=0)
        singular = np.linalg.svd(centered, compute_uv=False)
        assert singular[2] > 1e-4


class TestBracket:
    def test_watertight_edge_use(self, bracket_mesh):
        # Every outline edge of a closed solid is shared by exactly two faces.
        edges = {}
        for tri in bracket_mesh.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                edges[key] = edges.get(key, 0) + 1
        assert set(edges.values()) <= {1, 2}

    def test_bounding_radius_covers_all_vertices(self, bracket_mesh):
        r = bracket_mesh.bounding_radius()
        center = 0.5 * (
            bracket_mesh.vertices.min(axis=0) + bracket_mesh.vertices.max(axis=0)
        )
        dist = np.linalg.norm(bracket_mesh.vertices - center, axis=1)
        assert (dist <= r + 1e-12).all()
        assert r == pytest.approx(dist.max())

    def test_twelve_edges(self, bracket_polylines):
        assert len(bracket_polylines) == 12


def test_make_bracket_mesh_is_valid():
    mesh, polylines = make_bracket()
    assert (mesh.triangle_areas() > 0).all()
    for poly in polylines:
        assert poly.min() >= 0 and poly.max() < len(mesh.vertices)
