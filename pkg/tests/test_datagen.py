import json

import numpy as np
import pytest

from buildiff.datagen import (BuildingSpec, DatasetManifest, build_dataset,
                              generate_building, is_watertight, random_spec,
                              render_silhouette, roof_oracle, sample_surface)
from buildiff.geometry import PointCloud, load_bpc


def box_spec(**kw):
    return BuildingSpec(width=2.0, depth=1.0, wall_height=1.0, **kw)


class TestSpecValidation:
    def test_nonpositive_dims(self):
        with pytest.raises(ValueError):
            BuildingSpec(width=0.0, depth=1.0, wall_height=1.0)

    def test_unknown_roof(self):
        with pytest.raises(ValueError):
            box_spec(roof_type="dome")

    def test_flat_roof_with_pitch(self):
        with pytest.raises(ValueError):
            box_spec(roof_type="flat", roof_pitch=0.5)

    def test_notched_pitched_rejected(self):
        with pytest.raises(ValueError):
            generate_building(box_spec(roof_type="gable", roof_pitch=0.5,
                                       notch_w=0.5, notch_d=0.3))


class TestMeshes:
    def test_flat_box_twelve_triangles(self):
        mesh = generate_building(box_spec())
        assert len(mesh.vertices) == 8
        assert len(mesh.triangles) == 12

    def test_flat_box_total_area(self):
        mesh = generate_building(box_spec())  # 2 x 1 x 1 box
        # 2*(2*1) bottom+top + 2*(2*1) long walls + 2*(1*1) short walls
        assert mesh.areas().sum() == pytest.approx(10.0)

    def test_l_shape_watertight(self):
        mesh = generate_building(box_spec(notch_w=0.8, notch_d=0.4))
        assert is_watertight(mesh)

    def test_gable_max_height(self):
        spec = box_spec(roof_type="gable", roof_pitch=0.8)
        mesh = generate_building(spec)
        assert mesh.vertices[:, 2].max() == pytest.approx(
            spec.wall_height + spec.roof_pitch * spec.depth / 2.0)

    def test_hip_ridge_shorter_than_width(self):
        mesh = generate_building(box_spec(roof_type="hip", roof_pitch=0.6))
        top = mesh.vertices[mesh.vertices[:, 2] == mesh.vertices[:, 2].max()]
        ridge_len = np.abs(top[0, 0] - top[1, 0])
        assert 0 < ridge_len < 2.0

    def test_hip_requires_wide_footprint(self):
        with pytest.raises(ValueError):
            generate_building(BuildingSpec(width=1.0, depth=1.0,
                                           wall_height=1.0, roof_type="hip",
                                           roof_pitch=0.5))

    @pytest.mark.parametrize("kw", [
        {},
        {"roof_type": "gable", "roof_pitch": 0.7},
        {"roof_type": "hip", "roof_pitch": 0.7},
        {"notch_w": 0.6, "notch_d": 0.5},
    ])
    def test_all_variants_watertight(self, kw):
        assert is_watertight(generate_building(box_spec(**kw)))

    def test_open_mesh_detected(self):
        mesh = generate_building(box_spec())
        mesh.triangles = mesh.triangles[:-1]
        assert not is_watertight(mesh)


class TestSampling:
    def test_points_lie_on_surface(self):
        spec = box_spec(roof_type="gable", roof_pitch=0.6)
        mesh = generate_building(spec)
        cloud = sample_surface(mesh, 2000, seed=0, normalize=False)
        # residual against every supporting plane; each point must sit on one
        v = mesh.vertices
        t = mesh.triangles
        normals = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        offsets = np.einsum("ij,ij->i", normals, v[t[:, 0]])
        dist = np.abs(cloud.points @ normals.T - offsets)
        assert dist.min(axis=1).max() < 1e-9

    def test_area_proportional_faces(self):
        mesh = generate_building(box_spec())
        n = 20000
        cloud = sample_surface(mesh, n, seed=1, normalize=False)
        # count bottom-face points (z == 0); expect share = 2/10 of area
        frac = np.mean(cloud.points[:, 2] < 1e-12)
        p = 2.0 / 10.0
        sigma = np.sqrt(p * (1 - p) / n)
        assert abs(frac - p) < 3 * sigma + 1e-9

    def test_normalized_by_default(self):
        mesh = generate_building(box_spec())
        cloud = sample_surface(mesh, 100, seed=2)
        assert cloud.meta.get("normalized") is True
        assert cloud.points.min() >= -1.0 - 1e-12
        assert cloud.points.max() <= 1.0 + 1e-12

    def test_deterministic(self):
        mesh = generate_building(box_spec())
        a = sample_surface(mesh, 64, seed=3)
        b = sample_surface(mesh, 64, seed=3)
        np.testing.assert_array_equal(a.points, b.points)


class TestSilhouette:
    def test_shape_and_range(self):
        mesh = generate_building(box_spec())
        img = render_silhouette(mesh, (0.3, 0.4), resolution=32)
        assert img.pixels.shape == (32, 32)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0

    def test_head_on_box_is_axis_aligned_rectangle(self):
        # looking along +y at a box: silhouette is a filled rectangle
        mesh = generate_building(box_spec())
        img = render_silhouette(mesh, (np.pi / 2, 0.0), resolution=32)
        cov = img.pixels
        rows = cov.max(axis=1) > 0.5
        cols = cov.max(axis=0) > 0.5
        interior = cov[np.ix_(rows, cols)]
        assert interior.min() > 0.9  # solid, no holes

    def test_covers_about_ninety_percent_of_frame(self):
        mesh = generate_building(box_spec())
        img = render_silhouette(mesh, (np.pi / 2, 0.0), resolution=40)
        occupied = (img.pixels > 0.5).any(axis=0)
        width_frac = occupied.sum() / 40.0
        assert 0.82 <= width_frac <= 0.95

    def test_gable_peak_at_top_rows(self):
        spec = box_spec(roof_type="gable", roof_pitch=0.9)
        mesh = generate_building(spec)
        # viewing along the ridge (x axis) shows the triangular profile
        img = render_silhouette(mesh, (0.0, 0.0), resolution=32)
        row_widths = (img.pixels > 0.5).sum(axis=1)
        occupied = row_widths[row_widths > 0]
        assert occupied[0] < occupied[-1] * 0.6  # narrow top, wide base

    def test_resolution_floor(self):
        mesh = generate_building(box_spec())
        with pytest.raises(ValueError):
            render_silhouette(mesh, (0.0, 0.3), resolution=4)


class TestDataset:
    def test_build_layout_and_determinism(self, tmp_path):
        m1 = build_dataset(tmp_path / "a", n_train=6, n_test=2, n_points=128,
                           resolution=16, seed=9)
        m2 = build_dataset(tmp_path / "b", n_train=6, n_test=2, n_points=128,
                           resolution=16, seed=9)
        assert [e["id"] for e in m1.entries] == [e["id"] for e in m2.entries]
        for e1, e2 in zip(m1.entries, m2.entries):
            assert e1["spec"] == e2["spec"]
            b1 = (tmp_path / "a" / e1["cloud"]).read_bytes()
            b2 = (tmp_path / "b" / e2["cloud"]).read_bytes()
            assert b1 == b2
            s1 = (tmp_path / "a" / e1["silhouette"]).read_bytes()
            s2 = (tmp_path / "b" / e2["silhouette"]).read_bytes()
            assert s1 == s2

    def test_split_sizes_and_disjoint(self, tmp_path):
        m = build_dataset(tmp_path, n_train=6, n_test=3, n_points=64,
                          resolution=16, seed=0)
        train = set(m.ids("train"))
        test = set(m.ids("test"))
        assert len(train) == 6 and len(test) == 3
        assert not train & test

    def test_roof_mix_round_robin(self, tmp_path):
        m = build_dataset(tmp_path, n_train=4, n_test=2, n_points=64,
                          resolution=16, seed=0, roof_mix=("flat", "gable"))
        roofs = [e["spec"]["roof_type"] for e in m.entries]
        assert roofs == ["flat", "gable"] * 3

    def test_manifest_round_trip(self, tmp_path):
        m = build_dataset(tmp_path, n_train=2, n_test=1, n_points=64,
                          resolution=16, seed=1)
        back = DatasetManifest.load(tmp_path / "manifest.json")
        assert back.entries == m.entries

    def test_clouds_loadable_and_normalized(self, tmp_path):
        m = build_dataset(tmp_path, n_train=2, n_test=1, n_points=64,
                          resolution=16, seed=2)
        for e in m.entries:
            cloud = load_bpc(tmp_path / e["cloud"])
            assert cloud.count == 64
            assert np.abs(cloud.points).max() <= 1.0 + 1e-6


class TestRoofOracle:
    def test_matches_labels_on_fresh_samples(self):
        rng = np.random.default_rng(42)
        total = correct = 0
        for i in range(150):
            roof = "flat" if i % 2 == 0 else "gable"
            spec = random_spec(rng, roof)
            mesh = generate_building(spec)
            cloud = sample_surface(mesh, 1024, seed=spec.seed)
            correct += roof_oracle(cloud) == roof
            total += 1
        assert correct / total >= 0.99

    def test_minimum_points(self):
        with pytest.raises(ValueError):
            roof_oracle(PointCloud(np.random.default_rng(0).random((10, 3))))

    def test_synthetic_extremes(self):
        rng = np.random.default_rng(2)
        xy = rng.uniform(-1, 1, size=(400, 2))
        flat = np.column_stack([xy, np.where(rng.random(400) < 0.5, 1.0, -1.0)])
        assert roof_oracle(PointCloud(flat)) == "flat"
        peaked = np.column_stack([xy, 1.0 - np.abs(xy[:, 0])])
        assert roof_oracle(PointCloud(peaked)) == "gable"
