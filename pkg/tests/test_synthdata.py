import math

import numpy as np
import pytest

from meshflow import synthdata as sd
from meshflow.image import PlaneSpec
from meshflow.mesh import TriMesh, signed_vertex_distance
from meshflow.synthdata import DataError, DeformParams


class TestPrimitives:
    @pytest.mark.parametrize("rings,segments", [(3, 6), (10, 12), (39, 40)])
    def test_uv_sphere_is_closed_with_euler_counts(self, rings, segments):
        v, f = sd._uv_sphere(rings, segments)
        mesh = TriMesh(v, f)
        assert mesh.num_vertices == rings * segments + 2
        assert mesh.num_facets == 2 * mesh.num_vertices - 4  # Euler: F = 2V - 4
        assert mesh.is_closed()
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, rtol=1e-12)

    @pytest.mark.parametrize("level", [0, 1, 2])
    def test_icosphere_counts(self, level):
        v, f = sd.icosphere(level)
        assert v.shape[0] == 10 * 4**level + 2
        assert f.shape[0] == 20 * 4**level
        assert TriMesh(v, f).is_closed()
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, rtol=1e-12)

    def test_uv_sphere_1562_vertices(self):
        v, f = sd._uv_sphere(39, 40)
        assert v.shape[0] == 1562


class TestMakeReference:
    @pytest.mark.parametrize("kind", ["ellipsoid", "perturbed_icosphere"])
    def test_closed_and_within_budget(self, kind):
        mesh = sd.make_reference(kind, 500, np.random.default_rng(0))
        assert mesh.num_vertices <= 500
        assert mesh.num_vertices >= 100
        assert mesh.is_closed()

    def test_budget_bounds_enforced(self):
        rng = np.random.default_rng(0)
        with pytest.raises(DataError, match="vertex_budget"):
            sd.make_reference("ellipsoid", 99, rng)
        with pytest.raises(DataError, match="vertex_budget"):
            sd.make_reference("ellipsoid", 5001, rng)

    def test_unknown_kind_rejected(self):
        with pytest.raises(DataError, match="kind"):
            sd.make_reference("torus", 300, np.random.default_rng(0))

    def test_millimetre_scale(self):
        mesh = sd.make_reference("ellipsoid", 300, np.random.default_rng(1))
        extent = np.abs(mesh.vertices - mesh.centroid()).max()
        assert 50.0 < extent < 120.0  # liver-like half-extent in mm

    def test_seed_determinism(self):
        a = sd.make_reference("ellipsoid", 300, np.random.default_rng(2))
        b = sd.make_reference("ellipsoid", 300, np.random.default_rng(2))
        np.testing.assert_array_equal(a.vertices, b.vertices)


class TestBreathingAmplitude:
    def test_zero_at_phase_zero(self):
        assert sd.breathing_amplitude(0.0) == 0.0
        assert sd.breathing_amplitude(0.0, drift=0.3) == 0.0

    def test_maximum_at_pi_without_drift(self):
        assert sd.breathing_amplitude(math.pi) == pytest.approx(1.0)
        grid = np.linspace(0.0, sd.TAU, 1001)
        vals = [sd.breathing_amplitude(p) for p in grid]
        assert max(vals) <= 1.0 + 1e-12 and min(vals) >= 0.0

    def test_periodic_bitwise(self):
        for drift in (0.0, 0.2):
            for phase in (0.3, 1.7, 4.0):
                assert sd.breathing_amplitude(phase + sd.TAU, drift) == pytest.approx(
                    sd.breathing_amplitude(phase, drift), abs=1e-12
                )

    def test_expected_cosine_values(self):
        # A(phi) = 0.5 (1 - cos(phi)) without drift
        for phi in (0.5, 1.0, 2.0):
            assert sd.breathing_amplitude(phi) == pytest.approx(0.5 * (1 - math.cos(phi)))


class TestDeform:
    def reference(self):
        return sd.make_reference("ellipsoid", 300, np.random.default_rng(3))

    def test_phase_zero_is_identity(self):
        ref = self.reference()
        out = sd.deform(ref, 0.0, DeformParams.random(np.random.default_rng(4)))
        np.testing.assert_array_equal(out.vertices, ref.vertices)

    def test_topology_preserved(self):
        ref = self.reference()
        out = sd.deform(ref, 1.3, DeformParams.random(np.random.default_rng(5)))
        np.testing.assert_array_equal(out.facets, ref.facets)
        assert out.num_vertices == ref.num_vertices

    def test_si_translation_amplitude(self):
        ref = self.reference()
        params = DeformParams(si_amplitude=0.15, ap_amplitude=0.0, bump_amplitude=0.0)
        scale = float(np.abs(ref.vertices - ref.centroid()).max())
        out = sd.deform(ref, math.pi, params)  # A(pi) = 1
        shift = out.vertices - ref.vertices
        np.testing.assert_allclose(shift[:, 2], 0.15 * scale, rtol=1e-12)
        np.testing.assert_allclose(shift[:, :2], 0.0, atol=1e-12)

    def test_ap_expansion_is_outward(self):
        ref = self.reference()
        params = DeformParams(si_amplitude=0.0, ap_amplitude=0.05, bump_amplitude=0.0)
        out = sd.deform(ref, math.pi, params)
        rel = ref.vertices[:, 1] - ref.centroid()[1]
        shift = out.vertices[:, 1] - ref.vertices[:, 1]
        np.testing.assert_allclose(shift, 0.05 * rel, rtol=1e-12)

    def test_amplitude_scales_with_breathing(self):
        ref = self.reference()
        params = DeformParams.random(np.random.default_rng(6))
        d1 = sd.deform(ref, 0.7, params).vertices - ref.vertices
        a1 = sd.breathing_amplitude(0.7, params.phase_drift)
        a2 = sd.breathing_amplitude(1.9, params.phase_drift)
        d2 = sd.deform(ref, 1.9, params).vertices - ref.vertices
        np.testing.assert_allclose(d2, d1 * (a2 / a1), rtol=1e-10)

    def test_deformed_mesh_stays_closed_and_uninverted(self):
        ref = self.reference()
        params = DeformParams.random(np.random.default_rng(7))
        out = sd.deform(ref, math.pi, params)
        assert out.is_closed()
        # no flipped facets: outward normals still point away from centroid
        tri = out.triangles()
        normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        outward = ((tri.mean(axis=1) - out.centroid()) * normals).sum(axis=1)
        assert np.all(outward > 0.0)


class TestRenderSlice:
    def test_sphere_section_matches_disc(self):
        # analytic circle: sphere radius 10 sliced through its center
        v, f = sd.icosphere(3)
        mesh = TriMesh(v * 10.0, f)
        plane = PlaneSpec(axis=1, value=0.0)
        img = sd.render_slice(
            mesh, plane, (64, 64), (0.5, 0.5), (-16.0, -16.0), noise_sigma=0.0
        )
        rows = -16.0 + 0.5 * np.arange(64)
        rr, cc = np.meshgrid(rows, rows, indexing="ij")
        inside = (rr**2 + cc**2) < (10.0 - 0.3) ** 2
        outside = (rr**2 + cc**2) > (10.0 + 0.3) ** 2
        assert np.all(img.pixels[inside] > 0.5)
        assert np.all(img.pixels[outside] < 0.5)
        # area of the disc, within a few percent (icosphere is slightly smaller)
        got_area = img.pixels.sum() * 0.5 * 0.5
        assert got_area == pytest.approx(math.pi * 100.0, rel=0.05)

    def test_plane_missing_mesh_is_blank(self):
        v, f = sd.icosphere(1)
        mesh = TriMesh(v, f)
        img = sd.render_slice(
            mesh, PlaneSpec(axis=1, value=50.0), (16, 16), (1.0, 1.0), (-8.0, -8.0),
            noise_sigma=0.0,
        )
        np.testing.assert_array_equal(img.pixels, 0.0)

    def test_noise_respects_bounds_and_seed(self):
        v, f = sd.icosphere(2)
        mesh = TriMesh(v * 10.0, f)
        plane = PlaneSpec(axis=1, value=0.0)
        args = (mesh, plane, (32, 32), (1.0, 1.0), (-16.0, -16.0))
        a = sd.render_slice(*args, noise_sigma=0.05, rng=np.random.default_rng(8))
        b = sd.render_slice(*args, noise_sigma=0.05, rng=np.random.default_rng(8))
        np.testing.assert_array_equal(a.pixels, b.pixels)
        assert a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0

    def test_metadata_passed_through(self):
        v, f = sd.icosphere(1)
        img = sd.render_slice(
            TriMesh(v, f), PlaneSpec(axis=1, value=0.0), (8, 10), (0.25, 0.5), (-1.0, -2.5),
            noise_sigma=0.0,
        )
        assert img.pixels.shape == (8, 10)
        assert img.spacing == (0.25, 0.5)
        assert img.origin == (-1.0, -2.5)


class TestSequencesAndDatasets:
    def test_sequence_structure(self):
        seq = sd.make_sequence(0, 123, 8, vertex_budget=150, img_dims=(24, 24))
        assert len(seq.frames) == 8
        assert seq.phases[0] == 0.0
        np.testing.assert_array_equal(seq.frames[0][0].vertices, seq.reference.vertices)
        for mesh, img in seq.frames:
            np.testing.assert_array_equal(mesh.facets, seq.reference.facets)
            assert img.pixels.shape == (24, 24)

    def test_slice_agrees_with_frame_geometry(self):
        # bright pixels sit near/inside the surface, not far outside
        seq = sd.make_sequence(0, 9, 4, vertex_budget=300, img_dims=(48, 48), noise_sigma=0.0)
        mesh, img = seq.frames[2]
        plane = img.plane
        ys = img.origin[0] + img.spacing[0] * np.arange(48)
        xs = img.origin[1] + img.spacing[1] * np.arange(48)
        rr, cc = np.meshgrid(ys, xs, indexing="ij")
        bright = img.pixels > 0.9
        pts = np.zeros((bright.sum(), 3))
        pts[:, plane.axis] = plane.value
        pts[:, plane.row_axis] = rr[bright]
        pts[:, plane.col_axis] = cc[bright]
        signed = signed_vertex_distance(pts, mesh)
        # interior points have negative signed distance; allow a one-pixel rim
        assert np.quantile(signed, 0.99) <= max(img.spacing)

    def test_dataset_layout_and_round_trip(self, tmp_path):
        out = tmp_path / "data"
        seqs = sd.make_dataset(str(out), 2, 3, rng_seed=0, vertex_budget=120, img_dims=(16, 16))
        for k in range(2):
            sdir = out / f"subject_{k}"
            assert (sdir / "reference.obj").exists()
            assert (sdir / "meta.json").exists()
            for t in range(3):
                assert (sdir / f"frame_{t}.obj").exists()
                assert (sdir / f"frame_{t}.pgm").exists()
                assert (sdir / f"frame_{t}.pgm.json").exists()
        loaded = sd.load_dataset(str(out))
        assert len(loaded) == 2
        for orig, back in zip(seqs, loaded):
            assert back.subject == orig.subject
            assert back.phases == orig.phases
            # OBJ round-trip is exact at %.17g precision
            np.testing.assert_array_equal(back.reference.vertices, orig.reference.vertices)
            np.testing.assert_array_equal(back.frames[1][0].facets, orig.frames[1][0].facets)
            # PGM quantization: within half a 16-bit step
            np.testing.assert_allclose(
                back.frames[1][1].pixels, orig.frames[1][1].pixels, atol=0.5 / 65535 + 1e-12
            )

    def test_dataset_generation_is_deterministic(self, tmp_path):
        kw = dict(vertex_budget=120, img_dims=(12, 12))
        sd.make_dataset(str(tmp_path / "a"), 2, 2, rng_seed=7, **kw)
        sd.make_dataset(str(tmp_path / "b"), 2, 2, rng_seed=7, **kw)
        for rel in [
            "subject_0/reference.obj", "subject_0/frame_1.obj", "subject_0/frame_1.pgm",
            "subject_0/meta.json", "subject_1/frame_0.pgm", "subject_1/meta.json",
        ]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_subjects_differ(self, tmp_path):
        seqs = sd.make_dataset(str(tmp_path / "d"), 2, 2, rng_seed=1, vertex_budget=120)
        a, b = seqs[0].reference.vertices, seqs[1].reference.vertices
        assert a.shape != b.shape or not np.allclose(a, b)

    def test_bad_root_rejected(self, tmp_path):
        with pytest.raises(DataError, match="not a directory"):
            sd.load_dataset(str(tmp_path / "missing"))
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(DataError, match="subject_"):
            sd.load_dataset(str(empty))

    def test_broken_sequence_rejected(self, tmp_path):
        out = tmp_path / "data"
        sd.make_dataset(str(out), 1, 2, rng_seed=2, vertex_budget=120, img_dims=(12, 12))
        (out / "subject_0" / "frame_1.obj").unlink()
        with pytest.raises(DataError, match="broken sequence"):
            sd.load_dataset(str(out))
