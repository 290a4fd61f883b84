"""Synthetic breathing sequences with exact vertex correspondence.

Each subject gets a liver-like closed reference surface, a periodic
deformation (superior-inferior translation, anterior-posterior expansion
and a smooth per-sequence bump field) and rendered coronal slices. The
frame at phase 0 equals the reference exactly, and every frame shares
the reference topology, so per-vertex target displacements are known.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .image import PlaneSpec, SurrogateImage, load_pgm, save_pgm
from .mesh import MeshError, TriMesh, load_obj, save_obj

TAU = 2.0 * math.pi

# default liver-like axis ratios (left-right, anterior-posterior, superior-inferior)
AXIS_RATIOS = (1.0, 0.7, 0.45)


class DataError(ValueError):
    """Raised for invalid generation parameters or broken dataset layouts."""


# ---------------------------------------------------------------------------
# reference surfaces


def _uv_sphere(rings, segments):
    """Closed unit sphere triangulation with rings*segments + 2 vertices."""
    verts = [(0.0, 0.0, 1.0)]
    for i in range(1, rings + 1):
        theta = math.pi * i / (rings + 1)
        for j in range(segments):
            phi = TAU * j / segments
            verts.append(
                (math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta))
            )
    verts.append((0.0, 0.0, -1.0))
    facets = []
    def ring_idx(i, j):
        return 1 + i * segments + (j % segments)
    for j in range(segments):
        facets.append((0, ring_idx(0, j), ring_idx(0, j + 1)))
    for i in range(rings - 1):
        for j in range(segments):
            a, b = ring_idx(i, j), ring_idx(i, j + 1)
            c, d = ring_idx(i + 1, j), ring_idx(i + 1, j + 1)
            facets.append((a, c, d))
            facets.append((a, d, b))
    south = 1 + rings * segments
    for j in range(segments):
        facets.append((south, ring_idx(rings - 1, j + 1), ring_idx(rings - 1, j)))
    return np.array(verts), np.array(facets, dtype=np.int64)


def icosphere(subdivisions):
    """Subdivided icosahedron: 10 * 4^L + 2 vertices, 20 * 4^L facets."""
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
            (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
            (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    facets = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        verts_list = list(verts)
        midpoint = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                m = verts_list[i] + verts_list[j]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(verts_list)
                verts_list.append(m)
            return midpoint[key]

        new_facets = []
        for a, b, c in facets:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_facets += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        verts = np.array(verts_list)
        facets = np.array(new_facets, dtype=np.int64)
    return verts, facets


def make_reference(kind, vertex_budget, rng, base_radius=80.0):
    """Closed, liver-like reference surface with roughly `vertex_budget`
    vertices (at most that many). Units are millimetres."""
    if not 100 <= vertex_budget <= 5000:
        raise DataError(f"vertex_budget {vertex_budget} outside [100, 5000]")
    if kind == "perturbed_icosphere":
        level = 1
        while 10 * 4 ** (level + 1) + 2 <= vertex_budget:
            level += 1
        verts, facets = icosphere(level)
    elif kind == "ellipsoid":
        rings = max(3, int(round(math.sqrt(vertex_budget - 2))))
        segments = max(4, (vertex_budget - 2) // rings)
        verts, facets = _uv_sphere(rings, segments)
    else:
        raise DataError(f"unknown reference kind '{kind}'")
    # smooth low-frequency radial perturbation, then liver-like anisotropy
    freqs = rng.uniform(1.0, 2.5, (3, 3))
    phases = rng.uniform(0.0, TAU, 3)
    amps = rng.uniform(0.03, 0.08, 3)
    radial = np.ones(verts.shape[0])
    for k in range(3):
        radial += amps[k] * np.sin(verts @ freqs[k] + phases[k])
    verts = verts * radial[:, None]
    verts = verts * (base_radius * np.array(AXIS_RATIOS) * rng.uniform(0.9, 1.1, 3))
    return TriMesh(verts, facets)


# ---------------------------------------------------------------------------
# deformation


@dataclass
class DeformParams:
    """Per-sequence deformation; amplitudes are in normalized units
    (fractions of the reference mesh's half-extent)."""

    si_amplitude: float = 0.15
    ap_amplitude: float = 0.05
    phase_drift: float = 0.0
    bump_amplitude: float = 0.02
    bump_freqs: list = field(default_factory=lambda: [[1.5, 0.0, 0.8], [0.0, 1.2, 1.0]])
    bump_phases: list = field(default_factory=lambda: [0.0, 1.0])
    bump_axes: list = field(default_factory=lambda: [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])

    @staticmethod
    def random(rng, si_amplitude=0.15, ap_amplitude=0.05, bump_amplitude=0.02):
        k = 2
        return DeformParams(
            si_amplitude=si_amplitude,
            ap_amplitude=ap_amplitude,
            phase_drift=float(rng.uniform(0.0, 0.4)),
            bump_amplitude=bump_amplitude,
            bump_freqs=rng.uniform(0.5, 2.0, (k, 3)).tolist(),
            bump_phases=rng.uniform(0.0, TAU, k).tolist(),
            bump_axes=rng.normal(0.0, 1.0, (k, 3)).tolist(),
        )


def breathing_amplitude(phase, drift=0.0):
    """A(phase) in [0, 1] with A(0) = 0 and maximum at phase = pi."""
    phase = math.fmod(phase, TAU)
    xi = phase + drift * math.sin(phase)
    return 0.5 * (1.0 - math.cos(xi))


def deform(reference, phase, params):
    """Displace the reference by A(phase) times the sequence's motion field."""
    v = reference.vertices
    center = reference.centroid()
    scale = float(np.abs(v - center).max())
    amp = breathing_amplitude(phase, params.phase_drift)
    disp = np.zeros_like(v)
    disp[:, 2] += params.si_amplitude * scale
    disp[:, 1] += params.ap_amplitude * (v[:, 1] - center[1])
    axes = np.asarray(params.bump_axes, dtype=np.float64)
    if axes.size:
        norms = np.linalg.norm(axes, axis=1, keepdims=True)
        axes = axes / np.where(norms > 0, norms, 1.0)
        freqs = np.asarray(params.bump_freqs, dtype=np.float64)
        phases = np.asarray(params.bump_phases, dtype=np.float64)
        rel = (v - center) / scale
        for k in range(axes.shape[0]):
            wave = np.sin(rel @ freqs[k] + phases[k])
            disp += params.bump_amplitude * scale * wave[:, None] * axes[k]
    return reference.with_vertices(v + amp * disp)


# ---------------------------------------------------------------------------
# slice rendering


def _cross_section_segments(mesh, plane):
    """Intersection of the surface with the plane as (K, 2, 2) segments in
    (row_world, col_world) in-plane coordinates."""
    v = mesh.vertices
    h = v[:, plane.axis] - plane.value
    # nudge on-plane vertices to a consistent side: every straddling facet
    # then yields exactly two chord endpoints and the chords close into loops
    span = float(np.abs(h).max())
    if span == 0.0:
        return np.zeros((0, 2, 2))
    h = np.where(h == 0.0, 1e-12 * span, h)
    tri_h = h[mesh.facets]  # (F, 3)
    segs = []
    ra, ca = plane.row_axis, plane.col_axis
    for f_idx in np.nonzero(~(np.all(tri_h > 0, axis=1) | np.all(tri_h < 0, axis=1)))[0]:
        ids = mesh.facets[f_idx]
        pts = []
        for a, b in ((0, 1), (1, 2), (2, 0)):
            ha, hb = tri_h[f_idx, a], tri_h[f_idx, b]
            if (ha > 0) != (hb > 0):
                t = ha / (ha - hb)
                p = v[ids[a]] + t * (v[ids[b]] - v[ids[a]])
                pts.append((p[ra], p[ca]))
        if len(pts) == 2:
            segs.append((pts[0], pts[1]))
    if not segs:
        return np.zeros((0, 2, 2))
    return np.array(segs)


def _inside_mask(sample_rows, sample_cols, segments):
    """Even-odd crossing test along the +col direction, vectorized."""
    if segments.shape[0] == 0:
        return np.zeros(sample_rows.shape, dtype=bool)
    r0, c0 = segments[:, 0, 0], segments[:, 0, 1]
    r1, c1 = segments[:, 1, 0], segments[:, 1, 1]
    rr = sample_rows[:, None]
    cc = sample_cols[:, None]
    straddle = (r0[None, :] > rr) != (r1[None, :] > rr)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rr - r0[None, :]) / (r1[None, :] - r0[None, :])
        cross_col = c0[None, :] + t * (c1[None, :] - c0[None, :])
    hits = straddle & (cross_col > cc)
    return (hits.sum(axis=1) % 2).astype(bool)


def render_slice(mesh, plane, img_dims, spacing, origin, noise_sigma=0.02, rng=None, supersample=2):
    """Binary inside/outside mask of the mesh's planar cross-section,
    anti-aliased by supersampling, plus Gaussian pixel noise."""
    height, width = img_dims
    segments = _cross_section_segments(mesh, plane)
    rows = origin[0] + spacing[0] * np.arange(height)
    cols = origin[1] + spacing[1] * np.arange(width)
    acc = np.zeros(height * width)
    # jitter keeps sample rows off vertex coordinates (grazing crossings)
    jitter = 1e-7 * spacing[0]
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    for dr in offsets:
        for dc in offsets:
            rr = (rows + dr * spacing[0] + jitter)[:, None].repeat(width, axis=1).ravel()
            cc = (cols + dc * spacing[1])[None, :].repeat(height, axis=0).ravel()
            acc += _inside_mask(rr, cc, segments)
    pixels = (acc / supersample**2).reshape(height, width)
    if noise_sigma > 0.0:
        rng = rng if rng is not None else np.random.default_rng(0)
        pixels = pixels + rng.normal(0.0, noise_sigma, pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0)
    return SurrogateImage(pixels, spacing=tuple(spacing), origin=tuple(origin), plane=plane)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class BreathingSequence:
    reference: TriMesh
    frames: list  # list of (TriMesh, SurrogateImage)
    phases: list
    rng_seed: int
    params: DeformParams = field(default_factory=DeformParams)
    subject: int = 0


def make_sequence(
    subject,
    seed,
    frames_per_subject,
    vertex_budget=300,
    kind="ellipsoid",
    img_dims=(32, 32),
    fov_factor=1.5,
    noise_sigma=0.02,
    si_amplitude=0.15,
    ap_amplitude=0.05,
    bump_amplitude=0.02,
):
    rng = np.random.default_rng(seed)
    reference = make_reference(kind, vertex_budget, rng)
    params = DeformParams.random(
        rng, si_amplitude=si_amplitude, ap_amplitude=ap_amplitude, bump_amplitude=bump_amplitude
    )
    center = reference.centroid()
    scale = float(np.abs(reference.vertices - center).max())
    plane = PlaneSpec(axis=1, value=float(center[1]))
    height, width = img_dims
    fov = 2.0 * fov_factor * scale
    spacing = (fov / height, fov / width)
    origin = (
        float(center[plane.row_axis] - fov / 2.0 + spacing[0] / 2.0),
        float(center[plane.col_axis] - fov / 2.0 + spacing[1] / 2.0),
    )
    phases = [TAU * t / frames_per_subject for t in range(frames_per_subject)]
    frames = []
    for phase in phases:
        frame_mesh = deform(reference, phase, params)
        img = render_slice(
            frame_mesh, plane, img_dims, spacing, origin, noise_sigma=noise_sigma, rng=rng
        )
        frames.append((frame_mesh, img))
    return BreathingSequence(reference, frames, phases, seed, params, subject)


def make_dataset(out_dir, subjects, frames_per_subject, rng_seed, **kwargs):
    """Generate and serialize sequences under out_dir/subject_<k>/."""
    if subjects < 1:
        raise DataError("subjects must be >= 1")
    seed_seq = np.random.SeedSequence(rng_seed)
    child_seeds = [int(s.generate_state(1)[0]) for s in seed_seq.spawn(subjects)]
    sequences = []
    for k in range(subjects):
        seq = make_sequence(k, child_seeds[k], frames_per_subject, **kwargs)
        sequences.append(seq)
        sdir = os.path.join(out_dir, f"subject_{k}")
        os.makedirs(sdir, exist_ok=True)
        save_obj(seq.reference, os.path.join(sdir, "reference.obj"))
        for t, (frame_mesh, img) in enumerate(seq.frames):
            save_obj(frame_mesh, os.path.join(sdir, f"frame_{t}.obj"))
            save_pgm(img, os.path.join(sdir, f"frame_{t}.pgm"))
        meta = {
            "subject": k,
            "seed": seq.rng_seed,
            "phases": seq.phases,
            "plane": seq.frames[0][1].plane.to_dict(),
            "spacing": list(seq.frames[0][1].spacing),
            "origin": list(seq.frames[0][1].origin),
            "img_dims": list(seq.frames[0][1].pixels.shape),
            "params": asdict(seq.params),
        }
        with open(os.path.join(sdir, "meta.json"), "w") as fh:
            json.dump(meta, fh, sort_keys=True, indent=1)
            fh.write("\n")
    return sequences


def load_dataset(root):
    """Read a dataset directory back into BreathingSequence objects."""
    if not os.path.isdir(root):
        raise DataError(f"{root}: not a directory")
    subjects = sorted(
        (d for d in os.listdir(root) if d.startswith("subject_")),
        key=lambda d: int(d.split("_")[1]),
    )
    if not subjects:
        raise DataError(f"{root}: no subject_<k> directories found")
    sequences = []
    for d in subjects:
        sdir = os.path.join(root, d)
        try:
            with open(os.path.join(sdir, "meta.json")) as fh:
                meta = json.load(fh)
            reference = load_obj(os.path.join(sdir, "reference.obj"))
            frames = []
            for t in range(len(meta["phases"])):
                frame_mesh = load_obj(os.path.join(sdir, f"frame_{t}.obj"))
                img = load_pgm(os.path.join(sdir, f"frame_{t}.pgm"))
                frames.append((frame_mesh, img))
        except (OSError, MeshError, KeyError, json.JSONDecodeError) as exc:
            raise DataError(f"{sdir}: broken sequence ({exc})")
        params = DeformParams(**meta["params"])
        sequences.append(
            BreathingSequence(
                reference, frames, meta["phases"], meta["seed"], params, meta["subject"]
            )
        )
    return sequences
