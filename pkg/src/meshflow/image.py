"""Surrogate 2-D slice images and the convolutional feature extractor.

Two conditioning schemes are provided: a global latent vector of width 128
broadcast to every vertex, and per-vertex pooling of 3x3 neighborhoods
from shape-preserving feature maps at each vertex's projected pixel.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ImageError(ValueError):
    """Raised for malformed image files or extractor misuse."""


@dataclass(frozen=True)
class PlaneSpec:
    """Axis-aligned slicing plane: world coordinate `value` along `axis`.

    The image's row axis is the first remaining world axis, the column
    axis the second (ascending order), so e.g. a coronal plane with
    axis=1 (anterior-posterior) has rows along x and columns along z.
    """

    axis: int = 1
    value: float = 0.0

    def __post_init__(self):
        if self.axis not in (0, 1, 2):
            raise ImageError(f"plane axis must be 0, 1, or 2, got {self.axis}")

    @property
    def row_axis(self):
        return [a for a in (0, 1, 2) if a != self.axis][0]

    @property
    def col_axis(self):
        return [a for a in (0, 1, 2) if a != self.axis][1]

    def to_dict(self):
        return {"axis": self.axis, "value": self.value}

    @staticmethod
    def from_dict(d):
        return PlaneSpec(axis=int(d["axis"]), value=float(d["value"]))


@dataclass
class SurrogateImage:
    """2-D scalar grid standing in for a live coronal cine-MR slice."""

    pixels: np.ndarray  # (H, W), values in [0, 1]
    spacing: tuple = (1.0, 1.0)  # mm per pixel along (row, col)
    origin: tuple = (0.0, 0.0)  # world (row, col) coordinate of pixel (0, 0)
    plane: PlaneSpec = field(default_factory=PlaneSpec)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ImageError(f"pixels must be 2-D, got shape {self.pixels.shape}")
        if self.spacing[0] <= 0 or self.spacing[1] <= 0:
            raise ImageError(f"spacing must be positive, got {self.spacing}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


# ---------------------------------------------------------------------------
# file formats: PGM (P5, 8/16-bit) and raw float64 with a JSON sidecar


def _sidecar_path(path):
    return str(path) + ".json"


def _write_sidecar(img, path):
    meta = {
        "width": img.width,
        "height": img.height,
        "spacing": list(img.spacing),
        "origin": list(img.origin),
        "plane": img.plane.to_dict(),
    }
    with open(_sidecar_path(path), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _read_sidecar(path):
    try:
        with open(_sidecar_path(path), "r") as fh:
            return json.load(fh)
    except FileNotFoundError:
        return None


def save_pgm(img, path, bits=16):
    if bits not in (8, 16):
        raise ImageError(f"PGM depth must be 8 or 16 bits, got {bits}")
    maxval = (1 << bits) - 1
    quant = np.clip(np.rint(img.pixels * maxval), 0, maxval)
    data = quant.astype(">u2" if bits == 16 else "u1").tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii"))
        fh.write(data)
    _write_sidecar(img, path)


def load_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not m:
        raise ImageError(f"{path}: not a binary PGM (P5) file")
    width, height, maxval = (int(m.group(i)) for i in (1, 2, 3))
    if maxval not in (255, 65535):
        raise ImageError(f"{path}: unsupported PGM maxval {maxval}")
    dtype = ">u2" if maxval == 65535 else "u1"
    raw = blob[m.end():]
    count = width * height
    if len(raw) < count * np.dtype(dtype).itemsize:
        raise ImageError(f"{path}: truncated pixel data")
    pix = np.frombuffer(raw, dtype=dtype, count=count)
    pixels = pix.astype(np.float64).reshape(height, width) / maxval
    return _with_meta(pixels, path)


def save_raw(img, path):
    """Raw little-endian float64 pixels, row-major, with a JSON sidecar."""
    with open(path, "wb") as fh:
        fh.write(img.pixels.astype("<f8").tobytes())
    _write_sidecar(img, path)


def load_raw(path):
    meta = _read_sidecar(path)
    if meta is None:
        raise ImageError(f"{path}: raw images require a JSON sidecar for dimensions")
    with open(path, "rb") as fh:
        pix = np.frombuffer(fh.read(), dtype="<f8")
    h, w = int(meta["height"]), int(meta["width"])
    if pix.size != h * w:
        raise ImageError(f"{path}: expected {h * w} float64 pixels, found {pix.size}")
    return _with_meta(pix.reshape(h, w).astype(np.float64), path, meta)


def _with_meta(pixels, path, meta=None):
    meta = meta if meta is not None else _read_sidecar(path)
    if meta is None:
        return SurrogateImage(pixels)
    return SurrogateImage(
        pixels,
        spacing=tuple(meta["spacing"]),
        origin=tuple(meta["origin"]),
        plane=PlaneSpec.from_dict(meta["plane"]),
    )


# ---------------------------------------------------------------------------
# residual convolutional extractor

GLOBAL_LATENT_WIDTH = 128


class ConvExtractor:
    """Small residual conv stack with two structural roles.

    In "preserving" mode every convolution is 3x3 with unit zero padding,
    so feature maps keep the input's spatial shape and 3x3 neighborhoods
    can be pooled per vertex. In "global" mode the same stack feeds a
    2x2 quadrant average pool and two linear layers producing a latent
    of width 128.
    """

    def __init__(self, mode="preserving", map_count=16, blocks=3, leaky_slope=0.2, rng=None):
        if mode not in ("preserving", "global"):
            raise ImageError(f"unknown extractor mode '{mode}'")
        self.mode = mode
        self.map_count = map_count
        self.blocks = blocks
        self.leaky_slope = leaky_slope
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {}
        c = map_count
        self._add("stem_w", rng.normal(0.0, np.sqrt(2.0 / 9.0), (c, 1, 3, 3)))
        self._add("stem_b", np.zeros(c))
        for i in range(blocks):
            std = np.sqrt(2.0 / (9.0 * c))
            self._add(f"block{i}_w1", rng.normal(0.0, std, (c, c, 3, 3)))
            self._add(f"block{i}_b1", np.zeros(c))
            self._add(f"block{i}_w2", rng.normal(0.0, std, (c, c, 3, 3)))
            self._add(f"block{i}_b2", np.zeros(c))
        if mode == "global":
            pooled = 4 * c
            self._add("fc1_w", rng.normal(0.0, np.sqrt(2.0 / pooled), (pooled, GLOBAL_LATENT_WIDTH)))
            self._add("fc1_b", np.zeros(GLOBAL_LATENT_WIDTH))
            self._add(
                "fc2_w",
                rng.normal(0.0, np.sqrt(2.0 / GLOBAL_LATENT_WIDTH), (GLOBAL_LATENT_WIDTH, GLOBAL_LATENT_WIDTH)),
            )
            self._add("fc2_b", np.zeros(GLOBAL_LATENT_WIDTH))

    def _add(self, name, values):
        self.params[name] = Tensor(values, requires_grad=True)

    @property
    def feature_width(self):
        """Per-vertex feature width contributed by this extractor."""
        if self.mode == "global":
            return GLOBAL_LATENT_WIDTH
        return 9 * self.map_count

    def feature_maps(self, img):
        """Run the conv stack; returns a (map_count, H, W) tensor."""
        if img.height < 3 or img.width < 3:
            raise ImageError(f"image {img.height}x{img.width} smaller than a 3x3 kernel")
        p = self.params
        x = Tensor(img.pixels[None, :, :])
        h = ad.leaky_relu(ad.conv2d(x, p["stem_w"], p["stem_b"], padding=1), self.leaky_slope)
        for i in range(self.blocks):
            y = ad.leaky_relu(
                ad.conv2d(h, p[f"block{i}_w1"], p[f"block{i}_b1"], padding=1), self.leaky_slope
            )
            y = ad.conv2d(y, p[f"block{i}_w2"], p[f"block{i}_b2"], padding=1)
            h = ad.leaky_relu(h + y, self.leaky_slope)
        return h


def extract_global(img, net):
    """Latent 128-vector summarizing the whole slice (no feature pooling)."""
    if net.mode != "global":
        raise ImageError(f"extract_global requires a global-mode extractor, got '{net.mode}'")
    maps = net.feature_maps(img)  # (C, H, W)
    _, h, w = maps.shape
    hm, wm = h // 2, w // 2
    quadrants = [
        maps[:, :hm, :wm],
        maps[:, :hm, wm:],
        maps[:, hm:, :wm],
        maps[:, hm:, wm:],
    ]
    pooled = ad.concat([ad.mean(ad.reshape(q, (net.map_count, -1)), axis=1) for q in quadrants])
    p = net.params
    z = ad.leaky_relu(ad.matmul(pooled, p["fc1_w"]) + p["fc1_b"], net.leaky_slope)
    return ad.matmul(z, p["fc2_w"]) + p["fc2_b"]


def vertex_pixel_index(vertices, img, transform):
    """Map normalized-frame vertices to (row, col) pixel indices.

    The world-frame vertex is projected orthogonally onto the slicing
    plane, converted via origin/spacing, rounded to the nearest pixel and
    clamped to [1, dim-2] so a full 3x3 neighborhood always exists.
    """
    world = transform.invert(np.atleast_2d(vertices))
    plane = img.plane
    r = (world[:, plane.row_axis] - img.origin[0]) / img.spacing[0]
    c = (world[:, plane.col_axis] - img.origin[1]) / img.spacing[1]
    rows = np.clip(np.rint(r).astype(np.int64), 1, img.height - 2)
    cols = np.clip(np.rint(c).astype(np.int64), 1, img.width - 2)
    return np.stack([rows, cols], axis=1)


def pool_features(vertices, img, net, transform):
    """Per-vertex 3x3 neighborhoods from every feature map.

    Returns an (N, 9 * map_count) tensor: for each vertex, the flattened
    3x3 patch centered at its projected pixel, map by map. Gradients flow
    back into the extractor weights.
    """
    if net.mode != "preserving":
        raise ImageError(f"pool_features requires a preserving-mode extractor, got '{net.mode}'")
    maps = net.feature_maps(img)  # (C, H, W)
    c, h, w = maps.shape
    idx = vertex_pixel_index(vertices, img, transform)  # (N, 2)
    n = idx.shape[0]
    dr, dc = np.meshgrid([-1, 0, 1], [-1, 0, 1], indexing="ij")
    offsets = (dr.ravel() * w + dc.ravel())  # (9,)
    centers = idx[:, 0] * w + idx[:, 1]  # (N,)
    patch = centers[:, None] + offsets[None, :]  # (N, 9)
    flat_idx = (np.arange(c)[None, :, None] * (h * w) + patch[:, None, :]).reshape(-1)
    flat = ad.reshape(maps, (-1,))
    feats = flat[flat_idx]
    return ad.reshape(feats, (n, 9 * c))
