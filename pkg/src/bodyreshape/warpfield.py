"""Dense backward warp fields derived from 3D mesh deformation.

A field stores, for every output pixel, the source coordinate to sample
(backward map), which makes bilinear sampling the primitive and field
inversion a precise statement.  Mesh-backed pixels get their coordinates
from barycentric interpolation of the other mesh's projected vertices;
the rest of the foreground receives a harmonic (Laplace) extension of the
displacement, and everything else stays identity with ``valid=False``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .body_model import BodyMesh, CameraParams
from .errors import InvalidInputError
from .rendering import project, rasterize_barycentric

WARPFIELD_FORMAT_VERSION = 1


@dataclass
class WarpField:
    """Backward sampling map over an image grid.

    ``grid[y, x] = (sx, sy)``: the input-domain coordinate sampled by output
    pixel (x, y).  Invalid pixels carry the identity coordinate.
    """

    grid: np.ndarray  # [H, W, 2] float64, (x, y) source coordinates
    valid: np.ndarray  # [H, W] bool
    foldover: bool = field(default=False, compare=False)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if g.ndim != 3 or g.shape[2] != 2 or v.shape != g.shape[:2]:
            raise InvalidInputError("grid must be [H, W, 2] with matching valid mask")
        if not np.isfinite(g).all():
            raise InvalidInputError("grid coordinates must be finite")
        self.grid = g
        self.valid = v

    @property
    def resolution(self) -> tuple[int, int]:
        return self.grid.shape[:2]


def identity_grid(h: int, w: int) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return np.stack([xs, ys], axis=-1)


def identity_field(h: int, w: int) -> WarpField:
    return WarpField(identity_grid(h, w), np.zeros((h, w), dtype=bool))


@dataclass(frozen=True)
class UnionMask:
    """Dilated OR of source and deformed person masks."""

    a: np.ndarray  # [H, W] uint8

    def __post_init__(self):
        object.__setattr__(self, "a", (np.asarray(self.a) > 0).astype(np.uint8))


def _disk(radius: int) -> np.ndarray:
    if radius <= 0:
        return np.ones((1, 1), dtype=bool)
    ax = np.arange(-radius, radius + 1)
    return (ax[:, None] ** 2 + ax[None, :] ** 2) <= radius**2


def union_mask(src_mask: np.ndarray, dst_mask: np.ndarray, radius: int = 3) -> UnionMask:
    """Pixelwise OR of the two masks, then morphological dilation."""
    s = _as_binary(src_mask)
    d = _as_binary(dst_mask)
    if s.shape != d.shape:
        raise InvalidInputError(f"mask resolutions differ: {s.shape} vs {d.shape}")
    merged = s | d
    return UnionMask(ndi.binary_dilation(merged, structure=_disk(radius)))


def _as_binary(mask) -> np.ndarray:
    arr = getattr(mask, "mask", mask)
    arr = getattr(arr, "a", arr)
    return np.asarray(arr) > 0


# ---------------------------------------------------------------------------
# Field construction from mesh pairs
# ---------------------------------------------------------------------------


def displacement_field(
    mesh_src: BodyMesh,
    mesh_dst: BodyMesh,
    camera: CameraParams,
    resolution: tuple[int, int],
    fg_mask: np.ndarray | None = None,
    direction: str = "src_to_dst",
) -> WarpField:
    """Backward warp field between two same-topology meshes.

    ``src_to_dst`` builds the field whose output lives in the dst domain:
    warping the src image with it produces the deformed (dst) image.  The
    output-domain mesh is rasterized; each covered pixel samples the matching
    barycentric point of the other mesh.  Remaining ``fg_mask`` pixels get a
    harmonic extension of the displacement.
    """
    if mesh_src.vertices.shape != mesh_dst.vertices.shape or not np.array_equal(mesh_src.faces, mesh_dst.faces):
        raise InvalidInputError("meshes must share topology")
    if direction == "src_to_dst":
        mesh_out, mesh_in = mesh_dst, mesh_src
    elif direction == "dst_to_src":
        mesh_out, mesh_in = mesh_src, mesh_dst
    else:
        raise InvalidInputError(f"unknown direction {direction!r}")

    h, w = resolution
    out2d = project(mesh_out.vertices, camera)
    in2d = project(mesh_in.vertices, camera)
    face_idx, bary = rasterize_barycentric(out2d, mesh_out.vertices[:, 2], mesh_out.faces, resolution)
    covered = face_idx >= 0

    grid = identity_grid(h, w)
    if covered.any():
        f = face_idx[covered]
        b = bary[covered]  # [M, 3]
        tri = in2d[mesh_out.faces[f]]  # [M, 3, 2]
        grid[covered] = np.einsum("mc,mcd->md", b, tri)

    valid = covered.copy()
    if fg_mask is not None:
        region = _as_binary(fg_mask)
        if region.shape != (h, w):
            raise InvalidInputError("fg_mask resolution must match the field resolution")
        to_fill = region & ~covered
        if to_fill.any():
            disp = grid - identity_grid(h, w)
            disp = _harmonic_extension(disp, covered, to_fill)
            grid = identity_grid(h, w) + disp
            valid = covered | to_fill
    return WarpField(grid, valid)


def _harmonic_extension(disp: np.ndarray, known: np.ndarray, unknown: np.ndarray) -> np.ndarray:
    """Laplace-extend ``disp`` from ``known`` pixels into ``unknown`` pixels.

    5-point stencil; unknown pixels bordering neither set get zero-flux
    (natural) boundaries.  Solved directly with a sparse factorization, which
    lands at the same harmonic solution Jacobi iteration would approach.
    """
    h, w = known.shape
    idx = -np.ones((h, w), dtype=np.int64)
    ys, xs = np.nonzero(unknown)
    n = len(ys)
    if n == 0:
        return disp
    idx[ys, xs] = np.arange(n)

    rows, cols, vals = [], [], []
    rhs = np.zeros((n, 2))
    for k, (y, x) in enumerate(zip(ys, xs)):
        deg = 0
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            yy, xx = y + dy, x + dx
            if not (0 <= yy < h and 0 <= xx < w):
                continue
            if unknown[yy, xx]:
                rows.append(k)
                cols.append(idx[yy, xx])
                vals.append(-1.0)
                deg += 1
            elif known[yy, xx]:
                rhs[k] += disp[yy, xx]
                deg += 1
        rows.append(k)
        cols.append(k)
        vals.append(float(max(deg, 1)))
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    out = disp.copy()
    solution = spla.spsolve(mat, rhs)
    out[ys, xs] = solution.reshape(n, 2)
    return out


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------


def _bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Edge-clamped bilinear sampling; image is [H, W] or [H, W, C]."""
    h, w = image.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = (1.0 - fx) * image[y0, x0] + fx * image[y0, x1]
    bot = (1.0 - fx) * image[y1, x0] + fx * image[y1, x1]
    return (1.0 - fy) * top + fy * bot


def apply_warp_image(image: np.ndarray, warp: WarpField) -> np.ndarray:
    """Backward-warp an image: out[p] = image[grid[p]] with edge clamping."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] != warp.resolution:
        raise InvalidInputError(f"image resolution {img.shape[:2]} != field resolution {warp.resolution}")
    return _bilinear_sample(img, warp.grid[..., 0], warp.grid[..., 1])


def downsample_grid(warp: WarpField, h: int, w: int) -> np.ndarray:
    """Average the grid over cells and rescale coordinates to the (h, w) raster."""
    height, width = warp.resolution
    if height % h != 0 or width % w != 0:
        raise InvalidInputError(f"feature resolution ({h}, {w}) must divide field resolution {warp.resolution}")
    sy, sx = height // h, width // w
    g = warp.grid.reshape(h, sy, w, sx, 2).mean(axis=(1, 3))
    out = np.empty_like(g)
    # Pixel-center alignment: coordinate c_full maps to (c_full + 0.5) * s - 0.5.
    out[..., 0] = (g[..., 0] + 0.5) * (w / width) - 0.5
    out[..., 1] = (g[..., 1] + 0.5) * (h / height) - 0.5
    return out


def apply_warp_features(features: np.ndarray, warp: WarpField) -> np.ndarray:
    """Warp a lower-resolution feature map with a downsampled copy of the field."""
    feats = np.asarray(features, dtype=np.float64)
    h, w = feats.shape[:2]
    grid = downsample_grid(warp, h, w)
    return _bilinear_sample(feats, grid[..., 0], grid[..., 1])


def invert_field(warp: WarpField, iterations: int = 25, tolerance: float = 0.5) -> WarpField:
    """Fixed-point inversion of a backward field.

    Composing a warp with its inverse reproduces the input on doubly-valid
    pixels; mesh-backed fields are better built directly in the opposite
    direction, this generic path covers everything else.  Non-injective
    regions set the ``foldover`` flag instead of failing.
    """
    h, w = warp.resolution
    ident = identity_grid(h, w)
    disp = warp.grid - ident

    inv = ident.copy()
    for _ in range(iterations):
        dx = _bilinear_sample(disp, inv[..., 0], inv[..., 1])
        inv = ident - dx
    # residual of F(G(q)) vs q
    fg = _bilinear_sample(warp.grid, inv[..., 0], inv[..., 1])
    residual = np.linalg.norm(fg - ident, axis=-1)

    src_valid = _bilinear_sample(warp.valid.astype(np.float64), inv[..., 0], inv[..., 1]) > 0.5
    ok = residual <= tolerance
    valid = src_valid & ok
    grid = np.where(valid[..., None], inv, ident)
    foldover = bool((src_valid & ~ok).mean() > 0.02)
    return WarpField(grid, valid, foldover=foldover)


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def save_field(warp: WarpField, path: str | Path) -> None:
    """Raw little-endian float32 grid plus a JSON sidecar."""
    path = Path(path)
    h, w = warp.resolution
    path.write_bytes(warp.grid.astype("<f4").tobytes())
    sidecar = {
        "height": h,
        "width": w,
        "semantics": "backward",
        "version": WARPFIELD_FORMAT_VERSION,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))
    np.save(str(path) + ".valid.npy", np.packbits(warp.valid))


def load_field(path: str | Path) -> WarpField:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if meta.get("semantics") != "backward" or meta.get("version") != WARPFIELD_FORMAT_VERSION:
        raise InvalidInputError(f"unsupported warp-field file: {meta}")
    h, w = meta["height"], meta["width"]
    grid = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(h, w, 2).astype(np.float64)
    valid_path = Path(str(path) + ".valid.npy")
    if valid_path.exists():
        valid = np.unpackbits(np.load(valid_path))[: h * w].reshape(h, w).astype(bool)
    else:
        valid = np.ones((h, w), dtype=bool)
    return WarpField(grid, valid)
