"""Camera projection and mesh rasterization.

Two rasterizers live here with different jobs:

* ``rasterize_barycentric`` — exact scanline rasterization with a depth
  buffer.  Returns per-pixel face indices and barycentric coordinates; used
  to build warp fields and hard silhouettes.  Pure numpy, no gradients.
* ``soft_silhouette`` — differentiable coverage map for silhouette-based
  shape optimization.  Per-face signed distance pushed through a sigmoid
  with ~1 px bandwidth, aggregated with a per-pixel max.  Torch, gradients
  flow to the 2D vertex positions.

Convention: pixel centers sit at integer coordinates (x, y) with x along
width and y along height.  The orthographic camera looks along -Z, so the
front-most triangle at a pixel is the one with the largest depth.
"""

from __future__ import annotations

import numpy as np
import torch

from .body_model import CameraParams
from .errors import InvalidInputError


def project(points3d: np.ndarray, camera: CameraParams) -> np.ndarray:
    """Weak-perspective projection: (x, y) = scale * (X, Y) + translation."""
    pts = np.asarray(points3d, dtype=np.float64)
    return camera.scale * pts[..., :2] + np.asarray(camera.translation)


def project_torch(points3d: torch.Tensor, scale: torch.Tensor, translation: torch.Tensor) -> torch.Tensor:
    """Differentiable twin of :func:`project` (scale/translation may require grad)."""
    return scale * points3d[..., :2] + translation


def rasterize_barycentric(
    verts2d: np.ndarray,
    depths: np.ndarray,
    faces: np.ndarray,
    resolution: tuple[int, int],
) -> tuple[np.ndarray, np.ndarray]:
    """Exact rasterization with z-buffering.

    Returns ``(face_index [H,W] int32, bary [H,W,3] float64)`` where
    face_index is -1 on uncovered pixels.
    """
    h, w = resolution
    face_index = np.full((h, w), -1, dtype=np.int32)
    zbuf = np.full((h, w), -np.inf)
    bary_out = np.zeros((h, w, 3))

    v2 = np.asarray(verts2d, dtype=np.float64)
    z = np.asarray(depths, dtype=np.float64)

    for fi, f in enumerate(faces):
        tri = v2[f]  # [3, 2]
        x0 = max(int(np.floor(tri[:, 0].min())), 0)
        x1 = min(int(np.ceil(tri[:, 0].max())) + 1, w)
        y0 = max(int(np.floor(tri[:, 1].min())), 0)
        y1 = min(int(np.ceil(tri[:, 1].max())) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        area = _edge(tri[0], tri[1], tri[2])
        if abs(area) < 1e-12:
            continue
        xs, ys = np.meshgrid(np.arange(x0, x1, dtype=np.float64), np.arange(y0, y1, dtype=np.float64))
        p = np.stack([xs, ys], axis=-1)
        w0 = _edge(tri[1], tri[2], p) / area
        w1 = _edge(tri[2], tri[0], p) / area
        w2 = _edge(tri[0], tri[1], p) / area
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not inside.any():
            continue
        depth = w0 * z[f[0]] + w1 * z[f[1]] + w2 * z[f[2]]
        win = (slice(y0, y1), slice(x0, x1))
        better = inside & (depth > zbuf[win])
        zbuf[win][better] = depth[better]
        face_index[win][better] = fi
        for c, wc in enumerate((w0, w1, w2)):
            bary_out[win + (c,)][better] = wc[better]
    return face_index, bary_out


def _edge(a, b, c):
    """Signed parallelogram area of (b - a) x (c - a); c may be an array of points."""
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])


def hard_silhouette(
    verts2d: np.ndarray, depths: np.ndarray, faces: np.ndarray, resolution: tuple[int, int]
) -> np.ndarray:
    """Binary coverage mask via exact rasterization."""
    face_index, _ = rasterize_barycentric(verts2d, depths, faces, resolution)
    return (face_index >= 0).astype(np.float64)


_adjacency_cache: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}


def _edge_adjacency(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Undirected edges [E,2] and their adjacent faces [E,2] (-1 when open)."""
    key = faces.tobytes()
    hit = _adjacency_cache.get(key)
    if hit is not None:
        return hit
    edge_map: dict[tuple[int, int], list[int]] = {}
    for fi, f in enumerate(faces):
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            k = (int(min(a, b)), int(max(a, b)))
            edge_map.setdefault(k, []).append(fi)
    edges = np.array(list(edge_map.keys()), dtype=np.int64)
    adj = np.full((len(edges), 2), -1, dtype=np.int64)
    for i, k in enumerate(edge_map):
        fs = edge_map[k]
        adj[i, : min(len(fs), 2)] = fs[:2]
    _adjacency_cache[key] = (edges, adj)
    return edges, adj


def soft_silhouette(
    verts2d: torch.Tensor,
    faces: np.ndarray,
    resolution: tuple[int, int],
    bandwidth: float = 0.6,
) -> torch.Tensor:
    """Differentiable soft coverage map in [0, 1].

    Coverage is sigmoid(signed_distance / bandwidth) where the distance is
    measured to the projected silhouette boundary: the set of edges whose two
    adjacent faces flip orientation under projection (plus open edges).  The
    sign comes from an exact point-in-triangle test, so thresholding at 0.5
    reproduces hard rasterization; gradients flow to the boundary vertices.
    """
    h, w = resolution
    if verts2d.ndim != 2 or verts2d.shape[1] != 2:
        raise InvalidInputError("verts2d must be [V, 2]")
    dtype = verts2d.dtype
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    faces_t = torch.from_numpy(faces)
    tri = verts2d[faces_t]  # [F, 3, 2]
    far = torch.as_tensor(1e6, dtype=dtype)

    with torch.no_grad():
        area = _edge_t(tri[:, 0], tri[:, 1], tri[:, 2])
        orient = torch.sign(area).numpy()
        edges, adj = _edge_adjacency(faces)
        o0 = np.where(adj[:, 0] >= 0, orient[adj[:, 0]], 0.0)
        o1 = np.where(adj[:, 1] >= 0, orient[adj[:, 1]], 0.0)
        sil = (adj[:, 1] < 0) | (o0 * o1 <= 0)
        sil_edges = edges[sil]

    count = _cover_count(tri, resolution)
    inside = count > 0.5

    with torch.no_grad():
        # Drop candidate edges buried inside other geometry: a true boundary
        # edge has an uncovered pixel on one side of its midpoint.
        if len(sil_edges):
            pa = verts2d[torch.from_numpy(sil_edges[:, 0])]
            pb = verts2d[torch.from_numpy(sil_edges[:, 1])]
            mid = (pa + pb) / 2.0
            seg = pb - pa
            nrm = torch.stack([-seg[:, 1], seg[:, 0]], dim=-1)
            nrm = nrm / (torch.linalg.norm(nrm, dim=-1, keepdim=True) + 1e-12)
            keep = torch.zeros(len(sil_edges), dtype=torch.bool)
            for side in (1.8, -1.8):
                q = mid + side * nrm
                qx = q[:, 0].round().long().clamp(0, w - 1)
                qy = q[:, 1].round().long().clamp(0, h - 1)
                keep |= count[qy, qx] < 0.5
            sil_edges = sil_edges[keep.numpy()]

    if len(sil_edges) == 0:
        return torch.sigmoid(torch.where(inside, far, -far) / bandwidth)

    a = verts2d[torch.from_numpy(sil_edges[:, 0])]  # [E, 2]
    b = verts2d[torch.from_numpy(sil_edges[:, 1])]

    with torch.no_grad():
        lo = torch.minimum(a, b)
        hi = torch.maximum(a, b)
        extent = (hi - lo).max().item()
        band = float(np.ceil(bandwidth * 8 + 2))
        win = int(min(max(np.ceil(extent) + 2 * band, 4), max(h, w)))
        origin = torch.floor(lo - band).to(torch.int64)
        origin[:, 0] = origin[:, 0].clamp(0, max(w - win, 0))
        origin[:, 1] = origin[:, 1].clamp(0, max(h - win, 0))

    ax = torch.arange(win, dtype=dtype)
    gy, gx = torch.meshgrid(ax, ax, indexing="ij")
    p = torch.stack(
        [origin[:, None, None, 0].to(dtype) + gx, origin[:, None, None, 1].to(dtype) + gy], dim=-1
    )  # [E, win, win, 2]

    ab = (b - a)[:, None, None, :]
    ap = p - a[:, None, None, :]
    tproj = ((ap * ab).sum(-1) / ((ab * ab).sum(-1) + 1e-12)).clamp(0.0, 1.0)
    closest = a[:, None, None, :] + tproj.unsqueeze(-1) * ab
    dist = torch.sqrt(((p - closest) ** 2).sum(-1) + 1e-12)  # [E, win, win]

    flat_idx = (origin[:, None, None, 1] + gy.to(torch.int64)) * w + (origin[:, None, None, 0] + gx.to(torch.int64))
    grid = torch.full((h * w,), 1e6, dtype=dtype)
    grid = grid.scatter_reduce(0, flat_idx.reshape(-1), dist.reshape(-1), reduce="amin", include_self=True)
    grid = grid.view(h, w)

    sign = torch.where(inside, 1.0, -1.0).to(dtype)
    coverage = torch.sigmoid(sign * grid / bandwidth)
    return coverage * (coverage > 1e-12)  # snap underflow tails to exact zero


def _cover_count(tri: torch.Tensor, resolution: tuple[int, int]) -> torch.Tensor:
    """Float [H, W]: number of projected triangles covering each pixel center (no grad)."""
    h, w = resolution
    with torch.no_grad():
        lo = tri.min(dim=1).values
        hi = tri.max(dim=1).values
        extent = (hi - lo).max().item() if len(tri) else 0.0
        win = int(min(max(np.ceil(extent) + 3, 2), max(h, w)))
        origin = torch.floor(lo).to(torch.int64)
        origin[:, 0] = origin[:, 0].clamp(0, max(w - win, 0))
        origin[:, 1] = origin[:, 1].clamp(0, max(h - win, 0))
        ax = torch.arange(win, dtype=tri.dtype)
        gy, gx = torch.meshgrid(ax, ax, indexing="ij")
        p = torch.stack(
            [origin[:, None, None, 0].to(tri.dtype) + gx, origin[:, None, None, 1].to(tri.dtype) + gy], dim=-1
        )
        e0 = _edge_t(tri[:, 0][:, None, None], tri[:, 1][:, None, None], p)
        e1 = _edge_t(tri[:, 1][:, None, None], tri[:, 2][:, None, None], p)
        e2 = _edge_t(tri[:, 2][:, None, None], tri[:, 0][:, None, None], p)
        ins = ((e0 >= -1e-9) & (e1 >= -1e-9) & (e2 >= -1e-9)) | ((e0 <= 1e-9) & (e1 <= 1e-9) & (e2 <= 1e-9))
        flat_idx = (origin[:, None, None, 1] + gy.to(torch.int64)) * w + (
            origin[:, None, None, 0] + gx.to(torch.int64)
        )
        out = torch.zeros(h * w, dtype=tri.dtype)
        out = out.scatter_add(0, flat_idx.reshape(-1), ins.to(tri.dtype).reshape(-1))
        return out.view(h, w)


def _edge_t(a, b, p):
    return (b[..., 0] - a[..., 0]) * (p[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (p[..., 0] - a[..., 0])


def render_silhouette(mesh_vertices, faces, camera: CameraParams, resolution: tuple[int, int] | None = None):
    """Soft silhouette of a 3D mesh under a weak-perspective camera (torch path).

    ``mesh_vertices`` may be a torch tensor (gradients preserved) or numpy.
    Resolution defaults to the camera's image size.
    """
    if resolution is None:
        w, h = camera.image_size
        resolution = (h, w)
    if camera.scale <= 0 or not np.isfinite(camera.scale):
        raise InvalidInputError("degenerate camera")
    if isinstance(mesh_vertices, np.ndarray):
        mesh_vertices = torch.from_numpy(mesh_vertices)
    scale = torch.as_tensor(camera.scale, dtype=mesh_vertices.dtype)
    trans = torch.as_tensor(camera.translation, dtype=mesh_vertices.dtype)
    v2 = project_torch(mesh_vertices, scale, trans)
    return soft_silhouette(v2, faces, resolution)
