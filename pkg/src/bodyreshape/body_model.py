"""Parametric 3D body model.

A linear-blend-skinned template mesh driven by 10 shape coefficients and
72 axis-angle pose coefficients (3 per joint, 24 joints including the global
orientation).  On top of the raw parameterization this module provides
semantic body measurements (height, weight, leg girth, leg length) and a
calibrated linear map that turns slider-style edits (cm / kg deltas) into
shape-coefficient deltas.

All heavy math runs through torch so downstream optimizers can differentiate
through ``forward``/``joints``; the public dataclass API stays numpy.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CalibrationError, ConfigurationError, InvalidInputError, ModelIntegrityError

SHAPE_DIM = 10
POSE_DIM = 72
NUM_JOINTS = 24
POSE_FEATURE_DIM = (NUM_JOINTS - 1) * 9
BETA_CLAMP = 4.0

# Joint ordering (standard 24-joint body skeleton).
PELVIS, L_HIP, R_HIP, SPINE1, L_KNEE, R_KNEE, SPINE2, L_ANKLE, R_ANKLE, SPINE3 = range(10)
L_FOOT, R_FOOT, NECK, L_COLLAR, R_COLLAR, HEAD, L_SHOULDER, R_SHOULDER = range(10, 18)
L_ELBOW, R_ELBOW, L_WRIST, R_WRIST, L_HAND, R_HAND = range(18, 24)

KINEMATIC_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21],
    dtype=np.int64,
)

_UP_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


def _require(cond: bool, exc: type[Exception], msg: str) -> None:
    if not cond:
        raise exc(msg)


@dataclass(frozen=True)
class ShapeParams:
    """10 dimensionless PCA-style shape coefficients."""

    beta: np.ndarray
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        _require(beta.shape == (SHAPE_DIM,), InvalidInputError, f"beta must have {SHAPE_DIM} components")
        _require(bool(np.isfinite(beta).all()), InvalidInputError, "beta components must be finite")
        object.__setattr__(self, "beta", beta)

    @classmethod
    def zeros(cls) -> "ShapeParams":
        return cls(np.zeros(SHAPE_DIM))


@dataclass(frozen=True)
class PoseParams:
    """72 axis-angle coefficients (radians), 3 per joint, joint 0 is global orientation."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        _require(theta.shape == (POSE_DIM,), InvalidInputError, f"theta must have {POSE_DIM} components")
        _require(bool(np.isfinite(theta).all()), InvalidInputError, "theta components must be finite")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls) -> "PoseParams":
        return cls(np.zeros(POSE_DIM))


@dataclass(frozen=True)
class CameraParams:
    """Weak-perspective camera: (x, y) = scale * (X, Y) + translation."""

    scale: float
    translation: np.ndarray
    image_size: tuple[int, int]  # (width, height) in pixels

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        _require(t.shape == (2,), InvalidInputError, "translation must have 2 components")
        _require(self.scale > 0, InvalidInputError, "camera scale must be positive")
        w, h = self.image_size
        # Model origin must land inside a 4x padded frame around the image.
        _require(
            -1.5 * w <= t[0] <= 2.5 * w and -1.5 * h <= t[1] <= 2.5 * h,
            InvalidInputError,
            "camera translation falls outside the 4x padded image frame",
        )
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "image_size", (int(w), int(h)))


@dataclass(frozen=True)
class SemanticSliders:
    """User-facing edit deltas: cm for lengths, kg for weight."""

    d_height: float = 0.0  # cm, [-20, 20]
    d_weight: float = 0.0  # kg, [-20, 20]
    d_leg_girth: float = 0.0  # cm, [-10, 10]
    d_proportion: float = 0.0  # cm of leg lengthening at fixed height, [-10, 10]

    RANGES = {
        "d_height": (-20.0, 20.0),
        "d_weight": (-20.0, 20.0),
        "d_leg_girth": (-10.0, 10.0),
        "d_proportion": (-10.0, 10.0),
    }

    def __post_init__(self):
        for name, (lo, hi) in self.RANGES.items():
            v = getattr(self, name)
            _require(np.isfinite(v) and lo <= v <= hi, InvalidInputError, f"{name}={v} outside [{lo}, {hi}]")

    def is_zero(self) -> bool:
        return self.d_height == 0 and self.d_weight == 0 and self.d_leg_girth == 0 and self.d_proportion == 0

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in self.RANGES}


@dataclass(frozen=True)
class BodyMesh:
    """A posed, shaped mesh; faces are shared with the originating model."""

    vertices: np.ndarray  # [N, 3] meters
    faces: np.ndarray  # [F, 3] vertex indices


@dataclass
class BodyModel:
    """Immutable template + blendshape bundle.  All arrays are float64/int64."""

    template_vertices: np.ndarray  # [N, 3] meters
    faces: np.ndarray  # [F, 3]
    shape_blendshapes: np.ndarray  # [N, 3, 10]
    pose_blendshapes: np.ndarray  # [N, 3, 207]
    joint_regressor: np.ndarray  # [24, N]
    skinning_weights: np.ndarray  # [N, 24]
    kinematic_parents: np.ndarray  # [24]
    up_axis: str = "y"
    thigh_ring: tuple[int, ...] | None = None
    density: float = 1000.0  # kg / m^3

    def __post_init__(self):
        self.template_vertices = np.ascontiguousarray(self.template_vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        self.shape_blendshapes = np.ascontiguousarray(self.shape_blendshapes, dtype=np.float64)
        self.pose_blendshapes = np.ascontiguousarray(self.pose_blendshapes, dtype=np.float64)
        self.joint_regressor = np.ascontiguousarray(self.joint_regressor, dtype=np.float64)
        self.skinning_weights = np.ascontiguousarray(self.skinning_weights, dtype=np.float64)
        self.kinematic_parents = np.ascontiguousarray(self.kinematic_parents, dtype=np.int64)
        self._torch_cache: dict[str, torch.Tensor] | None = None
        self.validate()

    # -- structural invariants -------------------------------------------------

    def validate(self) -> None:
        n = self.num_vertices
        _require(self.faces.min() >= 0 and self.faces.max() < n, ModelIntegrityError, "faces index invalid vertices")
        _require(
            self.shape_blendshapes.shape == (n, 3, SHAPE_DIM),
            ModelIntegrityError,
            "shape blendshapes have wrong shape",
        )
        _require(
            self.pose_blendshapes.shape == (n, 3, POSE_FEATURE_DIM),
            ModelIntegrityError,
            "pose blendshapes have wrong shape",
        )
        _require(self.joint_regressor.shape == (NUM_JOINTS, n), ModelIntegrityError, "joint regressor wrong shape")
        _require(self.skinning_weights.shape == (n, NUM_JOINTS), ModelIntegrityError, "skinning weights wrong shape")
        w_err = np.abs(self.skinning_weights.sum(axis=1) - 1.0).max()
        _require(w_err < 1e-5, ModelIntegrityError, f"skinning weight rows must sum to 1 (max err {w_err:.2e})")
        r_err = np.abs(self.joint_regressor.sum(axis=1) - 1.0).max()
        _require(r_err < 1e-4, ModelIntegrityError, f"joint regressor rows must sum to 1 (max err {r_err:.2e})")
        _require(self.up_axis in _UP_AXIS_INDEX, ConfigurationError, f"unknown up axis {self.up_axis!r}")

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def up_index(self) -> int:
        return _UP_AXIS_INDEX[self.up_axis]

    def is_closed(self) -> bool:
        """True when every directed edge has exactly one opposite-directed twin."""
        edges = {}
        for f in self.faces:
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                key = (int(a), int(b))
                if key in edges:
                    return False  # duplicate directed edge: non-manifold or inconsistent winding
                edges[key] = True
        return all((b, a) in edges for (a, b) in edges)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.template_vertices, self.faces, self.shape_blendshapes, self.joint_regressor):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def tensors(self, dtype: torch.dtype = torch.float64) -> dict[str, torch.Tensor]:
        """Torch views of the model arrays (cached, shared, treat as read-only)."""
        if self._torch_cache is None:
            self._torch_cache = {
                "template": torch.from_numpy(self.template_vertices),
                "shape_dirs": torch.from_numpy(self.shape_blendshapes.reshape(-1, SHAPE_DIM)),
                "pose_dirs": torch.from_numpy(self.pose_blendshapes.reshape(-1, POSE_FEATURE_DIM)),
                "regressor": torch.from_numpy(self.joint_regressor),
                "weights": torch.from_numpy(self.skinning_weights),
            }
        cache = self._torch_cache
        if dtype != torch.float64:
            return {k: v.to(dtype) for k, v in cache.items()}
        return cache


# ---------------------------------------------------------------------------
# Forward kinematics / linear blend skinning (torch, differentiable)
# ---------------------------------------------------------------------------


def rodrigues(axis_angle: torch.Tensor) -> torch.Tensor:
    """Axis-angle [J, 3] -> rotation matrices [J, 3, 3]."""
    angle = torch.linalg.norm(axis_angle, dim=-1, keepdim=True).clamp(min=1e-12)
    axis = axis_angle / angle
    x, y, z = axis.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack(
        [
            torch.stack([zero, -z, y], -1),
            torch.stack([z, zero, -x], -1),
            torch.stack([-y, x, zero], -1),
        ],
        dim=-2,
    )
    s = torch.sin(angle).unsqueeze(-1)
    c = torch.cos(angle).unsqueeze(-1)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device)
    return eye + s * k + (1.0 - c) * (k @ k)


def lbs_forward(
    model: BodyModel,
    beta_t: torch.Tensor,
    theta_t: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable core: returns (posed vertices [N,3], world joints [24,3])."""
    if beta_t.shape != (SHAPE_DIM,) or theta_t.shape != (POSE_DIM,):
        raise InvalidInputError("parameter dimensions do not match the model")
    t = model.tensors(beta_t.dtype)
    n = model.num_vertices

    v_shaped = t["template"] + (t["shape_dirs"] @ beta_t).view(n, 3)
    joints_rest = t["regressor"] @ v_shaped

    rots = rodrigues(theta_t.view(NUM_JOINTS, 3))
    eye = torch.eye(3, dtype=beta_t.dtype)
    pose_feature = (rots[1:] - eye).reshape(-1)
    v_posed = v_shaped + (t["pose_dirs"] @ pose_feature).view(n, 3)

    # Forward kinematics: compose local transforms down the tree.
    world_rot = [None] * NUM_JOINTS
    world_pos = [None] * NUM_JOINTS
    parents = model.kinematic_parents
    world_rot[0] = rots[0]
    world_pos[0] = joints_rest[0]
    for j in range(1, NUM_JOINTS):
        p = int(parents[j])
        world_rot[j] = world_rot[p] @ rots[j]
        world_pos[j] = world_pos[p] + world_rot[p] @ (joints_rest[j] - joints_rest[p])
    rot_w = torch.stack(world_rot)  # [J, 3, 3]
    pos_w = torch.stack(world_pos)  # [J, 3]

    # Skinning: v' = sum_j w_j (R_j (v - j_rest) + t_j)
    trans = pos_w - torch.einsum("jab,jb->ja", rot_w, joints_rest)
    rot_v = torch.einsum("nj,jab->nab", t["weights"], rot_w)
    trans_v = t["weights"] @ trans
    verts = torch.einsum("nab,nb->na", rot_v, v_posed) + trans_v
    return verts, pos_w


def forward(model: BodyModel, beta: ShapeParams, theta: PoseParams) -> BodyMesh:
    """Pose and shape the template into a mesh."""
    beta_t = torch.from_numpy(beta.beta)
    theta_t = torch.from_numpy(theta.theta)
    verts, _ = lbs_forward(model, beta_t, theta_t)
    return BodyMesh(vertices=verts.numpy(), faces=model.faces)


def joints(model: BodyModel, beta: ShapeParams, theta: PoseParams) -> np.ndarray:
    """World-space 3D joint positions [24, 3] in meters."""
    beta_t = torch.from_numpy(beta.beta)
    theta_t = torch.from_numpy(theta.theta)
    _, pos = lbs_forward(model, beta_t, theta_t)
    return pos.numpy()


# ---------------------------------------------------------------------------
# Semantic measurements
# ---------------------------------------------------------------------------


def _shaped_vertices(model: BodyModel, beta: np.ndarray) -> np.ndarray:
    return model.template_vertices + model.shape_blendshapes.reshape(-1, SHAPE_DIM).dot(beta).reshape(-1, 3)


def measure_height(model: BodyModel, beta: ShapeParams) -> float:
    """Vertical extent of the rest-pose mesh, in cm."""
    v = _shaped_vertices(model, beta.beta)[:, model.up_index]
    return float((v.max() - v.min()) * 100.0)


def mesh_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    """Signed volume via summed tetrahedra against the origin, in m^3."""
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    return float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0)


def measure_weight(model: BodyModel, beta: ShapeParams) -> float:
    """Body weight proxy: rest-pose mesh volume x density, in kg."""
    if not model.is_closed():
        raise ModelIntegrityError("weight requires a closed, orientable mesh")
    v = _shaped_vertices(model, beta.beta)
    return mesh_volume(v, model.faces) * model.density


def measure_leg_girth(model: BodyModel, beta: ShapeParams) -> float:
    """Closed polyline length of the configured mid-thigh vertex ring, in cm."""
    if not model.thigh_ring:
        raise ConfigurationError("thigh ring indices are not configured for this model")
    ring = np.asarray(model.thigh_ring, dtype=np.int64)
    pts = _shaped_vertices(model, beta.beta)[ring]
    d = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
    return float(d.sum() * 100.0)


def measure_leg_length(model: BodyModel, beta: ShapeParams) -> float:
    """Hip-to-ankle drop along the up axis, averaged over both legs, in cm."""
    v = _shaped_vertices(model, beta.beta)
    j = model.joint_regressor @ v
    up = model.up_index
    left = j[L_HIP, up] - j[L_ANKLE, up]
    right = j[R_HIP, up] - j[R_ANKLE, up]
    return float((left + right) / 2.0 * 100.0)


_MEASURES = (measure_height, measure_weight, measure_leg_girth, measure_leg_length)
MEASURE_NAMES = ("height_cm", "weight_kg", "leg_girth_cm", "leg_length_cm")


# ---------------------------------------------------------------------------
# Slider calibration: linear map from shape coefficients to semantic measures
# ---------------------------------------------------------------------------

CALIBRATION_VERSION = 1


@dataclass(frozen=True)
class SemanticCalibration:
    """Finite-difference Jacobian of the four measures at beta = 0."""

    matrix: np.ndarray  # [4, 10]: d(measure_i)/d(beta_j)
    base_measures: np.ndarray  # [4]: measures at beta = 0
    model_fingerprint: str
    version: int = CALIBRATION_VERSION


def calibrate_semantic_map(model: BodyModel, step: float = 0.1) -> SemanticCalibration:
    """Central finite differences of (height, weight, girth, leg length) at beta=0."""
    mat = np.zeros((4, SHAPE_DIM))
    for j in range(SHAPE_DIM):
        hi = np.zeros(SHAPE_DIM)
        hi[j] = step
        plus = ShapeParams(hi)
        minus = ShapeParams(-hi)
        for i, fn in enumerate(_MEASURES):
            mat[i, j] = (fn(model, plus) - fn(model, minus)) / (2.0 * step)
    base = np.array([fn(model, ShapeParams.zeros()) for fn in _MEASURES])
    if np.linalg.matrix_rank(mat, tol=1e-8) < 4:
        raise CalibrationError("semantic measure map is rank-deficient on this model")
    return SemanticCalibration(matrix=mat, base_measures=base, model_fingerprint=model.fingerprint())


def save_calibration(calib: SemanticCalibration, path: str | Path) -> None:
    np.savez(
        path,
        matrix=calib.matrix,
        base_measures=calib.base_measures,
        version=np.array([calib.version]),
        fingerprint=np.frombuffer(calib.model_fingerprint.encode(), dtype=np.uint8),
    )


def load_calibration(path: str | Path) -> SemanticCalibration:
    data = np.load(path)
    version = int(data["version"][0])
    if version != CALIBRATION_VERSION:
        raise CalibrationError(f"calibration cache version {version} != {CALIBRATION_VERSION}")
    return SemanticCalibration(
        matrix=data["matrix"],
        base_measures=data["base_measures"],
        model_fingerprint=bytes(data["fingerprint"]).decode(),
        version=version,
    )


def load_or_calibrate(model: BodyModel, cache_path: str | Path | None = None) -> SemanticCalibration:
    """Reuse a cached calibration when it matches the model, else recalibrate."""
    if cache_path is not None:
        p = Path(cache_path)
        if p.exists():
            try:
                calib = load_calibration(p)
                if calib.model_fingerprint == model.fingerprint():
                    return calib
            except (CalibrationError, KeyError, OSError):
                pass
        calib = calibrate_semantic_map(model)
        save_calibration(calib, p)
        return calib
    return calibrate_semantic_map(model)


def semantic_to_beta(
    base: ShapeParams,
    sliders: SemanticSliders,
    calib: SemanticCalibration,
) -> ShapeParams:
    """Solve the calibrated linear system for the minimum-norm shape delta.

    The proportion slider targets extra leg length at constant total height:
    leg length otherwise follows height proportionally, so its target row is
    d_proportion plus the leg-length share of d_height.
    """
    if sliders.is_zero():
        return base
    mat = calib.matrix
    if np.linalg.matrix_rank(mat, tol=1e-8) < 4:
        raise CalibrationError("semantic map is rank-deficient; recalibrate the model")
    h0, _, _, l0 = calib.base_measures
    target = np.array(
        [
            sliders.d_height,
            sliders.d_weight,
            sliders.d_leg_girth,
            sliders.d_proportion + sliders.d_height * (l0 / h0),
        ]
    )
    delta, *_ = np.linalg.lstsq(mat, target, rcond=None)
    result = np.clip(base.beta + delta, -BETA_CLAMP, BETA_CLAMP)
    achieved = mat @ (result - base.beta)
    residual = np.abs(achieved - target).max()
    requested = max(np.abs(target).max(), 1e-9)
    warnings = ("range_exceeded",) if residual > 0.25 * requested else ()
    return ShapeParams(result, warnings=warnings)


# ---------------------------------------------------------------------------
# Synthetic stand-in model
# ---------------------------------------------------------------------------


def _uv_ellipsoid(center, radii, rings: int, sectors: int, direction=None):
    """Closed lat-long ellipsoid mesh; returns (verts [n,3], faces [m,3]).

    ``direction`` tilts the ellipsoid's long (y) axis onto the given unit vector.
    Ring r, sector s layout keeps horizontal rings intact for girth measurements.
    """
    verts = [np.array([0.0, 1.0, 0.0])]  # top pole
    for r in range(1, rings + 1):
        phi = np.pi * r / (rings + 1)
        for s in range(sectors):
            lam = 2 * np.pi * s / sectors
            verts.append(np.array([np.sin(phi) * np.cos(lam), np.cos(phi), np.sin(phi) * np.sin(lam)]))
    verts.append(np.array([0.0, -1.0, 0.0]))  # bottom pole
    verts = np.stack(verts)

    faces = []
    bottom = len(verts) - 1
    ring_start = lambda r: 1 + (r - 1) * sectors
    for s in range(sectors):
        faces.append([0, ring_start(1) + (s + 1) % sectors, ring_start(1) + s])
    for r in range(1, rings):
        a, b = ring_start(r), ring_start(r + 1)
        for s in range(sectors):
            s2 = (s + 1) % sectors
            faces.append([a + s, a + s2, b + s])
            faces.append([a + s2, b + s2, b + s])
    last = ring_start(rings)
    for s in range(sectors):
        faces.append([bottom, last + s, last + (s + 1) % sectors])
    faces = np.array(faces, dtype=np.int64)

    verts = verts * np.asarray(radii)
    if direction is not None:
        d = np.asarray(direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        y = np.array([0.0, 1.0, 0.0])
        v = np.cross(y, d)
        c = float(y @ d)
        if np.linalg.norm(v) < 1e-12:
            rot = np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
        else:
            vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
            rot = np.eye(3) + vx + vx @ vx / (1.0 + c)
        verts = verts @ rot.T
    return verts + np.asarray(center), faces


# Skeleton layout of the synthetic body (meters, y-up, pelvis at origin).
_SYNTH_JOINTS = np.array(
    [
        [0.00, 0.00, 0.00],  # pelvis
        [-0.09, -0.06, 0.00],  # left hip
        [0.09, -0.06, 0.00],  # right hip
        [0.00, 0.11, 0.00],  # spine1
        [-0.10, -0.50, 0.00],  # left knee
        [0.10, -0.50, 0.00],  # right knee
        [0.00, 0.24, 0.00],  # spine2
        [-0.105, -0.90, 0.00],  # left ankle
        [0.105, -0.90, 0.00],  # right ankle
        [0.00, 0.34, 0.00],  # spine3
        [-0.11, -0.95, 0.09],  # left foot
        [0.11, -0.95, 0.09],  # right foot
        [0.00, 0.47, 0.00],  # neck
        [-0.06, 0.43, 0.00],  # left collar
        [0.06, 0.43, 0.00],  # right collar
        [0.00, 0.55, 0.00],  # head
        [-0.17, 0.42, 0.00],  # left shoulder
        [0.17, 0.42, 0.00],  # right shoulder
        [-0.25, 0.15, 0.00],  # left elbow
        [0.25, 0.15, 0.00],  # right elbow
        [-0.31, -0.09, 0.00],  # left wrist
        [0.31, -0.09, 0.00],  # right wrist
        [-0.34, -0.17, 0.00],  # left hand
        [0.34, -0.17, 0.00],  # right hand
    ]
)

# (joint A, joint B, radius, rings, sectors, driving joint for skinning)
_SYNTH_PARTS = (
    ("torso", SPINE1, NECK, 0.150, 5, 8, SPINE2),
    ("pelvis", PELVIS, PELVIS, 0.145, 4, 8, PELVIS),
    ("head", HEAD, HEAD, 0.105, 4, 8, HEAD),
    ("l_thigh", L_HIP, L_KNEE, 0.075, 5, 8, L_HIP),
    ("r_thigh", R_HIP, R_KNEE, 0.075, 5, 8, R_HIP),
    ("l_shin", L_KNEE, L_ANKLE, 0.052, 4, 7, L_KNEE),
    ("r_shin", R_KNEE, R_ANKLE, 0.052, 4, 7, R_KNEE),
    ("l_upper_arm", L_SHOULDER, L_ELBOW, 0.044, 3, 6, L_SHOULDER),
    ("r_upper_arm", R_SHOULDER, R_ELBOW, 0.044, 3, 6, R_SHOULDER),
    ("l_forearm", L_ELBOW, L_HAND, 0.038, 3, 6, L_ELBOW),
    ("r_forearm", R_ELBOW, R_HAND, 0.038, 3, 6, R_ELBOW),
)


def build_synthetic_model() -> BodyModel:
    """Procedural stand-in body: ~0.4k vertices, 24 joints, 10 shape directions.

    Each body part is a closed ellipsoid; parts overlap at joints so the union
    reads as one body in silhouette while every edge stays two-manifold.
    """
    all_verts: list[np.ndarray] = []
    all_faces: list[np.ndarray] = []
    part_slices: dict[str, slice] = {}
    drivers: list[int] = []

    for name, ja, jb, radius, rings, sectors, driver in _SYNTH_PARTS:
        a, b = _SYNTH_JOINTS[ja], _SYNTH_JOINTS[jb]
        if ja == jb:
            # blob part: slightly taller than wide
            center, direction = a + np.array([0.0, 0.02, 0.0]), None
            radii = (radius, radius * 1.25, radius * 0.72)
            if name == "torso":
                radii = (radius, radius * 1.8, radius * 0.66)
        else:
            seg = b - a
            length = np.linalg.norm(seg)
            center, direction = (a + b) / 2.0, seg / length
            radii = (radius, length / 2.0 + radius * 0.9, radius)
        if name == "torso":
            seg = b - a
            length = np.linalg.norm(seg)
            center, direction = (a + b) / 2.0, seg / length
            radii = (radius, length / 2.0 + 0.06, radius * 0.66)
        v, f = _uv_ellipsoid(center, radii, rings, sectors, direction)
        offset = sum(len(x) for x in all_verts)
        part_slices[name] = slice(offset, offset + len(v))
        all_verts.append(v)
        all_faces.append(f + offset)
        drivers.extend([driver] * len(v))

    verts = np.concatenate(all_verts)
    faces = np.concatenate(all_faces)
    n = len(verts)

    # Outward orientation check: component volumes must be positive.
    if mesh_volume(verts, faces) <= 0:
        faces = faces[:, [0, 2, 1]]

    weights = np.zeros((n, NUM_JOINTS))
    weights[np.arange(n), drivers] = 1.0

    regressor = _nearest_vertex_regressor(verts, _SYNTH_JOINTS, k=8)

    shape_dirs = _synthetic_shape_directions(verts, part_slices)
    pose_dirs = np.zeros((n, 3, POSE_FEATURE_DIM))

    # Mid-thigh ring: middle latitude ring of the left thigh ellipsoid.
    th = part_slices["l_thigh"]
    rings, sectors = 5, 8
    mid_ring_start = th.start + 1 + 2 * sectors  # ring index 3 of 5
    thigh_ring = tuple(range(mid_ring_start, mid_ring_start + sectors))

    return BodyModel(
        template_vertices=verts,
        faces=faces,
        shape_blendshapes=shape_dirs,
        pose_blendshapes=pose_dirs,
        joint_regressor=regressor,
        skinning_weights=weights,
        kinematic_parents=KINEMATIC_PARENTS.copy(),
        up_axis="y",
        thigh_ring=thigh_ring,
    )


def _nearest_vertex_regressor(verts: np.ndarray, joint_pos: np.ndarray, k: int = 16) -> np.ndarray:
    """Per joint: minimum-norm affine-combination weights over the k nearest vertices.

    Widens the neighborhood until it spans 3D (ring-shaped neighborhoods are
    coplanar, which would make the affine system infeasible).
    """
    n = verts.shape[0]
    reg = np.zeros((NUM_JOINTS, n))
    for j in range(NUM_JOINTS):
        d = np.linalg.norm(verts - joint_pos[j], axis=1)
        order = np.argsort(d)
        kk = k
        while True:
            idx = order[:kk]
            # Solve [V^T; 1] w = [p; 1] with minimum norm.
            a = np.vstack([verts[idx].T, np.ones(len(idx))])
            b = np.concatenate([joint_pos[j], [1.0]])
            w, *_ = np.linalg.lstsq(a, b, rcond=None)
            if np.abs(a @ w - b).max() < 1e-9 or kk >= n:
                break
            kk *= 2
        reg[j, idx] = w
    return reg


def _synthetic_shape_directions(verts: np.ndarray, parts: dict[str, slice]) -> np.ndarray:
    """Ten linear displacement fields with loosely semantic meaning."""
    n = verts.shape[0]
    dirs = np.zeros((n, 3, SHAPE_DIM))
    y = verts[:, 1]
    y_feet = y.min()
    y_crotch = -0.06

    def mask(*names):
        m = np.zeros(n, dtype=bool)
        for nm in names:
            m[parts[nm]] = True
        return m

    legs = mask("l_thigh", "r_thigh", "l_shin", "r_shin")
    torso = mask("torso", "pelvis")
    arms = mask("l_upper_arm", "r_upper_arm", "l_forearm", "r_forearm")
    head = mask("head")

    # 0: overall height (vertical scale about the feet)
    dirs[:, 1, 0] = 0.040 * (y - y_feet)
    # 1: overall bulk (radial scale in the horizontal plane)
    dirs[:, 0, 1] = 0.035 * verts[:, 0]
    dirs[:, 2, 1] = 0.035 * verts[:, 2]
    # 2: leg length (stretch below the crotch, anchored at the crotch)
    dirs[legs, 1, 2] = 0.034 * (y[legs] - y_crotch)
    # 3: leg girth (radial scale of each leg about its own axis)
    for nm, xc in (("l_thigh", -0.095), ("r_thigh", 0.095), ("l_shin", -0.103), ("r_shin", 0.103)):
        s = parts[nm]
        dirs[s, 0, 3] = 0.055 * (verts[s, 0] - xc)
        dirs[s, 2, 3] = 0.055 * verts[s, 2]
    # 4: torso girth
    dirs[torso, 0, 4] = 0.040 * verts[torso, 0]
    dirs[torso, 2, 4] = 0.040 * verts[torso, 2]
    # 5: arm length (stretch away from the shoulder line)
    dirs[arms, 1, 5] = 0.050 * (y[arms] - 0.42)
    # 6: arm girth
    for nm, xc in (("l_upper_arm", -0.21), ("r_upper_arm", 0.21), ("l_forearm", -0.295), ("r_forearm", 0.295)):
        s = parts[nm]
        dirs[s, 0, 6] = 0.060 * (verts[s, 0] - xc)
        dirs[s, 2, 6] = 0.060 * verts[s, 2]
    # 7: head size
    dirs[head, :, 7] = 0.050 * (verts[head] - np.array([0.0, 0.57, 0.0]))
    # 8: shoulder width (horizontal spread of arms and upper torso)
    wide = arms | mask("torso")
    dirs[wide, 0, 8] = 0.030 * verts[wide, 0]
    # 9: torso length (vertical stretch of torso and head above the crotch)
    upper = torso | head
    dirs[upper, 1, 9] = 0.030 * (y[upper] - y_crotch)
    dirs[arms, 1, 9] = 0.030 * (0.42 - y_crotch) * np.ones(arms.sum())
    return dirs


# ---------------------------------------------------------------------------
# Model archives and config files
# ---------------------------------------------------------------------------


def save_model_archive(model: BodyModel, path: str | Path) -> None:
    np.savez_compressed(
        path,
        template_vertices=model.template_vertices,
        faces=model.faces,
        shape_blendshapes=model.shape_blendshapes,
        pose_blendshapes=model.pose_blendshapes,
        joint_regressor=model.joint_regressor,
        skinning_weights=model.skinning_weights,
        kinematic_parents=model.kinematic_parents,
    )


def load_model_archive(path: str | Path, **kwargs) -> BodyModel:
    data = np.load(path)
    return BodyModel(
        template_vertices=data["template_vertices"],
        faces=data["faces"],
        shape_blendshapes=data["shape_blendshapes"],
        pose_blendshapes=data["pose_blendshapes"],
        joint_regressor=data["joint_regressor"],
        skinning_weights=data["skinning_weights"],
        kinematic_parents=data["kinematic_parents"],
        **kwargs,
    )


def load_model(config_path: str | Path) -> BodyModel:
    """Load a body model from a JSON config file.

    Config keys: ``asset`` ("synthetic://default" or a relative .npz path),
    ``up_axis``, ``thigh_ring`` (list of vertex indices or "auto" for the
    synthetic model), ``density``.
    """
    config_path = Path(config_path)
    cfg = json.loads(config_path.read_text())
    asset = cfg.get("asset", "synthetic://default")
    up_axis = cfg.get("up_axis", "y")
    density = float(cfg.get("density", 1000.0))
    ring_cfg = cfg.get("thigh_ring", "auto")

    if asset == "synthetic://default":
        model = build_synthetic_model()
        ring = model.thigh_ring if ring_cfg == "auto" else tuple(int(i) for i in ring_cfg)
        model.up_axis = up_axis
        model.density = density
        model.thigh_ring = ring
        model.validate()
        return model
    if ring_cfg == "auto":
        raise ConfigurationError("thigh_ring must be an explicit index list for external assets")
    return load_model_archive(
        config_path.parent / asset,
        up_axis=up_axis,
        density=density,
        thigh_ring=tuple(int(i) for i in ring_cfg),
    )
