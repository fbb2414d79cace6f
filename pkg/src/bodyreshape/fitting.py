"""Two-phase refinement of body parameters against image cues.

Phase 1 jointly optimizes shape, pose, and camera so projected model joints
match detected 2D keypoints under a robust Geman-McClure penalty.  Phase 2
freezes pose and camera and optimizes shape only, so the rendered soft
silhouette matches the person segmentation mask.  Both phases run Adam with
best-iterate retention (the optimizer is non-monotone; we keep the lowest
energy seen, which also guarantees the fit never regresses past its init).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np
import torch

from . import body_model as bmod
from .body_model import BodyModel, CameraParams, PoseParams, ShapeParams
from .errors import ConfigurationError, FitDivergedError, InvalidInputError
from .rendering import project_torch, soft_silhouette

VISIBLE_CONFIDENCE = 0.05


@dataclass(frozen=True)
class Keypoints2D:
    """Detected 2D joints with confidences, in pixel coordinates."""

    points: np.ndarray  # [K, 2]
    confidence: np.ndarray  # [K], in [0, 1]
    skeleton_format: str = "body25"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        conf = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if len(pts) < 1 or len(pts) != len(conf):
            raise InvalidInputError("keypoints need at least one point with matching confidences")
        if conf.min() < 0 or conf.max() > 1:
            raise InvalidInputError("confidences must lie in [0, 1]")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "confidence", conf)

    @property
    def num_visible(self) -> int:
        return int((self.confidence > VISIBLE_CONFIDENCE).sum())


@dataclass(frozen=True)
class PersonMask:
    """Binary person segmentation with its tight bounding box."""

    mask: np.ndarray  # [H, W], {0, 1}
    bbox: tuple[int, int, int, int]  # (x0, y0, width, height)

    def __post_init__(self):
        m = np.asarray(self.mask)
        m = (m > 0.5).astype(np.uint8) if m.dtype != np.uint8 else (m > 0).astype(np.uint8)
        if m.sum() == 0:
            raise InvalidInputError("person mask is empty")
        object.__setattr__(self, "mask", m)
        ys, xs = np.nonzero(m)
        tight = (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
        if tuple(self.bbox) != tight:
            raise InvalidInputError(f"bbox {self.bbox} is not the tight box {tight} of the mask")

    @classmethod
    def from_array(cls, mask: np.ndarray) -> "PersonMask":
        m = (np.asarray(mask) > 0.5).astype(np.uint8)
        ys, xs = np.nonzero(m)
        if len(xs) == 0:
            raise InvalidInputError("person mask is empty")
        return cls(m, (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)))


@dataclass(frozen=True)
class FitResult:
    beta: ShapeParams
    theta: PoseParams
    camera: CameraParams
    final_joint_energy: float
    final_silhouette_energy: float
    iterations_run: tuple[int, int]

    def __post_init__(self):
        ok = np.isfinite(self.final_joint_energy) and self.final_joint_energy >= 0
        ok &= np.isfinite(self.final_silhouette_energy) and self.final_silhouette_energy >= 0
        if not ok:
            raise InvalidInputError("fit energies must be finite and non-negative")


@dataclass(frozen=True)
class FitConfig:
    lr_keypoint: float = 0.01
    lr_silhouette: float = 0.05
    iters: tuple[int, int] = (100, 100)
    sigma_gm: float = 100.0  # px, at the 224 reference resolution
    render_resolution: int = 224
    seed: int = 0


def _load_skeleton_tables() -> dict:
    with resources.files("bodyreshape.data").joinpath("skeletons.json").open() as fh:
        return json.load(fh)


_SKELETONS = _load_skeleton_tables()


def skeleton_mapping(skeleton_format: str) -> list[tuple[int, int]]:
    """(detector index, model joint index) pairs for a named skeleton format."""
    table = _SKELETONS.get(skeleton_format)
    if table is None:
        raise ConfigurationError(f"no joint mapping for skeleton format {skeleton_format!r}")
    return [(int(a), int(b)) for a, b in table["pairs"]]


# ---------------------------------------------------------------------------
# Energies
# ---------------------------------------------------------------------------


def geman_mcclure(residual, sigma: float):
    """Robust penalty sigma^2 ||e||^2 / (sigma^2 + ||e||^2); bounded by sigma^2."""
    if sigma <= 0:
        raise InvalidInputError("sigma must be positive")
    if isinstance(residual, torch.Tensor):
        sq = (residual**2).sum(dim=-1)
        return sigma**2 * sq / (sigma**2 + sq)
    sq = (np.asarray(residual, dtype=np.float64) ** 2).sum(axis=-1)
    return sigma**2 * sq / (sigma**2 + sq)


def _keypoint_energy_torch(
    model: BodyModel,
    beta_t: torch.Tensor,
    theta_t: torch.Tensor,
    scale_t: torch.Tensor,
    trans_t: torch.Tensor,
    kp: Keypoints2D,
    sigma: float,
) -> torch.Tensor:
    mapping = skeleton_mapping(kp.skeleton_format)
    _, joints3d = bmod.lbs_forward(model, beta_t, theta_t)
    proj = project_torch(joints3d, scale_t, trans_t)
    det_idx = [d for d, _ in mapping if d < len(kp.points)]
    mdl_idx = [j for d, j in mapping if d < len(kp.points)]
    target = torch.from_numpy(kp.points[det_idx]).to(beta_t.dtype)
    weights = torch.from_numpy(kp.confidence[det_idx]).to(beta_t.dtype)
    rho = geman_mcclure(proj[mdl_idx] - target, sigma)
    return (weights * rho).sum()


def keypoint_energy(
    beta: ShapeParams,
    theta: PoseParams,
    camera: CameraParams,
    kp: Keypoints2D,
    model: BodyModel,
    sigma: float | None = None,
) -> float:
    """Confidence-weighted robust reprojection energy over mapped joints."""
    if sigma is None:
        sigma = _scaled_sigma(FitConfig(), camera)
    return float(
        _keypoint_energy_torch(
            model,
            torch.from_numpy(beta.beta),
            torch.from_numpy(theta.theta),
            torch.as_tensor(camera.scale, dtype=torch.float64),
            torch.from_numpy(np.asarray(camera.translation, dtype=np.float64)),
            kp,
            sigma,
        )
    )


def _silhouette_energy_torch(
    model: BodyModel,
    beta_t: torch.Tensor,
    theta_t: torch.Tensor,
    scale_t: torch.Tensor,
    trans_t: torch.Tensor,
    mask: np.ndarray,
) -> torch.Tensor:
    verts, _ = bmod.lbs_forward(model, beta_t, theta_t)
    v2 = project_torch(verts, scale_t, trans_t)
    rendered = soft_silhouette(v2, model.faces, mask.shape)
    target = torch.from_numpy(mask.astype(np.float64))
    return ((rendered - target) ** 2).sum()


def silhouette_energy(
    beta: ShapeParams,
    theta: PoseParams,
    camera: CameraParams,
    mask: PersonMask,
    model: BodyModel,
    render_resolution: int | None = None,
) -> float:
    """Sum of squared differences between the rendered soft silhouette and the mask."""
    m = mask.mask
    if render_resolution is not None and m.shape != (render_resolution, render_resolution):
        raise InvalidInputError(f"mask resolution {m.shape} != render resolution {render_resolution}")
    return float(
        _silhouette_energy_torch(
            model,
            torch.from_numpy(beta.beta),
            torch.from_numpy(theta.theta),
            torch.as_tensor(camera.scale, dtype=torch.float64),
            torch.from_numpy(np.asarray(camera.translation, dtype=np.float64)),
            m,
        )
    )


def _scaled_sigma(config: FitConfig, camera: CameraParams) -> float:
    return config.sigma_gm * max(camera.image_size) / 224.0


# ---------------------------------------------------------------------------
# Two-phase fit
# ---------------------------------------------------------------------------


def fit(
    model: BodyModel,
    keypoints: Keypoints2D,
    mask: PersonMask | None,
    init: tuple[ShapeParams, PoseParams, CameraParams],
    config: FitConfig = FitConfig(),
) -> FitResult:
    """Refine (beta, theta, camera) against keypoints, then beta against the mask.

    Phase 2 is skipped when no mask is provided; pose and camera are frozen in
    phase 2 so the shape update cannot disturb the keypoint alignment.
    """
    torch.manual_seed(config.seed)
    beta0, theta0, cam0 = init
    sigma = _scaled_sigma(config, cam0)

    beta_t = torch.from_numpy(beta0.beta.copy()).requires_grad_(True)
    theta_t = torch.from_numpy(theta0.theta.copy()).requires_grad_(True)
    scale_t = torch.as_tensor(float(cam0.scale), dtype=torch.float64).requires_grad_(True)
    trans_t = torch.from_numpy(np.asarray(cam0.translation, dtype=np.float64).copy()).requires_grad_(True)

    def kp_energy():
        return _keypoint_energy_torch(model, beta_t, theta_t, scale_t, trans_t, keypoints, sigma)

    def snapshot():
        return tuple(t.detach().clone() for t in (beta_t, theta_t, scale_t, trans_t))

    best = snapshot()
    best_e = np.inf

    opt = torch.optim.Adam([beta_t, theta_t, scale_t, trans_t], lr=config.lr_keypoint)
    iters1 = 0
    for _ in range(config.iters[0]):
        opt.zero_grad()
        e = kp_energy()
        e_now = float(e.detach())
        if not np.isfinite(e_now):
            raise FitDivergedError("keypoint energy diverged", last_state=best)
        if e_now < best_e:
            best_e = e_now
            best = snapshot()
        e.backward()
        opt.step()
        iters1 += 1
    with torch.no_grad():
        e_last = float(kp_energy())
    if np.isfinite(e_last) and e_last < best_e:
        best_e = e_last
        best = snapshot()

    beta_t, theta_t, scale_t, trans_t = (t.clone() for t in best)
    joint_energy = best_e

    sil_energy = 0.0
    iters2 = 0
    if mask is not None:
        m = mask.mask
        if m.shape != (config.render_resolution, config.render_resolution):
            raise InvalidInputError(
                f"mask resolution {m.shape} != render resolution {config.render_resolution}"
            )
        beta_t.requires_grad_(True)

        def sil_e():
            return _silhouette_energy_torch(model, beta_t, theta_t, scale_t, trans_t, m)

        best_beta = beta_t.detach().clone()
        best_sil = np.inf
        opt2 = torch.optim.Adam([beta_t], lr=config.lr_silhouette)
        for _ in range(config.iters[1]):
            opt2.zero_grad()
            e = sil_e()
            e_now = float(e.detach())
            if not np.isfinite(e_now):
                raise FitDivergedError("silhouette energy diverged", last_state=(best_beta,))
            if e_now < best_sil:
                best_sil = e_now
                best_beta = beta_t.detach().clone()
            e.backward()
            opt2.step()
            iters2 += 1
        with torch.no_grad():
            e_last = float(sil_e())
        if np.isfinite(e_last) and e_last < best_sil:
            best_sil = e_last
            best_beta = beta_t.detach().clone()
        beta_t = best_beta
        sil_energy = best_sil

    cam = CameraParams(
        scale=float(scale_t.detach()),
        translation=trans_t.detach().numpy(),
        image_size=cam0.image_size,
    )
    return FitResult(
        beta=ShapeParams(beta_t.detach().numpy()),
        theta=PoseParams(theta_t.detach().numpy()),
        camera=cam,
        final_joint_energy=joint_energy,
        final_silhouette_energy=sil_energy,
        iterations_run=(iters1, iters2),
    )
