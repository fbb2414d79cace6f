"""Synthetic demo scenes: fully self-contained photos with exact ground truth.

Renders the synthetic body (vertex-colored through barycentric interpolation)
over a procedural background and packages the exact keypoints, mask, and fit
parameters alongside. Used by the test suite, the e2e fixtures, and the
quickstart demo: no external assets or detectors needed.
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from . import body_model as bmod
from . import rendering as rnd
from .fitting import FitResult, Keypoints2D, PersonMask, skeleton_mapping
from .ingest import ImageRecord, save_image_file, square_crop_window


def upright_pose(rng: np.random.Generator | None = None, noise: float = 0.0) -> bmod.PoseParams:
    theta = np.zeros(72)
    theta[0:3] = [0.0, 0.0, np.pi]  # upright under the y-down image convention
    if rng is not None and noise > 0:
        theta[3:] += rng.standard_normal(69) * noise
    return bmod.PoseParams(theta)


def scene_camera(resolution: int) -> bmod.CameraParams:
    scale = resolution * 100.0 / 224.0
    return bmod.CameraParams(
        scale=scale,
        translation=np.array([resolution / 2.0, resolution * 0.53]),
        image_size=(resolution, resolution),
    )


def checker_background(resolution: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:resolution, 0:resolution]
    cell = max(resolution // 16, 4)
    checker = (((xx // cell) + (yy // cell)) % 2).astype(np.float64)
    grad = np.stack([xx, yy, (xx + yy) / 2.0], axis=-1) / resolution
    base = 0.35 * checker[..., None] + 0.5 * grad + 0.15 * rng.random(3)
    return np.clip(base * 2.0 - 1.0, -1.0, 1.0)


def render_person(model, beta, theta, camera, resolution: int):
    """(color [H,W,3] in [-1,1] with zeros off-body, mask [H,W] uint8)."""
    mesh = bmod.forward(model, beta, theta)
    v2 = rnd.project(mesh.vertices, camera)
    face_idx, bary = rnd.rasterize_barycentric(v2, mesh.vertices[:, 2], model.faces, (resolution, resolution))
    covered = face_idx >= 0
    t = model.template_vertices
    colors = (t - t.min(0)) / (t.max(0) - t.min(0)) * 2.0 - 1.0
    img = np.zeros((resolution, resolution, 3))
    f = face_idx[covered]
    img[covered] = np.einsum("mc,mcd->md", bary[covered], colors[model.faces[f]])
    return img, covered.astype(np.uint8)


def keypoints_for(model, beta, theta, camera) -> Keypoints2D:
    joints3d = bmod.joints(model, beta, theta)
    proj = rnd.project(joints3d, camera)
    pts = np.zeros((25, 2))
    conf = np.zeros(25)
    for det, mdl in skeleton_mapping("body25"):
        pts[det] = proj[mdl]
        conf[det] = 1.0
    return Keypoints2D(pts, conf, "body25")


def make_scene(model, seed: int = 0, resolution: int = 128, beta_scale: float = 0.6, pose_noise: float = 0.1):
    """A fully-synthetic fitted record: image + mask + keypoints + exact fit."""
    rng = np.random.default_rng(seed)
    beta = bmod.ShapeParams(np.clip(rng.standard_normal(10) * beta_scale, -2.5, 2.5))
    theta = upright_pose(rng, pose_noise)
    camera = scene_camera(resolution)

    person, mask = render_person(model, beta, theta, camera, resolution)
    img = checker_background(resolution, seed + 1)
    img[mask > 0] = person[mask > 0]

    kp = keypoints_for(model, beta, theta, camera)
    fit_result = FitResult(
        beta=beta,
        theta=theta,
        camera=camera,
        final_joint_energy=0.0,
        final_silhouette_energy=0.0,
        iterations_run=(0, 0),
    )
    return ImageRecord(
        image_id=f"scene{seed}",
        image_path="",
        image=img.astype(np.float32),
        keypoints=kp,
        mask=PersonMask.from_array(mask),
        fit=fit_result,
        status="ready",
    )


def crop_frame_init(fit_result, mask) -> dict:
    """Express the true camera in the 224 fitting-crop frame of this mask."""
    cx, cy, side = square_crop_window(mask.bbox)
    s = 224.0 / side
    offset = np.array([cx - side / 2.0, cy - side / 2.0])
    cam = fit_result.camera
    return {
        "beta": fit_result.beta.beta.tolist(),
        "theta": fit_result.theta.theta.tolist(),
        "camera": {
            "scale": cam.scale * s,
            "translation": ((np.asarray(cam.translation) - offset) * s).tolist(),
            "image_size": [224, 224],
        },
    }


def write_scene_fixtures(model, scene_seeds, fixtures_dir, image_dir, resolution=192, two_person_id=None):
    """Write adapter fixture files (keypoints/mask/init) + images for scenes."""
    fixtures_dir = Path(fixtures_dir)
    image_dir = Path(image_dir)
    fixtures_dir.mkdir(parents=True, exist_ok=True)
    image_dir.mkdir(parents=True, exist_ok=True)
    ids = []
    for seed in scene_seeds:
        rec = make_scene(model, seed=seed, resolution=resolution)
        image_id = f"img{seed}"
        ids.append(image_id)
        _write_one(rec, image_id, fixtures_dir, image_dir)
    if two_person_id is not None:
        _write_two_person(model, two_person_id, fixtures_dir, image_dir, resolution)
        ids.append(two_person_id)
    return ids


def _write_one(rec, image_id, fixtures_dir: Path, image_dir: Path):
    save_image_file(rec.image, image_dir / f"{image_id}.png")
    kp = rec.keypoints
    flat = np.concatenate([kp.points, kp.confidence[:, None]], axis=1).reshape(-1)
    (fixtures_dir / f"{image_id}_keypoints.json").write_text(
        json.dumps({"version": 1.3, "people": [{"pose_keypoints_2d": flat.tolist()}]})
    )
    cv2.imwrite(str(fixtures_dir / f"{image_id}_mask_0.png"), rec.mask.mask * 255)
    (fixtures_dir / f"{image_id}_init.json").write_text(json.dumps(crop_frame_init(rec.fit, rec.mask)))


def _write_two_person(model, image_id, fixtures_dir: Path, image_dir: Path, resolution: int):
    """Two bodies side by side in one frame, two masks, two keypoint entries."""
    img = checker_background(resolution, 99)
    people = []
    for k, shift in enumerate((-resolution * 0.22, resolution * 0.22)):
        rng = np.random.default_rng(50 + k)
        beta = bmod.ShapeParams(np.clip(rng.standard_normal(10) * 0.5, -2, 2))
        theta = upright_pose(rng, 0.08)
        cam = bmod.CameraParams(
            scale=resolution * 52.0 / 224.0,
            translation=np.array([resolution / 2.0 + shift, resolution * 0.52]),
            image_size=(resolution, resolution),
        )
        person, mask = render_person(model, beta, theta, cam, resolution)
        img[mask > 0] = person[mask > 0]
        people.append((beta, theta, cam, mask))

    save_image_file(img, image_dir / f"{image_id}.png")
    entries = []
    for k, (beta, theta, cam, mask) in enumerate(people):
        kp = keypoints_for(model, beta, theta, cam)
        flat = np.concatenate([kp.points, kp.confidence[:, None]], axis=1).reshape(-1)
        entries.append({"pose_keypoints_2d": flat.tolist()})
        cv2.imwrite(str(fixtures_dir / f"{image_id}_mask_{k}.png"), mask * 255)
        fit_result = FitResult(beta, theta, cam, 0.0, 0.0, (0, 0))
        init = crop_frame_init(fit_result, PersonMask.from_array(mask))
        (fixtures_dir / f"{image_id}_init_{k}.json").write_text(json.dumps(init))
    (fixtures_dir / f"{image_id}_keypoints.json").write_text(json.dumps({"version": 1.3, "people": entries}))
