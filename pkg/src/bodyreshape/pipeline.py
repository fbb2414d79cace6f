"""End-to-end preprocessing and interactive reshape pipeline.

One object owns the body model, slider calibration, adapters, and generator
weights, and exposes the two halves of the interactive loop:

* ``preprocess`` — detect, segment, crop, estimate, and refine the fit for
  one person in one photo (the slow, once-per-image half).
* ``reshape`` — map slider deltas into shape coefficients, build warp fields,
  and run the generator (the fast, per-edit half; foreground encodings are
  cached so repeated edits skip the foreground encoder).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi
import torch

from . import body_model as bmod
from .body_model import BodyModel, SemanticCalibration, SemanticSliders, ShapeParams
from .errors import InvalidInputError, NotReadyError
from .fitting import FitConfig, Keypoints2D, PersonMask, fit as run_fit
from .generator import (
    Generator,
    composite,
    field_to_grids,
    img_to_tensor,
    load_checkpoint,
    tensor_to_img,
)
from .ingest import ImageRecord, crop_and_resize
from .selfsup import _diffusion_region
from .warpfield import (
    UnionMask,
    WarpField,
    apply_warp_image,
    displacement_field,
    identity_field,
    union_mask,
)

FITTING_RESOLUTION = 224


@dataclass
class PreprocessOutcome:
    record: ImageRecord
    candidate_bboxes: list[tuple[int, int, int, int]]
    stage_seconds: dict[str, float] = field(default_factory=dict)


@dataclass
class ReshapeOutcome:
    image: np.ndarray  # [H,W,3] float32 in [-1,1]
    union: UnionMask
    field: WarpField
    beta_edited: ShapeParams
    seconds: float = 0.0


class ReshapePipeline:
    def __init__(
        self,
        model: BodyModel,
        calibration: SemanticCalibration,
        generator: Generator | None = None,
        keypoint_adapter=None,
        segment_adapter=None,
        initial_estimator=None,
        fit_config: FitConfig = FitConfig(),
        target_resolution: int = 256,
        union_dilation: int = 3,
        diffusion_margin: int = 12,
    ):
        self.model = model
        self.calibration = calibration
        self.generator = generator
        self.keypoint_adapter = keypoint_adapter
        self.segment_adapter = segment_adapter
        self.initial_estimator = initial_estimator
        self.fit_config = fit_config
        self.target_resolution = target_resolution
        self.union_dilation = union_dilation
        self.diffusion_margin = diffusion_margin

    @classmethod
    def from_checkpoint(cls, model, calibration, checkpoint_path, **kwargs):
        return cls(model, calibration, generator=load_checkpoint(checkpoint_path), **kwargs)

    # -- preprocessing ------------------------------------------------------

    def detect_people(self, image: np.ndarray, image_id: str):
        """Candidate person masks + keypoints for selection UIs."""
        if self.segment_adapter is None or self.keypoint_adapter is None:
            raise NotReadyError("detection adapters are not configured")
        masks = self.segment_adapter.segment(image, image_id)
        kps = self.keypoint_adapter.detect(image, image_id)
        return masks, kps

    def preprocess(
        self,
        image: np.ndarray,
        image_id: str,
        selected_bbox: tuple[int, int, int, int] | None = None,
    ) -> PreprocessOutcome:
        """Full per-image pipeline: detect, select, crop, estimate, refine."""
        stages: dict[str, float] = {}
        t0 = time.time()
        masks, kps = self.detect_people(image, image_id)
        stages["detect"] = time.time() - t0
        if not masks:
            raise InvalidInputError("no person found")

        idx = _select_person(masks, selected_bbox)
        mask = masks[idx]
        keypoints = _match_keypoints(kps, mask)

        raw = ImageRecord(image_id=image_id, image_path="", image=image, keypoints=keypoints, mask=mask)
        raw.advance("annotated")

        t0 = time.time()
        record = crop_and_resize(raw, self.target_resolution)
        fit_view = crop_and_resize(raw, FITTING_RESOLUTION)
        stages["crop"] = time.time() - t0

        if self.initial_estimator is None:
            raise NotReadyError("initial estimator adapter is not configured")
        t0 = time.time()
        try:
            init = self.initial_estimator.estimate(fit_view.image, image_id, person_index=idx)
        except TypeError:
            init = self.initial_estimator.estimate(fit_view.image, image_id)
        stages["initial_estimate"] = time.time() - t0

        t0 = time.time()
        fit_result = run_fit(self.model, fit_view.keypoints, fit_view.mask, init, self.fit_config)
        stages["fit"] = time.time() - t0

        # Transfer the 224-frame camera to the serving crop (pure rescale).
        r = self.target_resolution / FITTING_RESOLUTION
        record.fit = type(fit_result)(
            beta=fit_result.beta,
            theta=fit_result.theta,
            camera=bmod.CameraParams(
                scale=fit_result.camera.scale * r,
                translation=np.asarray(fit_result.camera.translation) * r,
                image_size=(self.target_resolution, self.target_resolution),
            ),
            final_joint_energy=fit_result.final_joint_energy,
            final_silhouette_energy=fit_result.final_silhouette_energy,
            iterations_run=fit_result.iterations_run,
        )
        record.advance("fitted")
        record.advance("ready")
        return PreprocessOutcome(
            record=record,
            candidate_bboxes=[m.bbox for m in masks],
            stage_seconds=stages,
        )

    # -- interactive reshaping ----------------------------------------------

    def encode_foreground_cache(self, record: ImageRecord) -> dict:
        """Cacheable per-record state: foreground tensor + encoder pyramid."""
        img = np.asarray(record.image, dtype=np.float32)
        mask = (record.mask.mask > 0).astype(np.float32)
        i_f = img * mask[..., None]
        cache = {"i_f": img_to_tensor(i_f), "mask": mask, "fg_mask": img_to_tensor(mask)}
        if self.generator is not None:
            with torch.no_grad():
                cache["f_pyr"] = self.generator.fg_encoder(cache["i_f"])
        return cache

    def reshape(
        self,
        record: ImageRecord,
        sliders: SemanticSliders,
        cache: dict | None = None,
    ) -> ReshapeOutcome:
        """Apply absolute slider deltas to the record's fit and synthesize."""
        if record.fit is None:
            raise NotReadyError("record has no fit")
        if self.generator is None:
            raise NotReadyError("generator weights are not loaded")
        t_start = time.time()
        if cache is None:
            cache = self.encode_foreground_cache(record)

        img = np.asarray(record.image, dtype=np.float64)
        h, w = img.shape[:2]
        mask = cache["mask"].astype(np.float64)
        fit_res = record.fit

        beta2 = bmod.semantic_to_beta(fit_res.beta, sliders, self.calibration)
        if sliders.is_zero():
            field = identity_field(h, w)
            m_dst = mask
        else:
            mesh_src = bmod.forward(self.model, fit_res.beta, fit_res.theta)
            mesh_dst = bmod.forward(self.model, beta2, fit_res.theta)
            region = _diffusion_region(
                mesh_src, mesh_dst, fit_res.camera, (h, w), mask, self.diffusion_margin
            )
            field = displacement_field(mesh_src, mesh_dst, fit_res.camera, (h, w), region, "src_to_dst")
            m_dst = (apply_warp_image(mask, field) > 0.5).astype(np.float64)

        a = union_mask(mask, m_dst, radius=self.union_dilation)
        i_b = img * (1.0 - a.a[..., None])

        with torch.no_grad():
            grids = field_to_grids(field, self.generator.level_resolutions(h, w))
            out = self.generator.forward_encoded(
                cache["f_pyr"],
                img_to_tensor(i_b.astype(np.float32)),
                img_to_tensor(a.a.astype(np.float32)),
                grids,
                fg_mask=cache["fg_mask"],
            )
        i_out = tensor_to_img(out)
        final = composite(img.astype(np.float32), i_out.astype(np.float32), a)
        return ReshapeOutcome(
            image=final.astype(np.float32),
            union=a,
            field=field,
            beta_edited=beta2,
            seconds=time.time() - t_start,
        )


def _select_person(masks: list[PersonMask], bbox: tuple[int, int, int, int] | None) -> int:
    if bbox is None:
        return int(np.argmax([m.mask.sum() for m in masks]))
    best, best_iou = 0, -1.0
    for i, m in enumerate(masks):
        iou = _bbox_iou(bbox, m.bbox)
        if iou > best_iou:
            best, best_iou = i, iou
    return best


def _bbox_iou(a, b) -> float:
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    x0 = max(ax0, bx0)
    y0 = max(ay0, by0)
    x1 = min(ax0 + aw, bx0 + bw)
    y1 = min(ay0 + ah, by0 + bh)
    inter = max(0, x1 - x0) * max(0, y1 - y0)
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def _match_keypoints(kps: list[Keypoints2D], mask: PersonMask) -> Keypoints2D:
    if not kps:
        raise InvalidInputError("no keypoints detected")
    if len(kps) == 1:
        return kps[0]
    x0, y0, w, h = mask.bbox

    def inside_fraction(kp: Keypoints2D) -> float:
        vis = kp.confidence > 0.05
        if not vis.any():
            return 0.0
        pts = kp.points[vis]
        ok = (pts[:, 0] >= x0) & (pts[:, 0] <= x0 + w) & (pts[:, 1] >= y0) & (pts[:, 1] <= y0 + h)
        return float(ok.mean())

    return max(kps, key=inside_fraction)
