"""Self-supervised pseudo-pair factory.

For a fitted photo, randomly resculpt the body shape, pixel-warp the person
into the new shape, and package the deformed foreground, masked background,
and inverse warp field as network inputs whose ground truth is the original
image itself.  Deformations are rejection-sampled from a unit Gaussian so
height and weight never move more than 20 cm / 20 kg.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import body_model as bmod
from .body_model import BETA_CLAMP, SHAPE_DIM, BodyModel, ShapeParams
from .errors import InvalidInputError
from .warpfield import UnionMask, WarpField, displacement_field, apply_warp_image, union_mask, _disk

import scipy.ndimage as ndi

MAX_HEIGHT_DELTA_CM = 20.0
MAX_WEIGHT_DELTA_KG = 20.0


@dataclass(frozen=True)
class TripletConfig:
    union_dilation: int = 3
    diffusion_margin: int = 12  # px the warp field extends beyond mask/mesh coverage
    max_rejections: int = 100


@dataclass(frozen=True)
class TrainingTriplet:
    """One pseudo-paired training example; all images share one resolution."""

    i_b: np.ndarray  # [H,W,3] background, zeroed inside the union mask
    i_f_t: np.ndarray  # [H,W,3] pixel-warped deformed foreground
    t_t: WarpField  # inverse field: deformed -> original
    a: UnionMask
    target: np.ndarray  # [H,W,3] the original image
    deformed_mask: np.ndarray  # [H,W] uint8, person mask in the deformed domain
    beta_deformed: ShapeParams

    def __post_init__(self):
        res = self.target.shape[:2]
        same = self.i_b.shape[:2] == res and self.i_f_t.shape[:2] == res
        same &= self.t_t.resolution == res and self.a.a.shape == res
        if not same:
            raise InvalidInputError("triplet components must share one resolution")


def sample_shape_delta(
    rng_seed: int,
    beta: ShapeParams,
    model: BodyModel,
    max_rejections: int = 100,
) -> ShapeParams:
    """Unit-Gaussian shape delta, rejection-sampled into the physical envelope.

    Falls back to progressively shrinking the last candidate so the call
    always terminates; the base shape itself is the limit of the shrink.
    """
    rng = np.random.default_rng(rng_seed)
    h0 = bmod.measure_height(model, beta)
    w0 = bmod.measure_weight(model, beta)

    def admissible(candidate: np.ndarray) -> bool:
        if np.abs(candidate).max() > BETA_CLAMP:
            return False
        cand = ShapeParams(candidate)
        if abs(bmod.measure_height(model, cand) - h0) > MAX_HEIGHT_DELTA_CM:
            return False
        return abs(bmod.measure_weight(model, cand) - w0) <= MAX_WEIGHT_DELTA_KG

    delta = np.zeros(SHAPE_DIM)
    for _ in range(max_rejections):
        delta = rng.standard_normal(SHAPE_DIM)
        if admissible(beta.beta + delta):
            return ShapeParams(beta.beta + delta)
    for _ in range(60):
        delta = delta * 0.7
        if admissible(beta.beta + delta):
            return ShapeParams(beta.beta + delta)
    return ShapeParams(np.clip(beta.beta, -BETA_CLAMP, BETA_CLAMP))


class TripletFactory:
    """Builds training triplets for fitted image records."""

    def __init__(self, model: BodyModel, config: TripletConfig = TripletConfig()):
        self.model = model
        self.config = config

    def make(self, record, delta_seed: int) -> TrainingTriplet:
        return make_training_triplet(record, delta_seed, model=self.model, config=self.config)


def make_training_triplet(
    record,
    delta_seed: int,
    *,
    model: BodyModel,
    config: TripletConfig = TripletConfig(),
) -> TrainingTriplet:
    """Resculpt, pixel-warp, and package one record into a training triplet.

    ``record`` needs ``image`` ([-1,1] float HWC), ``mask`` (PersonMask), and
    ``fit`` (FitResult); with a zero shape delta the triplet degenerates to
    (background, foreground, identity) and trivially recomposites the target.
    """
    if getattr(record, "fit", None) is None:
        raise InvalidInputError("record has no fit result")
    img = np.asarray(record.image, dtype=np.float64)
    mask = (np.asarray(record.mask.mask) > 0).astype(np.float64)
    h, w = img.shape[:2]
    fit = record.fit

    beta2 = sample_shape_delta(delta_seed, fit.beta, model, config.max_rejections)
    _assert_envelope(model, fit.beta, beta2)

    mesh_src = bmod.forward(model, fit.beta, fit.theta)
    mesh_dst = bmod.forward(model, beta2, fit.theta)

    region = _diffusion_region(mesh_src, mesh_dst, fit.camera, (h, w), mask, config.diffusion_margin)
    t_fwd = displacement_field(mesh_src, mesh_dst, fit.camera, (h, w), region, "src_to_dst")
    t_inv = displacement_field(mesh_src, mesh_dst, fit.camera, (h, w), region, "dst_to_src")

    fg = img * mask[..., None]
    m_t = (apply_warp_image(mask, t_fwd) > 0.5).astype(np.float64)
    i_f_t = apply_warp_image(fg, t_fwd) * m_t[..., None]
    a = union_mask(mask, m_t, radius=config.union_dilation)
    i_b = img * (1.0 - a.a[..., None])

    return TrainingTriplet(
        i_b=i_b.astype(np.float32),
        i_f_t=i_f_t.astype(np.float32),
        t_t=t_inv,
        a=a,
        target=img.astype(np.float32),
        deformed_mask=m_t.astype(np.uint8),
        beta_deformed=beta2,
    )


def _diffusion_region(mesh_src, mesh_dst, camera, resolution, mask, margin: int) -> np.ndarray:
    from .rendering import hard_silhouette, project

    cov_src = hard_silhouette(
        project(mesh_src.vertices, camera), mesh_src.vertices[:, 2], mesh_src.faces, resolution
    )
    cov_dst = hard_silhouette(
        project(mesh_dst.vertices, camera), mesh_dst.vertices[:, 2], mesh_dst.faces, resolution
    )
    merged = (mask > 0) | (cov_src > 0) | (cov_dst > 0)
    return ndi.binary_dilation(merged, structure=_disk(margin))


def _assert_envelope(model: BodyModel, base: ShapeParams, deformed: ShapeParams) -> None:
    dh = abs(bmod.measure_height(model, deformed) - bmod.measure_height(model, base))
    dw = abs(bmod.measure_weight(model, deformed) - bmod.measure_weight(model, base))
    assert dh <= MAX_HEIGHT_DELTA_CM + 1e-6, f"height delta {dh:.2f} cm escapes the envelope"
    assert dw <= MAX_WEIGHT_DELTA_KG + 1e-6, f"weight delta {dw:.2f} kg escapes the envelope"
