"""Quantitative evaluation: FID harness, direct-warp baseline, ablations, latency.

The FID embedder is a pluggable adapter; tests and offline runs use a
deterministic random-projection embedder, real evaluations can plug a
pretrained classifier.  Published reference scores are carried as report
fixtures only — reproducing them needs full-scale training.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import cv2

from .errors import DependencyError, InvalidInputError, NumericError

# Report fixtures: published reference FID scores (not reproduced at desk scale).
REFERENCE_FID_SCORES = {
    "liquid_warping": 89.41673,
    "ours": 80.28321,
}

FEATURE_DIM = 2048


@dataclass
class FidStats:
    """Streaming Gaussian moments of an embedded image set."""

    mean: np.ndarray  # [D]
    covariance: np.ndarray  # [D, D], sample covariance (ddof=1)
    count: int

    def __post_init__(self):
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise InvalidInputError("covariance shape mismatch")
        if self.count < 2:
            raise InvalidInputError("FID stats need at least 2 samples")
        sym_err = np.abs(self.covariance - self.covariance.T).max()
        if sym_err > 1e-6:
            raise InvalidInputError(f"covariance not symmetric (err {sym_err:.2e})")


class FeatureAccumulator:
    """Single-pass mean/covariance with stable (Welford-style) updates."""

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def update(self, features: np.ndarray) -> None:
        x = np.asarray(features, dtype=np.float64).reshape(-1, self.dim)
        for row in x:
            self.count += 1
            delta = row - self.mean
            self.mean += delta / self.count
            self.m2 += np.outer(delta, row - self.mean)

    def merge(self, other: "FeatureAccumulator") -> "FeatureAccumulator":
        out = FeatureAccumulator(self.dim)
        n1, n2 = self.count, other.count
        out.count = n1 + n2
        if out.count == 0:
            return out
        delta = other.mean - self.mean
        out.mean = self.mean + delta * (n2 / out.count)
        out.m2 = self.m2 + other.m2 + np.outer(delta, delta) * (n1 * n2 / out.count)
        return out

    def finalize(self) -> FidStats:
        if self.count < 2:
            raise InvalidInputError("need at least 2 samples for covariance")
        cov = self.m2 / (self.count - 1)
        cov = (cov + cov.T) / 2.0
        return FidStats(mean=self.mean.copy(), covariance=cov, count=self.count)


def fid(stats_a: FidStats, stats_b: FidStats) -> float:
    """Frechet distance between two Gaussian fits.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the matrix
    square root taken through the symmetrized product sqrt(S_a) S_b sqrt(S_a)
    and eigenvalue clipping at -1e-8.
    """
    if stats_a.mean.shape != stats_b.mean.shape:
        raise InvalidInputError("feature dimensions differ")
    mu_diff = stats_a.mean - stats_b.mean
    sqrt_a = _sqrtm_psd(stats_a.covariance, "stats_a covariance")
    inner = sqrt_a @ stats_b.covariance @ sqrt_a
    inner = (inner + inner.T) / 2.0
    eigvals = np.linalg.eigvalsh(inner)
    if eigvals.min() < -1e-8 * max(1.0, abs(eigvals.max())):
        raise NumericError(
            f"matrix square root failed: min eigenvalue {eigvals.min():.3e} "
            f"(max {eigvals.max():.3e}, dim {len(eigvals)})"
        )
    trace_sqrt = np.sqrt(np.clip(eigvals, 0.0, None)).sum()
    value = float(mu_diff @ mu_diff + np.trace(stats_a.covariance) + np.trace(stats_b.covariance) - 2.0 * trace_sqrt)
    return value


def _sqrtm_psd(mat: np.ndarray, label: str) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -1e-8 * max(1.0, abs(vals.max())):
        raise NumericError(f"{label} is not PSD: min eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


# ---------------------------------------------------------------------------
# Embedders
# ---------------------------------------------------------------------------


class RandomProjectionEmbedder:
    """Deterministic stand-in embedder: downsample, flatten, fixed Gaussian projection."""

    def __init__(self, dim: int = FEATURE_DIM, patch: int = 32, seed: int = 0):
        self.dim = dim
        self.patch = patch
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((patch * patch * 3, dim)) / np.sqrt(patch * patch * 3)

    def embed(self, images: list[np.ndarray]) -> np.ndarray:
        rows = []
        for img in images:
            arr = np.asarray(img, dtype=np.float32)
            small = cv2.resize(arr, (self.patch, self.patch), interpolation=cv2.INTER_AREA)
            rows.append(small.reshape(-1) @ self.projection)
        return np.stack(rows)


class FixtureEmbedder:
    """Replays precomputed feature matrices from an .npy file keyed by order."""

    def __init__(self, features_path: str | Path):
        self.features = np.load(features_path)
        self.cursor = 0

    def embed(self, images: list[np.ndarray]) -> np.ndarray:
        n = len(images)
        if self.cursor + n > len(self.features):
            raise DependencyError("fixture embedder ran out of stored features")
        out = self.features[self.cursor : self.cursor + n]
        self.cursor += n
        return out


def extract_features(images, embedder, batch_size: int = 16) -> FidStats:
    """Embed images and accumulate Gaussian moments in a single pass."""
    if embedder is None:
        raise DependencyError("no embedder configured and no fixture features supplied")
    images = list(images)
    if not images:
        raise InvalidInputError("empty image set")
    feats_probe = embedder.embed([images[0]])
    acc = FeatureAccumulator(feats_probe.shape[1])
    acc.update(feats_probe)
    for start in range(1, len(images), batch_size):
        acc.update(embedder.embed(images[start : start + batch_size]))
    return acc.finalize()


# ---------------------------------------------------------------------------
# Direct-warp baseline
# ---------------------------------------------------------------------------


def direct_warp_baseline(record, beta_prime, *, model, generator=None, union_dilation=3, diffusion_margin=12):
    """Pixel-warp the foreground, inpaint true disocclusions, composite.

    The comparison point for the neural path: distortions ride along with the
    pixels instead of being resynthesized.
    """
    from . import body_model as bmod
    from .generator import field_to_grids, img_to_tensor, tensor_to_img
    from .selfsup import _diffusion_region
    from .warpfield import apply_warp_image, displacement_field, identity_field, union_mask

    import torch

    if record.fit is None:
        raise InvalidInputError("record has no fit")
    img = np.asarray(record.image, dtype=np.float64)
    h, w = img.shape[:2]
    mask = (record.mask.mask > 0).astype(np.float64)
    fit_res = record.fit

    if np.allclose(beta_prime.beta, fit_res.beta.beta):
        field = identity_field(h, w)
        m_dst = mask
    else:
        mesh_src = bmod.forward(model, fit_res.beta, fit_res.theta)
        mesh_dst = bmod.forward(model, beta_prime, fit_res.theta)
        region = _diffusion_region(mesh_src, mesh_dst, fit_res.camera, (h, w), mask, diffusion_margin)
        field = displacement_field(mesh_src, mesh_dst, fit_res.camera, (h, w), region, "src_to_dst")
        m_dst = (apply_warp_image(mask, field) > 0.5).astype(np.float64)

    warped_fg = apply_warp_image(img * mask[..., None], field)
    out = img.copy()
    disoccluded = (mask > 0) & (m_dst == 0)
    if disoccluded.any():
        if generator is not None:
            # Background branch standalone: empty foreground, inpaint the hole.
            a = union_mask(mask, m_dst, radius=union_dilation)
            i_b = img * (1.0 - a.a[..., None])
            with torch.no_grad():
                grids = field_to_grids(identity_field(h, w), generator.level_resolutions(h, w))
                filled = generator(
                    img_to_tensor(np.zeros_like(img, dtype=np.float32)),
                    img_to_tensor(i_b.astype(np.float32)),
                    img_to_tensor(a.a.astype(np.float32)),
                    grids,
                    fg_mask=img_to_tensor(np.zeros_like(mask, dtype=np.float32)),
                )
            out[disoccluded] = tensor_to_img(filled).astype(np.float64)[disoccluded]
        else:
            out[disoccluded] = _diffuse_fill(img, disoccluded)[disoccluded]
    out[m_dst > 0] = warped_fg[m_dst > 0]
    return out.astype(np.float32)


def _diffuse_fill(img: np.ndarray, hole: np.ndarray) -> np.ndarray:
    u8 = np.clip((img + 1.0) * 127.5, 0, 255).astype(np.uint8)
    filled = cv2.inpaint(u8, hole.astype(np.uint8) * 255, 5, cv2.INPAINT_TELEA)
    return filled.astype(np.float64) / 127.5 - 1.0


def seam_metric(image: np.ndarray, boundary: np.ndarray) -> float:
    """Mean gradient magnitude on mask-boundary pixels (seam visibility proxy)."""
    gray = np.asarray(image, dtype=np.float64).mean(axis=-1)
    gx = cv2.Sobel(gray, cv2.CV_64F, 1, 0, ksize=3)
    gy = cv2.Sobel(gray, cv2.CV_64F, 0, 1, ksize=3)
    mag = np.hypot(gx, gy)
    if not boundary.any():
        return 0.0
    return float(mag[boundary].mean())


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    m = (np.asarray(mask) > 0).astype(np.uint8)
    er = cv2.erode(m, np.ones((3, 3), np.uint8))
    di = cv2.dilate(m, np.ones((3, 3), np.uint8))
    return (di - er) > 0


def save_image_grid(rows: list[list[np.ndarray]], path: str | Path, pad: int = 2) -> None:
    """Write a grid of [-1,1] RGB images as one PNG (report figures)."""
    if not rows or not rows[0]:
        raise InvalidInputError("empty image grid")
    h, w = rows[0][0].shape[:2]
    n_rows, n_cols = len(rows), max(len(r) for r in rows)
    canvas = np.ones((n_rows * (h + pad) - pad, n_cols * (w + pad) - pad, 3), dtype=np.float32)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y0, x0 = i * (h + pad), j * (w + pad)
            canvas[y0 : y0 + h, x0 : x0 + w] = np.asarray(img, dtype=np.float32)
    arr = np.clip((canvas + 1.0) * 127.5, 0, 255).astype(np.uint8)
    cv2.imwrite(str(path), cv2.cvtColor(arr, cv2.COLOR_RGB2BGR))


# ---------------------------------------------------------------------------
# Ablation orchestration
# ---------------------------------------------------------------------------


def run_ablation(
    records: list,
    out_dir: str | Path,
    *,
    model,
    base_config,
    variants=("full", "G-", "M+", "C-"),
    holdout: list | None = None,
) -> dict:
    """Train every variant under identical seeds and budget; emit one report."""
    from .generator import load_checkpoint, variant_config
    from .trainer import read_metrics, train

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report: dict = {"variants": {}, "budget_steps": base_config.max_steps, "seed": base_config.seed}
    for variant in variants:
        cfg = replace(base_config, variant=variant)
        vdir = out_dir / variant.replace("+", "plus").replace("-", "minus")
        ck = train(records, cfg, vdir, model)
        metrics = read_metrics(vdir)
        entry = {
            "checkpoint": str(ck),
            "steps": len(metrics),
            "l_r_trajectory": [m["l_r"] for m in metrics],
            "final_l_r": metrics[-1]["l_r"] if metrics else None,
            "config_fingerprint": variant_config(variant, base_config.resolution).fingerprint(),
        }
        if holdout:
            entry["holdout_l1"] = _holdout_l1(holdout, ck, model, cfg)
        report["variants"][variant] = entry
    (out_dir / "ablation_report.json").write_text(json.dumps(report, indent=2))
    return report


def _holdout_l1(records, checkpoint, model, cfg) -> float:
    import torch

    from .generator import composite, field_to_grids, img_to_tensor, load_checkpoint
    from .selfsup import TripletFactory

    gen = load_checkpoint(checkpoint)
    factory = TripletFactory(model)
    losses = []
    for i, rec in enumerate(records):
        t = factory.make(rec, 77_000 + i)
        with torch.no_grad():
            grids = field_to_grids(t.t_t, gen.level_resolutions(*t.target.shape[:2]))
            out = gen(
                img_to_tensor(t.i_f_t),
                img_to_tensor(t.i_b),
                img_to_tensor(t.a.a.astype(np.float32)),
                grids,
                fg_mask=img_to_tensor(t.deformed_mask.astype(np.float32)),
            )
            i_t = composite(img_to_tensor(t.target), out, img_to_tensor(t.a.a.astype(np.float32)))
            losses.append(float((img_to_tensor(t.target) - i_t).abs().mean()))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------


def measure_latency(pipeline, image: np.ndarray, image_id: str = "latency_probe", runs: int = 5, sliders=None) -> dict:
    """Wall-clock medians for the preprocess and warm reshape paths."""
    from .body_model import SemanticSliders

    if sliders is None:
        sliders = SemanticSliders(d_weight=10.0)
    t0 = time.time()
    outcome = pipeline.preprocess(image, image_id)
    preprocess_s = time.time() - t0

    cache = pipeline.encode_foreground_cache(outcome.record)
    cold_start = time.time()
    pipeline.reshape(outcome.record, sliders, cache)
    cold_s = time.time() - cold_start

    warm = []
    for _ in range(max(runs, 5)):
        t0 = time.time()
        pipeline.reshape(outcome.record, sliders, cache)
        warm.append(time.time() - t0)
    return {
        "preprocess_s": preprocess_s,
        "reshape_s": statistics.median(warm),
        "reshape_cold_s": cold_s,
        "reshape_variance_s2": statistics.pvariance(warm),
        "runs": len(warm),
        "cold_included": True,
    }
