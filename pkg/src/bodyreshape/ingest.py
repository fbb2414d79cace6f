"""Dataset ingestion: external-model adapters, filtering, cropping, manifests.

Keypoint detection, person segmentation, and initial parameter regression are
consumed through adapters with two implementations each: a fixture replay
(deterministic, offline) and an external-process client.  Filtering and the
crop rules follow the dataset preparation recipe: records with fewer than six
visible keypoints are dropped, as are records whose fitted silhouette covers
less than half of the person mask.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass, field, asdict
from pathlib import Path

import cv2
import numpy as np

from . import body_model as bmod
from .body_model import BodyModel, CameraParams, PoseParams, ShapeParams
from .errors import DependencyError, InvalidInputError
from .fitting import FitResult, Keypoints2D, PersonMask
from .rendering import hard_silhouette, project

BBOX_PAD_FRACTION = 0.10


# ---------------------------------------------------------------------------
# Records and manifests
# ---------------------------------------------------------------------------

STATUS_ORDER = ("raw", "annotated", "fitted", "ready", "rejected")


@dataclass
class CropTransform:
    """Affine map from original-image pixels to crop pixels: p' = (p - offset) * scale."""

    offset: tuple[float, float]
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.offset)) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + np.asarray(self.offset)


@dataclass
class ImageRecord:
    image_id: str
    image_path: str
    image: np.ndarray | None = None  # [H,W,3] float32 in [-1,1], RGB
    keypoints: Keypoints2D | None = None
    mask: PersonMask | None = None
    fit: FitResult | None = None
    crop: CropTransform | None = None
    source_tag: str = "indoor"
    status: str = "raw"
    reject_reason: str | None = None

    def advance(self, status: str) -> None:
        if STATUS_ORDER.index(status) < STATUS_ORDER.index(self.status):
            raise InvalidInputError(f"status may not regress: {self.status} -> {status}")
        self.status = status


@dataclass
class Manifest:
    records: list[dict] = field(default_factory=list)
    split: str = "all"
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r["image_id"] for r in self.records]
        if len(ids) != len(set(ids)):
            raise InvalidInputError("manifest contains duplicate image ids")


def record_to_row(record: ImageRecord) -> dict:
    row = {
        "image_id": record.image_id,
        "image_path": record.image_path,
        "source_tag": record.source_tag,
        "status": record.status,
        "reject_reason": record.reject_reason,
    }
    if record.crop is not None:
        row["crop"] = {"offset": list(record.crop.offset), "scale": record.crop.scale}
    if record.keypoints is not None:
        row["keypoints"] = {
            "points": record.keypoints.points.tolist(),
            "confidence": record.keypoints.confidence.tolist(),
            "skeleton_format": record.keypoints.skeleton_format,
        }
    if record.mask is not None:
        row["mask_path"] = row["image_path"] + ".mask.png"
    if record.fit is not None:
        row["fit"] = {
            "beta": record.fit.beta.beta.tolist(),
            "theta": record.fit.theta.theta.tolist(),
            "camera": {
                "scale": record.fit.camera.scale,
                "translation": list(record.fit.camera.translation),
                "image_size": list(record.fit.camera.image_size),
            },
            "final_joint_energy": record.fit.final_joint_energy,
            "final_silhouette_energy": record.fit.final_silhouette_energy,
            "iterations_run": list(record.fit.iterations_run),
        }
    return row


def row_to_record(row: dict, load_image: bool = False) -> ImageRecord:
    rec = ImageRecord(
        image_id=row["image_id"],
        image_path=row["image_path"],
        source_tag=row.get("source_tag", "indoor"),
        status=row.get("status", "raw"),
        reject_reason=row.get("reject_reason"),
    )
    if "crop" in row:
        rec.crop = CropTransform(tuple(row["crop"]["offset"]), row["crop"]["scale"])
    if "keypoints" in row:
        kp = row["keypoints"]
        rec.keypoints = Keypoints2D(np.array(kp["points"]), np.array(kp["confidence"]), kp["skeleton_format"])
    if "fit" in row:
        f = row["fit"]
        rec.fit = FitResult(
            beta=ShapeParams(np.array(f["beta"])),
            theta=PoseParams(np.array(f["theta"])),
            camera=CameraParams(
                scale=f["camera"]["scale"],
                translation=np.array(f["camera"]["translation"]),
                image_size=tuple(f["camera"]["image_size"]),
            ),
            final_joint_energy=f["final_joint_energy"],
            final_silhouette_energy=f["final_silhouette_energy"],
            iterations_run=tuple(f["iterations_run"]),
        )
    if load_image:
        rec.image = load_image_file(row["image_path"])
        if "mask_path" in row:
            m = cv2.imread(row["mask_path"], cv2.IMREAD_GRAYSCALE)
            if m is None:
                raise DependencyError(f"missing mask file {row['mask_path']}")
            rec.mask = PersonMask.from_array(m > 127)
    return rec


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(json.dumps({"_meta": {"split": manifest.split, "stats": manifest.stats}}) + "\n")
        for row in manifest.records:
            fh.write(json.dumps(row) + "\n")


def load_manifest(path: str | Path) -> Manifest:
    lines = Path(path).read_text().splitlines()
    meta = {"split": "all", "stats": {}}
    records = []
    for line in lines:
        if not line.strip():
            continue
        obj = json.loads(line)
        if "_meta" in obj:
            meta = obj["_meta"]
        else:
            records.append(obj)
    return Manifest(records=records, split=meta.get("split", "all"), stats=meta.get("stats", {}))


def split_manifest(manifest: Manifest, train_fraction: float = 0.85, seed: int = 0) -> tuple[Manifest, Manifest]:
    """Disjoint train/test split; the train share lands within one item of the ratio."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(manifest.records))
    n_train = int(round(train_fraction * len(order)))
    train_idx = set(order[:n_train].tolist())
    train = [r for i, r in enumerate(manifest.records) if i in train_idx]
    test = [r for i, r in enumerate(manifest.records) if i not in train_idx]
    return (
        Manifest(records=train, split="train", stats={"total": len(order)}),
        Manifest(records=test, split="test", stats={"total": len(order)}),
    )


# ---------------------------------------------------------------------------
# Image IO ([-1, 1] RGB float convention)
# ---------------------------------------------------------------------------


def load_image_file(path: str | Path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise InvalidInputError(f"cannot decode image {path}")
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    return (rgb.astype(np.float32) / 127.5) - 1.0


def save_image_file(img: np.ndarray, path: str | Path) -> None:
    arr = np.clip((np.asarray(img, dtype=np.float32) + 1.0) * 127.5, 0, 255).astype(np.uint8)
    cv2.imwrite(str(path), cv2.cvtColor(arr, cv2.COLOR_RGB2BGR))


def decode_image_bytes(data: bytes) -> np.ndarray:
    buf = np.frombuffer(data, dtype=np.uint8)
    bgr = cv2.imdecode(buf, cv2.IMREAD_COLOR)
    if bgr is None:
        raise InvalidInputError("cannot decode uploaded image")
    return (cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 127.5) - 1.0


def encode_image_png(img: np.ndarray) -> bytes:
    arr = np.clip((np.asarray(img, dtype=np.float32) + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    ok, buf = cv2.imencode(".png", cv2.cvtColor(arr, cv2.COLOR_RGB2BGR))
    if not ok:
        raise InvalidInputError("PNG encoding failed")
    return buf.tobytes()


# ---------------------------------------------------------------------------
# Adapters
# ---------------------------------------------------------------------------


def parse_pose_json(payload: dict, skeleton_format: str = "body25") -> list[Keypoints2D]:
    """Parse the standard pose-detector output layout (people + flattened triples)."""
    people = payload.get("people", [])
    out = []
    for person in people:
        flat = np.asarray(person["pose_keypoints_2d"], dtype=np.float64).reshape(-1, 3)
        out.append(Keypoints2D(flat[:, :2], np.clip(flat[:, 2], 0.0, 1.0), skeleton_format))
    return out


class FixtureKeypointDetector:
    """Replays stored detections from ``<id>_keypoints.json`` files."""

    def __init__(self, fixtures_dir: str | Path, skeleton_format: str = "body25"):
        self.dir = Path(fixtures_dir)
        self.skeleton_format = skeleton_format

    def detect(self, image: np.ndarray, image_id: str) -> list[Keypoints2D]:
        path = self.dir / f"{image_id}_keypoints.json"
        if not path.exists():
            raise DependencyError(f"keypoint fixture missing: {path}")
        return parse_pose_json(json.loads(path.read_text()), self.skeleton_format)


class FixturePersonSegmenter:
    """Replays stored masks from ``<id>_mask_<k>.png`` files."""

    def __init__(self, fixtures_dir: str | Path):
        self.dir = Path(fixtures_dir)

    def segment(self, image: np.ndarray, image_id: str) -> list[PersonMask]:
        masks = []
        for k in range(32):
            path = self.dir / f"{image_id}_mask_{k}.png"
            if not path.exists():
                break
            m = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
            if m is None:
                raise DependencyError(f"unreadable mask fixture {path}")
            if (m > 127).any():
                masks.append(PersonMask.from_array(m > 127))
        return masks


class FixtureInitialEstimator:
    """Replays stored initial parameters from ``<id>_init[_<person>].json`` files."""

    def __init__(self, fixtures_dir: str | Path):
        self.dir = Path(fixtures_dir)

    def estimate(
        self, crop224: np.ndarray, image_id: str, person_index: int | None = None
    ) -> tuple[ShapeParams, PoseParams, CameraParams]:
        candidates = []
        if person_index is not None:
            candidates.append(self.dir / f"{image_id}_init_{person_index}.json")
        candidates.append(self.dir / f"{image_id}_init.json")
        path = next((p for p in candidates if p.exists()), None)
        if path is None:
            raise DependencyError(f"initial-estimate fixture missing: {candidates[-1]}")
        data = json.loads(path.read_text())
        cam = data["camera"]
        return (
            ShapeParams(np.array(data["beta"])),
            PoseParams(np.array(data["theta"])),
            CameraParams(cam["scale"], np.array(cam["translation"]), tuple(cam["image_size"])),
        )


class CommandAdapter:
    """External-process client: runs a command on an image file, parses JSON stdout.

    The command receives the image path as its final argument.
    """

    def __init__(self, command: list[str]):
        self.command = list(command)

    def run(self, image_path: str | Path) -> dict:
        try:
            out = subprocess.run(
                [*self.command, str(image_path)], capture_output=True, check=True, timeout=120
            )
        except (OSError, subprocess.SubprocessError) as exc:
            raise DependencyError(f"external adapter failed: {exc}") from exc
        return json.loads(out.stdout.decode())


class CommandKeypointDetector(CommandAdapter):
    def __init__(self, command: list[str], skeleton_format: str = "body25"):
        super().__init__(command)
        self.skeleton_format = skeleton_format

    def detect_file(self, image_path: str | Path) -> list[Keypoints2D]:
        return parse_pose_json(self.run(image_path), self.skeleton_format)


# ---------------------------------------------------------------------------
# Filtering and cropping
# ---------------------------------------------------------------------------

MIN_VISIBLE_KEYPOINTS = 6
MIN_SILHOUETTE_COVERAGE = 0.5


def filter_record(record: ImageRecord, model: BodyModel | None = None) -> tuple[str, str | None]:
    """Dataset admission rules; returns ("accept", None) or ("reject", reason)."""
    if record.keypoints is None or record.keypoints.num_visible < MIN_VISIBLE_KEYPOINTS:
        return "reject", f"keypoints<{MIN_VISIBLE_KEYPOINTS}"
    if record.fit is not None and record.mask is not None and model is not None:
        mesh = bmod.forward(model, record.fit.beta, record.fit.theta)
        sil = hard_silhouette(
            project(mesh.vertices, record.fit.camera),
            mesh.vertices[:, 2],
            mesh.faces,
            record.mask.mask.shape,
        )
        mask = record.mask.mask > 0
        coverage = float((sil.astype(bool) & mask).sum()) / max(float(mask.sum()), 1.0)
        if coverage < MIN_SILHOUETTE_COVERAGE:
            return "reject", f"coverage<{MIN_SILHOUETTE_COVERAGE}"
    return "accept", None


def square_crop_window(bbox: tuple[int, int, int, int], pad_fraction: float = BBOX_PAD_FRACTION):
    """Padded square window (cx, cy, side) around a bbox."""
    x0, y0, bw, bh = bbox
    cx = x0 + bw / 2.0
    cy = y0 + bh / 2.0
    side = max(bw, bh) * (1.0 + 2.0 * pad_fraction)
    return cx, cy, side


def crop_and_resize(record: ImageRecord, target: int) -> ImageRecord:
    """Square crop around the padded person bbox, resized to target resolution.

    Keypoints, mask, and camera are transformed consistently; out-of-frame
    crop area replicates edge pixels.
    """
    if record.mask is None or record.image is None:
        raise InvalidInputError("crop requires a decoded image and a person mask")
    bbox = record.mask.bbox
    if bbox[2] < 4 or bbox[3] < 4:
        raise InvalidInputError("degenerate person bbox")
    cx, cy, side = square_crop_window(bbox)
    scale = target / side
    offset = (cx - side / 2.0, cy - side / 2.0)
    matrix = np.array([[scale, 0.0, -offset[0] * scale], [0.0, scale, -offset[1] * scale]])

    img = cv2.warpAffine(
        record.image, matrix, (target, target), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE
    )
    mask = cv2.warpAffine(
        record.mask.mask.astype(np.uint8),
        matrix,
        (target, target),
        flags=cv2.INTER_NEAREST,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0,
    )
    crop = CropTransform(offset=offset, scale=scale)

    out = ImageRecord(
        image_id=record.image_id,
        image_path=record.image_path,
        image=img,
        mask=PersonMask.from_array(mask > 0),
        crop=crop,
        source_tag=record.source_tag,
        status=record.status,
    )
    if record.keypoints is not None:
        out.keypoints = Keypoints2D(
            crop.apply(record.keypoints.points), record.keypoints.confidence, record.keypoints.skeleton_format
        )
    if record.fit is not None:
        cam = record.fit.camera
        out.fit = FitResult(
            beta=record.fit.beta,
            theta=record.fit.theta,
            camera=CameraParams(
                scale=cam.scale * scale,
                translation=crop.apply(cam.translation),
                image_size=(target, target),
            ),
            final_joint_energy=record.fit.final_joint_energy,
            final_silhouette_energy=record.fit.final_silhouette_energy,
            iterations_run=record.fit.iterations_run,
        )
    return out
